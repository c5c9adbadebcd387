//! WebAssembly bindings for `www/index.html`.
//!
//! Build with `wasm-pack build crates/demo --target web --out-dir www/pkg`
//! and serve `crates/demo/www/` with any static file server.

use rand::Rng;
use simcl_core::augment::{make_view_pair, preset, FloatImage};
use simcl_core::dataio::{generate_shapes, SyntheticShapesSpec, IMAGE_SIDE};
use simcl_core::learn::nt_xent_value;
use simcl_core::tensor::Tensor;
use simcl_core::RngStream;
use wasm_bindgen::prelude::*;

pub const SIDE: usize = IMAGE_SIDE;

fn js_err(e: simcl_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &FloatImage) -> Vec<u8> {
    img.data()
        .chunks(3)
        .flat_map(|p| [p[0], p[1], p[2], 1.0].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

fn sample(class: usize, noise: f64, seed: u64) -> simcl_core::Result<FloatImage> {
    let spec = SyntheticShapesSpec { num_classes: (class + 1).max(2), per_class: 1, noise_std: noise, seed, test_fraction: 0.0, val_fraction: 0.0, ..Default::default() };
    let ds = generate_shapes(&spec)?;
    FloatImage::from_bytes(SIDE, SIDE, ds.image(class))
}

/// One generated image of `class`, as 32×32 RGBA.
#[wasm_bindgen]
pub fn render_shape(class: usize, noise: f64, seed: u64) -> Result<Vec<u8>, JsError> {
    sample(class, noise, seed).map(|i| rgba(&i)).map_err(js_err)
}

/// Two views of the same image under a named preset, stacked vertically
/// as 32×64 RGBA.
#[wasm_bindgen]
pub fn view_pair(class: usize, noise: f64, preset_name: &str, seed: u64) -> Result<Vec<u8>, JsError> {
    let img = sample(class, noise, seed).map_err(js_err)?;
    let pipeline = preset(preset_name).map_err(js_err)?;
    let pair = make_view_pair(&img, &pipeline, &RngStream::new(seed).fork_named("views"), 0);
    let mut out = rgba(&pair.x1);
    out.extend(rgba(&pair.x2));
    Ok(out)
}

/// NT-Xent loss of `pairs` random embedding pairs at each temperature.
/// Each positive is its anchor with every coordinate moved uniformly
/// within ±`spread`; 0 makes positives identical.
#[wasm_bindgen]
pub fn loss_curve(pairs: usize, dim: usize, spread: f64, temperatures: Vec<f64>, seed: u64) -> Result<Vec<f64>, JsError> {
    if pairs < 2 || dim == 0 {
        return Err(JsError::new("need at least two pairs and one dimension"));
    }
    let mut rng = RngStream::new(seed);
    let mut z = Vec::with_capacity(2 * pairs * dim);
    for _ in 0..pairs {
        let anchor: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let positive: Vec<f64> = anchor.iter().map(|a| a + spread * (rng.random::<f64>() * 2.0 - 1.0)).collect();
        z.extend(anchor);
        z.extend(positive);
    }
    let t = Tensor::<f64>::from_f64_slice(&[2 * pairs, dim], &z).map_err(js_err)?;
    temperatures.into_iter().map(|tau| nt_xent_value(&t, tau).map_err(js_err)).collect()
}

/// Preset names in menu order.
#[wasm_bindgen]
pub fn preset_names() -> Vec<String> {
    simcl_core::augment::Preset::ALL.iter().map(|p| p.name().to_string()).collect()
}

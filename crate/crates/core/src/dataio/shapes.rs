use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ImageDataset, Split, IMAGE_BYTES, IMAGE_SIDE};
use crate::augment::color::{hsv_to_rgb, luminance};
use crate::{Error, Result, RngStream};

const SHAPE_KINDS: usize = 10;
const BACKGROUND: f32 = 0.12;
const SENSOR_NOISE: f32 = 0.04;

/// Recipe for a generated dataset: class `k` is shape `k mod 10` drawn in
/// its own hue, with nuisance variation scaled by `noise_std`.
///
/// Each image shows a random window of the class canvas (area between
/// half and twice the canvas, aspect within [3/4, 4/3]), possibly
/// mirrored, under brightness, contrast, saturation and hue jitter,
/// sometimes in grey, plus Gaussian sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticShapesSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// 0 gives exact templates; larger values widen every nuisance range
    /// together.
    pub noise_std: f64,
    pub seed: u64,
    /// Share of each class held out as test.
    pub test_fraction: f64,
    /// Share of the remaining train images carved into validation.
    pub val_fraction: f64,
}

impl Default for SyntheticShapesSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            per_class: 100,
            image_size: IMAGE_SIDE,
            noise_std: 0.0,
            seed: 0,
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

/// Per-image variation. The visible window of the canvas is `w`×`h` (as
/// fractions of the canvas side) at offset `(x0, y0)`.
#[derive(Debug, Clone, Copy)]
struct Nuisance {
    x0: f32,
    y0: f32,
    w: f32,
    h: f32,
    mirror: bool,
    brightness: f32,
    contrast: f32,
    saturation: f32,
    hue: f32,
    gray: bool,
}

impl Default for Nuisance {
    fn default() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            w: 1.0,
            h: 1.0,
            mirror: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            gray: false,
        }
    }
}

fn class_hue(k: usize) -> f32 {
    (0.13 + k as f64 * 0.618_033_988_75).fract() as f32
}

fn inside(kind: usize, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    match kind {
        0 => r2 < 0.55 * 0.55,
        1 => u.abs() < 0.45 && v.abs() < 0.45,
        2 => (-0.5..0.55).contains(&u) && v.abs() < 0.55 * (0.55 - u) / 1.05,
        3 => r2 < 0.55 * 0.55 && r2 > 0.3 * 0.3,
        4 => u.abs() < 0.6 && v.abs() < 0.18,
        5 => v.abs() < 0.6 && u.abs() < 0.18,
        6 => (u.abs() < 0.15 && v.abs() < 0.55) || (v.abs() < 0.15 && u.abs() < 0.55),
        7 => {
            ((-0.45..-0.15).contains(&u) && (-0.5..0.5).contains(&v))
                || ((0.2..0.5).contains(&v) && (-0.45..0.45).contains(&u))
        }
        8 => (u + v).abs() < 0.22 && u.abs() < 0.55 && v.abs() < 0.55,
        _ => {
            let a = (u + 0.3).powi(2) + (v + 0.3).powi(2);
            let b = (u - 0.3).powi(2) + (v - 0.3).powi(2);
            a < 0.22 * 0.22 || b < 0.22 * 0.22
        }
    }
}

/// HWC float image for class `k` under the given nuisance, before sensor
/// noise and quantisation.
fn render(k: usize, n: &Nuisance) -> Vec<f32> {
    let side = IMAGE_SIDE as f32;
    let sat = (0.85 * n.saturation).clamp(0.0, 1.0);
    let fg = hsv_to_rgb((class_hue(k) + n.hue).rem_euclid(1.0), sat, 0.9);
    let kind = k % SHAPE_KINDS;
    let mut out = Vec::with_capacity(IMAGE_BYTES);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let mut cover = 0.0f32;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let px = 2.0 * (n.x0 + (x as f32 + sx) / side * n.w) - 1.0;
                let py = 2.0 * (n.y0 + (y as f32 + sy) / side * n.h) - 1.0;
                if inside(kind, if n.mirror { -px } else { px }, py) {
                    cover += 0.25;
                }
            }
            for c in fg {
                out.push((BACKGROUND * (1.0 - cover) + c * cover) * n.brightness);
            }
        }
    }
    if n.contrast != 1.0 {
        let mean = out.chunks_exact(3).map(|p| luminance(p[0], p[1], p[2]) as f64).sum::<f64>()
            / (IMAGE_SIDE * IMAGE_SIDE) as f64;
        for v in out.iter_mut() {
            *v = mean as f32 + (*v - mean as f32) * n.contrast;
        }
    }
    if n.gray {
        for p in out.chunks_exact_mut(3) {
            let g = luminance(p[0], p[1], p[2]);
            p.fill(g);
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The noiseless class template, as 8-bit pixels.
pub fn render_template(k: usize) -> Vec<u8> {
    render(k, &Nuisance::default()).into_iter().map(quantize).collect()
}

/// Draws a nuisance at strength `sigma`. Framing, mirroring and photometric
/// ranges saturate at `sigma = 1`; sensor noise keeps growing.
fn sample_image(k: usize, sigma: f32, rng: &mut RngStream) -> Vec<u8> {
    let m = sigma.min(1.0);
    let u: [f32; 10] = std::array::from_fn(|_| rng.random());
    let sym = |u: f32, half: f32| (2.0 * u - 1.0) * half;
    let area = sym(u[0], 2f32.ln() * m).exp();
    let aspect = sym(u[1], (4.0f32 / 3.0).ln() * m).exp();
    let w = (area * aspect).sqrt();
    let h = (area / aspect).sqrt();
    let n = Nuisance {
        x0: u[2] * (1.0 - w),
        y0: u[3] * (1.0 - h),
        w,
        h,
        mirror: u[4] < 0.5 * m,
        brightness: 1.0 + sym(u[5], 0.4 * m),
        contrast: 1.0 + sym(u[6], 0.4 * m),
        saturation: 1.0 + sym(u[7], 0.4 * m),
        hue: sym(u[8], 0.1 * m),
        gray: u[9] < 0.2 * m,
    };
    let mut img = render(k, &n);
    for v in img.iter_mut() {
        let e: f32 = rng.sample(StandardNormal);
        *v += e * SENSOR_NOISE * sigma;
    }
    img.into_iter().map(quantize).collect()
}

/// Fraction of images whose nearest class template (squared pixel
/// distance, ties to the lowest class) is their own class.
pub fn nearest_template_accuracy(ds: &ImageDataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let templates: Vec<Vec<u8>> = (0..ds.num_classes()).map(render_template).collect();
    let hits = (0..ds.len())
        .filter(|&i| {
            let img = ds.image(i);
            let mut best = (u64::MAX, 0);
            for (k, t) in templates.iter().enumerate() {
                let d: u64 = img.iter().zip(t).map(|(&a, &b)| (a as i64 - b as i64).pow(2) as u64).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1 == ds.label(i)
        })
        .count();
    hits as f64 / ds.len() as f64
}

pub fn generate_shapes(spec: &SyntheticShapesSpec) -> Result<ImageDataset> {
    if spec.num_classes < 2 {
        return Err(Error::config(format!("synthetic shapes need at least 2 classes, got {}", spec.num_classes)));
    }
    if spec.per_class == 0 {
        return Err(Error::config("per_class must be positive"));
    }
    if spec.image_size != IMAGE_SIDE {
        return Err(Error::config(format!("image_size must be {IMAGE_SIDE}, got {}", spec.image_size)));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::config("noise_std must be a non-negative number"));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) || !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::config("test_fraction and val_fraction must lie in [0, 1)"));
    }
    let k = spec.num_classes;
    let total = k * spec.per_class;
    let test_per_class = (spec.test_fraction * spec.per_class as f64).round() as usize;
    let root = RngStream::new(spec.seed).fork_named("shapes");
    let mut images = Vec::with_capacity(total * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for i in 0..total {
        let (class, rank) = (i % k, i / k);
        let mut rng = root.fork(i as u64);
        images.extend(sample_image(class, spec.noise_std as f32, &mut rng));
        labels.push(class as u32);
        splits.push(if rank >= spec.per_class - test_per_class { Split::Test } else { Split::Train });
    }
    let mut ds = ImageDataset::new(format!("shapes-k{k}"), k, images, labels, splits)?;
    ds.carve_validation(spec.val_fraction, spec.seed)?;
    ds.template_ceiling = Some(nearest_template_accuracy(&ds));
    Ok(ds)
}

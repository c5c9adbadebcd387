//! Seedable image transforms and the named presets that compose them.
//!
//! Every transform consumes a fixed number of draws from the supplied
//! [`RngStream`] in a fixed order, so `(image, pipeline, seed)` determines
//! the output bits. Draw order per op:
//!
//! * `RandomCropResize`: area fraction, aspect ratio, x offset, y offset.
//! * `RandomHorizontalFlip`: one uniform compared against the probability.
//! * `ColorDistortion`: brightness, contrast, saturation, hue, grey gate.
//!
//! Cropping resamples with corner-aligned bilinear interpolation: output
//! pixel `i` of an `n`-pixel axis reads source position
//! `offset + i·(extent − 1)/(n − 1)` of a crop `extent` pixels long, with
//! neighbours clamped to the image.

pub mod color;
pub mod golden;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, RngStream};
use color::{hsv_to_rgb, luminance, rgb_to_hsv};

/// Default crop area range; small images need a floor so the subject stays
/// in frame.
pub const DEFAULT_CROP_AREA: (f32, f32) = (0.3, 1.0);
pub const DEFAULT_FLIP_PROBABILITY: f32 = 0.5;
pub const DEFAULT_COLOR_STRENGTH: f32 = 0.5;
pub const GRAYSCALE_PROBABILITY: f32 = 0.2;
const ASPECT_RANGE: (f32, f32) = (3.0 / 4.0, 4.0 / 3.0);

/// HWC float image, channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{} values for a {height}×{width}×3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// 8-bit HWC pixels scaled to [0, 1].
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn px(&self, y: usize, x: usize) -> &[f32] {
        let at = (y * self.width + x) * 3;
        &self.data[at..at + 3]
    }

    /// Appends the image to `dst` in CHW order.
    pub fn write_chw(&self, dst: &mut Vec<f32>) {
        for c in 0..3 {
            dst.extend(self.data.iter().skip(c).step_by(3));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    RandomCropResize { min_area_fraction: f32, max_area_fraction: f32 },
    RandomHorizontalFlip { probability: f32 },
    ColorDistortion { strength: f32 },
}

impl AugmentOp {
    pub fn crop() -> Self {
        AugmentOp::RandomCropResize {
            min_area_fraction: DEFAULT_CROP_AREA.0,
            max_area_fraction: DEFAULT_CROP_AREA.1,
        }
    }

    pub fn flip() -> Self {
        AugmentOp::RandomHorizontalFlip { probability: DEFAULT_FLIP_PROBABILITY }
    }

    pub fn color() -> Self {
        AugmentOp::ColorDistortion { strength: DEFAULT_COLOR_STRENGTH }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentOp::RandomCropResize { min_area_fraction: lo, max_area_fraction: hi } => {
                if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
                    return Err(Error::config(format!("crop area range [{lo}, {hi}] must satisfy 0 < min ≤ max ≤ 1")));
                }
            }
            AugmentOp::RandomHorizontalFlip { probability: p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(format!("flip probability {p} outside [0, 1]")));
                }
            }
            AugmentOp::ColorDistortion { strength: s } => {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::config(format!("color strength {s} must be non-negative")));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, img: &FloatImage, rng: &mut RngStream) -> FloatImage {
        match *self {
            AugmentOp::RandomCropResize { min_area_fraction, max_area_fraction } => {
                let area = min_area_fraction + (max_area_fraction - min_area_fraction) * rng.random::<f32>();
                let aspect = ASPECT_RANGE.0 + (ASPECT_RANGE.1 - ASPECT_RANGE.0) * rng.random::<f32>();
                let (ux, uy) = (rng.random::<f32>(), rng.random::<f32>());
                crop_resize(img, area, aspect, ux, uy)
            }
            AugmentOp::RandomHorizontalFlip { probability } => {
                let u: f32 = rng.random();
                if u < probability {
                    hflip(img)
                } else {
                    img.clone()
                }
            }
            AugmentOp::ColorDistortion { strength } => {
                let mut jitter = || 2.0 * rng.random::<f32>() - 1.0;
                let brightness = 1.0 + 0.8 * strength * jitter();
                let contrast = 1.0 + 0.8 * strength * jitter();
                let saturation = 1.0 + 0.8 * strength * jitter();
                let hue = 0.2 * strength * jitter();
                let gray = rng.random::<f32>() < GRAYSCALE_PROBABILITY;
                color_distort(img, brightness, contrast, saturation, hue, gray)
            }
        }
    }

    fn label(&self) -> &'static str {
        match self {
            AugmentOp::RandomCropResize { .. } => "crop",
            AugmentOp::RandomHorizontalFlip { .. } => "flip",
            AugmentOp::ColorDistortion { .. } => "color",
        }
    }
}

fn crop_resize(img: &FloatImage, area: f32, aspect: f32, ux: f32, uy: f32) -> FloatImage {
    let (h, w) = (img.height, img.width);
    let total = (h * w) as f32;
    let cw = (area * total * aspect).sqrt().clamp(1.0, w as f32);
    let ch = (area * total / aspect).sqrt().clamp(1.0, h as f32);
    let x0 = ux * (w as f32 - cw);
    let y0 = uy * (h as f32 - ch);
    let step = |extent: f32, n: usize| if n > 1 { (extent - 1.0) / (n - 1) as f32 } else { 0.0 };
    let (sx, sy) = (step(cw, w), step(ch, h));
    let mut out = Vec::with_capacity(img.data.len());
    for i in 0..h {
        let fy = y0 + i as f32 * sy;
        let ylo = (fy.floor() as usize).min(h - 1);
        let yhi = (ylo + 1).min(h - 1);
        let ty = fy - ylo as f32;
        for j in 0..w {
            let fx = x0 + j as f32 * sx;
            let xlo = (fx.floor() as usize).min(w - 1);
            let xhi = (xlo + 1).min(w - 1);
            let tx = fx - xlo as f32;
            let (a, b, c, d) = (img.px(ylo, xlo), img.px(ylo, xhi), img.px(yhi, xlo), img.px(yhi, xhi));
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * tx;
                let bottom = c[k] + (d[k] - c[k]) * tx;
                out.push((top + (bottom - top) * ty).clamp(0.0, 1.0));
            }
        }
    }
    FloatImage { height: h, width: w, data: out }
}

fn hflip(img: &FloatImage) -> FloatImage {
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            out.extend_from_slice(img.px(y, x));
        }
    }
    FloatImage { height: img.height, width: img.width, data: out }
}

/// Brightness, contrast, saturation and hue jitter in that order, each
/// clamped to [0, 1], then optional greyscale.
fn color_distort(img: &FloatImage, brightness: f32, contrast: f32, saturation: f32, hue: f32, gray: bool) -> FloatImage {
    let mut data: Vec<f32> = img.data.iter().map(|&v| (v * brightness).clamp(0.0, 1.0)).collect();

    let mean = data.chunks_exact(3).map(|p| luminance(p[0], p[1], p[2]) as f64).sum::<f64>() / (data.len() / 3) as f64;
    let mean = mean as f32;
    for v in data.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }

    for p in data.chunks_exact_mut(3) {
        let g = luminance(p[0], p[1], p[2]);
        for v in p.iter_mut() {
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }

    for p in data.chunks_exact_mut(3) {
        let [h, s, v] = rgb_to_hsv(p[0], p[1], p[2]);
        let rgb = hsv_to_rgb((h + hue).rem_euclid(1.0), s, v);
        for (dst, src) in p.iter_mut().zip(rgb) {
            *dst = src.clamp(0.0, 1.0);
        }
    }

    if gray {
        gray_in_place(&mut data);
    }
    FloatImage { height: img.height, width: img.width, data }
}

fn gray_in_place(data: &mut [f32]) {
    for p in data.chunks_exact_mut(3) {
        let g = luminance(p[0], p[1], p[2]).clamp(0.0, 1.0);
        p.fill(g);
    }
}

/// Replaces every pixel by its luma.
pub fn grayscale(img: &FloatImage) -> FloatImage {
    let mut data = img.data.clone();
    gray_in_place(&mut data);
    FloatImage { height: img.height, width: img.width, data }
}

/// Table-of-presets row names, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Crop,
    Flip,
    Color,
    CropColor,
    FlipCrop,
    All,
    None,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Crop,
        Preset::Flip,
        Preset::Color,
        Preset::CropColor,
        Preset::FlipCrop,
        Preset::All,
        Preset::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Crop => "crop",
            Preset::Flip => "flip",
            Preset::Color => "color",
            Preset::CropColor => "crop_color",
            Preset::FlipCrop => "flip_crop",
            Preset::All => "all",
            Preset::None => "none",
        }
    }

    pub fn ops(self) -> Vec<AugmentOp> {
        use AugmentOp as Op;
        match self {
            Preset::Crop => vec![Op::crop()],
            Preset::Flip => vec![Op::flip()],
            Preset::Color => vec![Op::color()],
            Preset::CropColor => vec![Op::crop(), Op::color()],
            Preset::FlipCrop => vec![Op::flip(), Op::crop()],
            Preset::All => vec![Op::crop(), Op::flip(), Op::color()],
            Preset::None => vec![],
        }
    }

    /// Number of distinct operations in the preset.
    pub fn op_count(self) -> usize {
        self.ops().len()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown augmentation preset `{s}`")))
    }
}

/// Ordered list of transforms; applied exactly in list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPipeline {
    pub name: String,
    pub ops: Vec<AugmentOp>,
}

/// Two independently augmented views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub x1: FloatImage,
    pub x2: FloatImage,
    pub source: usize,
}

pub fn preset(name: &str) -> Result<AugmentPipeline> {
    Ok(AugmentPipeline::from(name.parse::<Preset>()?))
}

impl From<Preset> for AugmentPipeline {
    fn from(p: Preset) -> Self {
        Self { name: p.name().to_string(), ops: p.ops() }
    }
}

impl AugmentPipeline {
    pub fn new(ops: Vec<AugmentOp>) -> Result<Self> {
        ops.iter().try_for_each(AugmentOp::validate)?;
        let name = if ops.is_empty() {
            "none".to_string()
        } else {
            ops.iter().map(AugmentOp::label).collect::<Vec<_>>().join("_")
        };
        Ok(Self { name, ops })
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn apply(&self, img: &FloatImage, rng: &mut RngStream) -> FloatImage {
        let mut cur = img.clone();
        for op in &self.ops {
            cur = op.apply(&cur, rng);
        }
        cur
    }

    /// Converts 8-bit HWC pixels and applies the pipeline.
    pub fn apply_bytes(&self, bytes: &[u8], height: usize, width: usize, rng: &mut RngStream) -> Result<FloatImage> {
        let img = FloatImage::from_bytes(height, width, bytes)?;
        Ok(self.apply(&img, rng))
    }
}

/// View `x1` draws from `rng.fork(1)`, view `x2` from `rng.fork(2)`.
pub fn make_view_pair(img: &FloatImage, pipeline: &AugmentPipeline, rng: &RngStream, source: usize) -> ViewPair {
    ViewPair {
        x1: pipeline.apply(img, &mut rng.fork(1)),
        x2: pipeline.apply(img, &mut rng.fork(2)),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u64, h: usize, w: usize) -> FloatImage {
        let mut rng = RngStream::new(seed);
        FloatImage::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn preset_composition() {
        assert!(preset("none").unwrap().is_empty());
        let all = preset("all").unwrap();
        assert_eq!(all.ops.len(), 3);
        assert!(matches!(all.ops[0], AugmentOp::RandomCropResize { .. }));
        assert!(matches!(all.ops[2], AugmentOp::ColorDistortion { .. }));
        let cc = preset("crop_color").unwrap();
        assert!(matches!(cc.ops[..], [AugmentOp::RandomCropResize { .. }, AugmentOp::ColorDistortion { .. }]));
        let fc = preset("flip_crop").unwrap();
        assert!(matches!(fc.ops[..], [AugmentOp::RandomHorizontalFlip { .. }, AugmentOp::RandomCropResize { .. }]));
        assert!(matches!(preset("blur"), Err(Error::Config(_))));
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let img = noise_image(1, 8, 8);
        let p = preset("none").unwrap();
        assert_eq!(p.apply(&img, &mut RngStream::new(4)), img);
        let pair = make_view_pair(&img, &p, &RngStream::new(4), 0);
        assert_eq!(pair.x1, img);
        assert_eq!(pair.x2, img);
    }

    #[test]
    fn forced_flip_twice_restores() {
        let img = noise_image(2, 5, 7);
        let p = AugmentPipeline::new(vec![AugmentOp::RandomHorizontalFlip { probability: 1.0 }; 2]).unwrap();
        assert_eq!(p.apply(&img, &mut RngStream::new(0)), img);
    }

    #[test]
    fn full_crop_is_identity() {
        let img = noise_image(3, 6, 6);
        assert_eq!(crop_resize(&img, 1.0, 1.0, 0.3, 0.8), img);
    }

    #[test]
    fn wrong_extents() {
        let p = preset("all").unwrap();
        assert!(matches!(p.apply_bytes(&[0u8; 10], 2, 2, &mut RngStream::new(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_ops_rejected() {
        let bad = [
            AugmentOp::RandomCropResize { min_area_fraction: 0.0, max_area_fraction: 1.0 },
            AugmentOp::RandomCropResize { min_area_fraction: 0.8, max_area_fraction: 0.5 },
            AugmentOp::RandomHorizontalFlip { probability: 1.5 },
            AugmentOp::ColorDistortion { strength: -1.0 },
        ];
        for op in bad {
            assert!(AugmentPipeline::new(vec![op]).is_err(), "{op:?}");
        }
    }

    #[test]
    fn views_differ_for_nonempty_pipeline() {
        let img = noise_image(5, 8, 8);
        let pair = make_view_pair(&img, &preset("all").unwrap(), &RngStream::new(11), 3);
        assert_ne!(pair.x1, pair.x2);
        assert_eq!(pair.source, 3);
    }

    #[test]
    fn crop_then_color_differs_from_color_then_crop() {
        let img = noise_image(6, 8, 8);
        let a = AugmentPipeline::new(vec![AugmentOp::crop(), AugmentOp::color()]).unwrap();
        let b = AugmentPipeline::new(vec![AugmentOp::color(), AugmentOp::crop()]).unwrap();
        let differs = (0..100).any(|s| a.apply(&img, &mut RngStream::new(s)) != b.apply(&img, &mut RngStream::new(s)));
        assert!(differs);
    }

    proptest::proptest! {
        #[test]
        fn outputs_stay_in_unit_range(seed in 0u64..10_000, h in 1usize..10, w in 1usize..10) {
            let img = noise_image(seed ^ 0xabc, h, w);
            for p in Preset::ALL {
                let out = AugmentPipeline::from(p).apply(&img, &mut RngStream::new(seed));
                proptest::prop_assert_eq!(out.data().len(), h * w * 3);
                proptest::prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn grayscale_fixed_point(bytes in proptest::collection::vec(0u8..=255, 16)) {
            let data: Vec<u8> = bytes.iter().flat_map(|&b| [b, b, b]).collect();
            let img = FloatImage::from_bytes(4, 4, &data).unwrap();
            proptest::prop_assert_eq!(grayscale(&img), img);
        }
    }
}

//! Colour-space helpers shared by the transforms and the shapes generator.

/// ITU-R 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Luma of one pixel, computed in `f64` so an already-grey pixel maps back
/// to exactly its own value.
#[inline]
pub fn luminance(r: f32, g: f32, b: f32) -> f32 {
    (LUMA[0] * r as f64 + LUMA[1] * g as f64 + LUMA[2] * b as f64) as f32
}

/// `(h, s, v)` with hue as a fraction of the full circle.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

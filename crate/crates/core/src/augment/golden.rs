//! Golden-file corpus for the augmentation presets.
//!
//! A corpus directory holds `manifest.txt` plus raw little-endian `f32`
//! arrays. Each manifest line describes one case:
//!
//! ```text
//! <case> <preset> <seed> <height> <width> <input file> <expected file>
//! ```
//!
//! Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{AugmentPipeline, FloatImage, Preset};
use crate::{Error, Result, RngStream};

pub const MANIFEST: &str = "manifest.txt";
pub const GOLDEN_SEEDS: [u64; 3] = [42, 7, 2024];

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenCase {
    pub name: String,
    pub preset: Preset,
    pub seed: u64,
    pub input: FloatImage,
    pub expected: Vec<f32>,
}

/// The 4×4 reference image: a fixed colour ramp with one saturated pixel.
pub fn reference_image() -> FloatImage {
    let mut data = Vec::with_capacity(48);
    for y in 0..4 {
        for x in 0..4 {
            let r = (x * 60 + 15) as u8;
            let g = (y * 70 + 10) as u8;
            let b = ((x + y) * 30 + 5) as u8;
            data.extend([r, g, b]);
        }
    }
    data[3 * 5..3 * 6].copy_from_slice(&[255, 0, 40]);
    FloatImage::from_bytes(4, 4, &data).expect("4x4x3")
}

/// A pseudo-random 8×8 image for wider crop coverage.
pub fn noise_image() -> FloatImage {
    let mut state = 0x2545_f491u32;
    let bytes: Vec<u8> = (0..8 * 8 * 3)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            (state >> 24) as u8
        })
        .collect();
    FloatImage::from_bytes(8, 8, &bytes).expect("8x8x3")
}

fn cases() -> Vec<(String, Preset, u64, FloatImage)> {
    let mut out = Vec::new();
    for preset in Preset::ALL {
        for seed in GOLDEN_SEEDS {
            out.push((format!("ref4_{}_{seed}", preset.name()), preset, seed, reference_image()));
        }
        out.push((format!("noise8_{}_42", preset.name()), preset, 42, noise_image()));
    }
    out
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|source| Error::Ingestion { path: path.to_path_buf(), source })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format { path: path.to_path_buf(), message: "length is not a multiple of 4".into() });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Regenerates the corpus from the current implementation. Refuses to touch
/// an existing manifest unless `force` is set.
pub fn write_corpus(dir: &Path, force: bool) -> Result<usize> {
    if dir.join(MANIFEST).exists() && !force {
        return Err(Error::State(format!(
            "{} already holds a golden corpus; pass force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("# case preset seed height width input expected\n");
    let all = cases();
    for (name, preset, seed, input) in &all {
        let out = AugmentPipeline::from(*preset).apply(input, &mut RngStream::new(*seed));
        let (inp, exp) = (format!("{name}.in.f32"), format!("{name}.out.f32"));
        fs::write(dir.join(&inp), f32_bytes(input.data()))?;
        fs::write(dir.join(&exp), f32_bytes(out.data()))?;
        writeln!(manifest, "{name} {preset} {seed} {} {} {inp} {exp}", input.height(), input.width()).unwrap();
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(all.len())
}

pub fn read_corpus(dir: &Path) -> Result<Vec<GoldenCase>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|source| Error::Ingestion { path: path.clone(), source })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format { path: path.clone(), message: format!("line {}: {what}", lineno + 1) };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [name, preset, seed, h, w, inp, exp] = f[..] else {
            return Err(bad("expected 7 fields"));
        };
        let preset: Preset = preset.parse().map_err(|_| bad("unknown preset"))?;
        let seed: u64 = seed.parse().map_err(|_| bad("bad seed"))?;
        let h: usize = h.parse().map_err(|_| bad("bad height"))?;
        let w: usize = w.parse().map_err(|_| bad("bad width"))?;
        let input = FloatImage::new(h, w, read_f32s(&dir.join(inp))?)?;
        let expected = read_f32s(&dir.join(exp))?;
        out.push(GoldenCase { name: name.to_string(), preset, seed, input, expected });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trip_and_overwrite_guard() {
        let dir = tempfile::tempdir().unwrap();
        let n = write_corpus(dir.path(), false).unwrap();
        assert_eq!(n, 28);
        assert!(write_corpus(dir.path(), false).is_err());
        let cases = read_corpus(dir.path()).unwrap();
        assert_eq!(cases.len(), 28);
        for c in cases {
            let out = AugmentPipeline::from(c.preset).apply(&c.input, &mut RngStream::new(c.seed));
            assert_eq!(out.data(), c.expected.as_slice(), "{}", c.name);
        }
    }
}

use std::path::Path;

use proptest::prelude::*;
use simcl_core::augment::golden::{read_corpus, reference_image};
use simcl_core::augment::{grayscale, AugmentOp, AugmentPipeline, FloatImage, Preset};
use simcl_core::RngStream;

fn corpus() -> Vec<simcl_core::augment::golden::GoldenCase> {
    read_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")).unwrap()
}

fn bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[test]
fn stored_corpus_matches_byte_for_byte() {
    let cases = corpus();
    assert!(cases.len() >= 20);
    for p in Preset::ALL {
        assert!(cases.iter().any(|c| c.preset == p), "no case for {p}");
    }
    for c in &cases {
        let out = AugmentPipeline::from(c.preset).apply(&c.input, &mut RngStream::new(c.seed));
        assert_eq!(bytes(out.data()), bytes(&c.expected), "{}", c.name);
    }
}

#[test]
fn stored_reference_input_is_the_ramp() {
    let c = corpus().into_iter().find(|c| c.name == "ref4_all_42").unwrap();
    assert_eq!(c.input, reference_image());
}

#[test]
fn none_cases_are_identity() {
    for c in corpus().iter().filter(|c| c.preset == Preset::None) {
        assert_eq!(c.expected, c.input.data());
    }
}

fn image(bytes: Vec<u8>, h: usize, w: usize) -> FloatImage {
    FloatImage::from_bytes(h, w, &bytes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn flip_is_an_involution(px in proptest::collection::vec(any::<u8>(), 6 * 5 * 3)) {
        let img = image(px, 6, 5);
        let always = AugmentPipeline::new(vec![AugmentOp::RandomHorizontalFlip { probability: 1.0 }]).unwrap();
        let mut rng = RngStream::new(0);
        let once = always.apply(&img, &mut rng);
        prop_assert_eq!(always.apply(&once, &mut rng), img);
    }

    #[test]
    fn grayscale_is_idempotent(px in proptest::collection::vec(any::<u8>(), 4 * 4 * 3)) {
        let g = grayscale(&image(px, 4, 4));
        prop_assert_eq!(grayscale(&g), g);
    }

    #[test]
    fn every_preset_keeps_shape_and_range(px in proptest::collection::vec(any::<u8>(), 8 * 8 * 3), seed in any::<u64>()) {
        let img = image(px, 8, 8);
        for p in Preset::ALL {
            let out = AugmentPipeline::from(p).apply(&img, &mut RngStream::new(seed));
            prop_assert_eq!((out.height(), out.width()), (8, 8));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

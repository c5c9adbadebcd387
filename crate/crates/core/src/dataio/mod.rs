//! Datasets, label budgets and checkpoint persistence.

mod checkpoint;
mod cifar;
mod shapes;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, RngStream};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cifar::{load_cifar, CifarVariant, CIFAR_IMAGE_BYTES};
pub use shapes::{generate_shapes, nearest_template_accuracy, render_template, SyntheticShapesSpec};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 32×32 RGB images (HWC, 8-bit) with labels and a split tag per index.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    name: String,
    num_classes: usize,
    images: Vec<u8>,
    labels: Vec<u32>,
    splits: Vec<Split>,
    /// Accuracy of the pixel-space nearest-template classifier, for
    /// generated data.
    pub template_ceiling: Option<f64>,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u32>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("dataset needs at least one class"));
        }
        if images.len() != labels.len() * IMAGE_BYTES || splits.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} image bytes, {} labels, {} split tags",
                images.len(),
                labels.len(),
                splits.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::config(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            images,
            labels,
            splits,
            template_ceiling: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[u8] {
        &self.images[index * IMAGE_BYTES..(index + 1) * IMAGE_BYTES]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn split(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Moves `round(fraction·|train|)` train images, stratified by class,
    /// into the validation split. Existing validation tags are kept.
    pub fn carve_validation(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!("validation fraction must lie in [0, 1), got {fraction}")));
        }
        let train = self.indices(Split::Train);
        let want = (fraction * train.len() as f64).round() as usize;
        let picked = stratified_pick(self, &train, want, &RngStream::new(seed).fork_named("validation"));
        for i in picked {
            self.splits[i] = Split::Val;
        }
        Ok(())
    }

    /// CRC-32 over labels, split tags and pixels.
    pub fn content_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(self.name.as_bytes());
        h.update(&(self.num_classes as u64).to_le_bytes());
        for (&l, &s) in self.labels.iter().zip(&self.splits) {
            h.update(&l.to_le_bytes());
            h.update(&[s as u8]);
        }
        h.update(&self.images);
        h.finalize()
    }
}

/// How many train labels a supervised stage may see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelBudget {
    pub fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for LabelBudget {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            seed: 0,
            stratified: true,
        }
    }
}

/// Index sets produced by [`split_and_subsample`]; each is ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_and_subsample(ds: &ImageDataset, budget: &LabelBudget) -> Result<Partition> {
    if !(budget.fraction > 0.0 && budget.fraction <= 1.0) {
        return Err(Error::config(format!(
            "label fraction must lie in (0, 1], got {}",
            budget.fraction
        )));
    }
    let train = ds.indices(Split::Train);
    let want = (budget.fraction * train.len() as f64).round() as usize;
    let stream = RngStream::new(budget.seed).fork_named("labels");
    let mut labeled = if budget.stratified {
        stratified_pick(ds, &train, want, &stream)
    } else {
        let mut pool = train.clone();
        pool.shuffle(&mut stream.clone());
        pool.truncate(want);
        pool
    };
    labeled.sort_unstable();
    let unlabeled = train
        .iter()
        .copied()
        .filter(|i| labeled.binary_search(i).is_err())
        .collect();
    Ok(Partition {
        labeled,
        unlabeled,
        val: ds.indices(Split::Val),
        test: ds.indices(Split::Test),
    })
}

/// Picks `want` indices from `pool`, dealing quotas round-robin over classes
/// in index order so per-class counts differ by at most one (until a class
/// runs out). Membership within a class is shuffled by `stream`.
fn stratified_pick(ds: &ImageDataset, pool: &[usize], want: usize, stream: &RngStream) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for &i in pool {
        by_class[ds.label(i)].push(i);
    }
    let mut quota = vec![0usize; by_class.len()];
    let mut assigned = 0;
    let want = want.min(pool.len());
    while assigned < want {
        for (c, members) in by_class.iter().enumerate() {
            if assigned == want {
                break;
            }
            if quota[c] < members.len() {
                quota[c] += 1;
                assigned += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(want);
    for (c, mut members) in by_class.into_iter().enumerate() {
        members.shuffle(&mut stream.fork(c as u64));
        out.extend_from_slice(&members[..quota[c]]);
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A dataset of blank images with the given labels, all tagged train.
    fn blank(num_classes: usize, labels: Vec<u32>) -> ImageDataset {
        let n = labels.len();
        ImageDataset::new("blank", num_classes, vec![0; n * IMAGE_BYTES], labels, vec![Split::Train; n]).unwrap()
    }

    fn class_counts(ds: &ImageDataset, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; ds.num_classes()];
        idx.iter().for_each(|&i| c[ds.label(i)] += 1);
        c
    }

    #[test]
    fn one_percent_of_cifar_sized_train() {
        let ds = blank(10, (0..50_000).map(|i| (i % 10) as u32).collect());
        let p = split_and_subsample(&ds, &LabelBudget { fraction: 0.01, seed: 3, stratified: true }).unwrap();
        assert_eq!(p.labeled.len(), 500);
        assert_eq!(class_counts(&ds, &p.labeled), vec![50; 10]);
        assert_eq!(p.unlabeled.len(), 49_500);
    }

    #[test]
    fn full_fraction_leaves_nothing_unlabeled() {
        let ds = blank(3, (0..30).map(|i| (i % 3) as u32).collect());
        let p = split_and_subsample(&ds, &LabelBudget { fraction: 1.0, ..Default::default() }).unwrap();
        assert_eq!(p.labeled.len(), 30);
        assert!(p.unlabeled.is_empty());
    }

    #[test]
    fn seeds_change_members_not_counts() {
        let ds = blank(10, (0..5000).map(|i| ((i * 7) % 10) as u32).collect());
        let b = |seed| LabelBudget { fraction: 0.01, seed, stratified: true };
        let a = split_and_subsample(&ds, &b(1)).unwrap();
        let c = split_and_subsample(&ds, &b(2)).unwrap();
        assert_ne!(a.labeled, c.labeled);
        assert_eq!(class_counts(&ds, &a.labeled), class_counts(&ds, &c.labeled));
    }

    #[test]
    fn fraction_bounds() {
        let ds = blank(2, vec![0, 1]);
        for f in [0.0, -0.5, 1.5] {
            let err = split_and_subsample(&ds, &LabelBudget { fraction: f, ..Default::default() }).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let err = ImageDataset::new("x", 2, vec![0; IMAGE_BYTES], vec![2], vec![Split::Train]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn validation_carve_is_disjoint_and_stratified() {
        let mut ds = blank(4, (0..400).map(|i| (i % 4) as u32).collect());
        ds.carve_validation(0.1, 5).unwrap();
        let val = ds.indices(Split::Val);
        assert_eq!(val.len(), 40);
        assert_eq!(class_counts(&ds, &val), vec![10; 4]);
        assert_eq!(ds.indices(Split::Train).len(), 360);
    }

    proptest::proptest! {
        #[test]
        fn stratified_counts_within_one(frac in 0.001f64..=1.0, seed in 0u64..1000, k in 2usize..8) {
            let ds = blank(k, (0..(k * 37)).map(|i| (i % k) as u32).collect());
            let budget = LabelBudget { fraction: frac, seed, stratified: true };
            let p = split_and_subsample(&ds, &budget).unwrap();
            let counts = class_counts(&ds, &p.labeled);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            proptest::prop_assert!(hi - lo <= 1);
            proptest::prop_assert_eq!(p.labeled.len(), (frac * (k * 37) as f64).round() as usize);
            proptest::prop_assert_eq!(p.labeled.len() + p.unlabeled.len(), k * 37);
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageDataset, Split, IMAGE_BYTES, IMAGE_SIDE};
use crate::{Error, Result};

/// Planar pixel bytes per CIFAR record (1024 R, 1024 G, 1024 B).
pub const CIFAR_IMAGE_BYTES: usize = 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    /// Label bytes preceding the pixels: one for CIFAR-10, coarse + fine for
    /// CIFAR-100.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn files(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            CifarVariant::Cifar10 => (
                &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
                &["test_batch.bin"],
            ),
            CifarVariant::Cifar100 => (&["train.bin"], &["test.bin"]),
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }
}

/// Finds the batch directory: `dir` itself or the archive's top-level folder.
fn locate(dir: &Path, variant: CifarVariant) -> PathBuf {
    let (train, _) = variant.files();
    if dir.join(train[0]).is_file() {
        dir.to_path_buf()
    } else {
        let nested = dir.join(variant.subdir());
        if nested.join(train[0]).is_file() {
            nested
        } else {
            dir.to_path_buf()
        }
    }
}

fn read_records(
    path: &Path,
    variant: CifarVariant,
    split: Split,
    images: &mut Vec<u8>,
    labels: &mut Vec<u32>,
    splits: &mut Vec<Split>,
) -> Result<()> {
    let bytes = fs::read(path).map_err(|source| Error::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        let offset = bytes.len() / rec * rec;
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "truncated record at byte offset {offset}: {} trailing bytes, records are {rec} bytes",
                bytes.len() - offset
            ),
        });
    }
    let classes = variant.num_classes();
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    for (r, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= classes {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("label {label} at byte offset {} exceeds {classes} classes", r * rec),
            });
        }
        let pixels = &record[variant.label_bytes()..];
        let start = images.len();
        images.resize(start + IMAGE_BYTES, 0);
        let dst = &mut images[start..];
        for p in 0..plane {
            for c in 0..3 {
                dst[p * 3 + c] = pixels[c * plane + p];
            }
        }
        labels.push(label as u32);
        splits.push(split);
    }
    Ok(())
}

/// Reads the published CIFAR binary batches. Train and test splits follow
/// the file each record came from; labels are the fine label for CIFAR-100.
pub fn load_cifar(dir: impl AsRef<Path>, variant: CifarVariant) -> Result<ImageDataset> {
    let root = locate(dir.as_ref(), variant);
    let (train, test) = variant.files();
    let (mut images, mut labels, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    for (names, split) in [(train, Split::Train), (test, Split::Test)] {
        for name in names {
            read_records(&root.join(name), variant, split, &mut images, &mut labels, &mut splits)?;
        }
    }
    let name = match variant {
        CifarVariant::Cifar10 => "cifar10",
        CifarVariant::Cifar100 => "cifar100",
    };
    ImageDataset::new(name, variant.num_classes(), images, labels, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(variant: CifarVariant, label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![0u8; variant.label_bytes()];
        *r.last_mut().unwrap() = label;
        if variant == CifarVariant::Cifar100 {
            r[0] = 19; // coarse label, ignored
        }
        r.extend((0..CIFAR_IMAGE_BYTES).map(fill));
        r
    }

    fn write_all(dir: &Path, variant: CifarVariant, per_file: usize) {
        let (train, test) = variant.files();
        for (f, name) in train.iter().chain(test).enumerate() {
            let mut bytes = Vec::new();
            for i in 0..per_file {
                bytes.extend(record(variant, ((f + i) % 10) as u8, |p| (p % 251) as u8));
            }
            fs::write(dir.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn record_lengths() {
        assert_eq!(CifarVariant::Cifar10.record_len(), 3073);
        assert_eq!(CifarVariant::Cifar100.record_len(), 3074);
    }

    #[test]
    fn cifar10_splits_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_all(dir.path(), CifarVariant::Cifar10, 3);
        let ds = load_cifar(dir.path(), CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.len(), 18);
        assert_eq!(ds.indices(Split::Train).len(), 15);
        assert_eq!(ds.indices(Split::Test).len(), 3);
        assert_eq!(ds.label(1), 1);
        // HWC pixel 1, green channel = planar byte 1024 + 1.
        assert_eq!(ds.image(0)[3 + 1], ((1024 + 1) % 251) as u8);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("cifar-100-binary");
        fs::create_dir(&nested).unwrap();
        write_all(&nested, CifarVariant::Cifar100, 2);
        let ds = load_cifar(dir.path(), CifarVariant::Cifar100).unwrap();
        assert_eq!(ds.num_classes(), 100);
        assert_eq!(ds.labels(), &[0, 1, 1, 2]);
    }

    #[test]
    fn truncated_record_names_file() {
        let dir = tempfile::tempdir().unwrap();
        write_all(dir.path(), CifarVariant::Cifar10, 2);
        let path = dir.path().join("data_batch_3.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, bytes).unwrap();
        match load_cifar(dir.path(), CifarVariant::Cifar10).unwrap_err() {
            Error::Format { path, message } => {
                assert!(path.ends_with("data_batch_3.bin"));
                assert!(message.contains("offset 3073"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_cifar(dir.path(), CifarVariant::Cifar10),
            Err(Error::Ingestion { .. })
        ));
    }
}

//! CIFAR-10 binary batches: 1 label byte then 3×32×32 channel-major pixels.
//!
//! The last quarter of the training records (the second half of
//! `data_batch_4` and all of `data_batch_5`) forms the validation partition.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Partition};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

fn read_batch(path: &Path) -> Result<Vec<(Tensor, usize)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .map(|rec| {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::format(path, format!("label byte {label}")));
            }
            let px = &rec[1..];
            Ok((
                Tensor::from_fn(&[3, 32, 32], |i| px[i] as f64 / 255.0),
                label,
            ))
        })
        .collect()
}

/// Accepts either the directory holding the `.bin` files or its parent.
fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let dir = batch_dir(dir);
    let mut records = Vec::new();
    for b in 1..=5 {
        records.extend(read_batch(&dir.join(format!("data_batch_{b}.bin")))?);
    }
    let n_train = records.len();
    let n_valid = n_train / 4;
    let mut partitions = vec![Partition::Train; n_train - n_valid];
    partitions.resize(n_train, Partition::Valid);
    records.extend(read_batch(&dir.join("test_batch.bin"))?);
    partitions.resize(records.len(), Partition::Test);
    let (items, labels) = records.into_iter().unzip();
    Dataset::new(
        "cifar10",
        items,
        labels,
        partitions,
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_batch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        std::fs::write(&path, vec![0u8; CIFAR_RECORD_BYTES + 5]).unwrap();
        assert!(matches!(read_batch(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn records_are_channel_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut rec = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        rec[0] = 7;
        rec[1 + 1024] = 255;
        rec[CIFAR_RECORD_BYTES] = 2;
        std::fs::write(&path, &rec).unwrap();
        let out = read_batch(&path).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].1, 7);
        assert_eq!(out[0].0.data()[1024], 1.0);
        assert_eq!(out[1].1, 2);
        assert_eq!(CIFAR10_CLASSES[0], "airplane");
        assert_eq!(CIFAR10_CLASSES[9], "truck");
    }
}

//! MNIST in IDX format. Files may be gzipped.
//!
//! The standard training file is split: its last sixth becomes the
//! validation partition, so the 60,000-item file yields 50,000/10,000.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{read_maybe_gz, Dataset, Partition};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

/// Decodes an IDX image file into `1×rows×cols` tensors scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path, bytes: &[u8]) -> Result<Vec<Tensor>> {
    let header =
        |at| be_u32(bytes, at).ok_or_else(|| Error::format(path, "header shorter than 16 bytes"));
    let magic = header(0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let (n, rows, cols) = (
        header(4)? as usize,
        header(8)? as usize,
        header(12)? as usize,
    );
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, "zero image extent"));
    }
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::format(
            path,
            format!(
                "header declares {n} images of {rows}x{cols}, payload holds {} bytes",
                payload.len()
            ),
        ));
    }
    Ok(payload
        .chunks_exact(rows * cols)
        .map(|px| Tensor::from_fn(&[1, rows, cols], |i| px[i] as f64 / 255.0))
        .collect())
}

pub fn read_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let header =
        |at| be_u32(bytes, at).ok_or_else(|| Error::format(path, "header shorter than 8 bytes"));
    let magic = header(0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = header(4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!(
                "header declares {n} labels, payload holds {}",
                payload.len()
            ),
        ));
    }
    if let Some(&bad) = payload.iter().find(|&&l| l > 9) {
        return Err(Error::format(path, format!("label {bad} is not a digit")));
    }
    Ok(payload.iter().map(|&l| l as usize).collect())
}

fn load_pair(dir: &Path, prefix: &str) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let (ipath, ibytes) = read_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let (lpath, lbytes) = read_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let images = read_idx_images(&ipath, &ibytes)?;
    let labels = read_idx_labels(&lpath, &lbytes)?;
    if images.len() != labels.len() {
        return Err(Error::format(
            &lpath,
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    Ok((images, labels))
}

/// Loads `train-*` and `t10k-*` from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let (mut items, mut labels) = load_pair(dir, "train")?;
    let n_train = items.len();
    let n_valid = n_train / 6;
    let mut partitions = vec![Partition::Train; n_train - n_valid];
    partitions.resize(n_train, Partition::Valid);
    let (test_items, test_labels) = load_pair(dir, "t10k")?;
    partitions.resize(n_train + test_items.len(), Partition::Test);
    items.extend(test_items);
    labels.extend(test_labels);
    Dataset::new(
        "mnist",
        items,
        labels,
        partitions,
        (0..10).map(|d| d.to_string()).collect(),
    )
}

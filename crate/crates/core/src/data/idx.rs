//! IDX binary containers as distributed with MNIST: a big-endian magic
//! number, big-endian `u32` extents, then unsigned bytes.

use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{GimError, IdxError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let chunk = bytes.get(at..at + 4).ok_or_else(|| IdxError::Truncated {
        path: path.to_path_buf(),
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < header + len {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: header + len,
            found: bytes.len(),
        }
        .into());
    }
    Ok(&bytes[header..header + len])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| GimError::io(path, e))
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = payload(&bytes, 16, n * rows * cols, path)?.to_vec();
    Ok((n, rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    Ok(payload(&bytes, 8, n, path)?.to_vec())
}

/// Loads an image/label pair as a 10-class dataset with pixels scaled into
/// `[0, 1]` and each image flattened row-major.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    if n == 0 {
        return Err(GimError::Contract(format!("{} holds no images", images_path.display())));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(IdxError::BadLabel {
            path: labels_path.to_path_buf(),
            index,
            label,
        }
        .into());
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Tensor::matrix(n, rows * cols, data)?;
    let name = images_path
        .file_name()
        .map_or_else(|| "mnist".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(features, labels.into_iter().map(usize::from).collect(), 10, name)
}

/// Loads `(train, test)` from a directory holding the four standard files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let train = load_mnist_idx(&p("train-images-idx3-ubyte"), &p("train-labels-idx1-ubyte"))?;
    let test = load_mnist_idx(&p("t10k-images-idx3-ubyte"), &p("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

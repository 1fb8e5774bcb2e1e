//! IDX image/label files as distributed with MNIST.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::DatasetHandle;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "IDX header cut short"),
            )
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or(Error::Truncated {
        expected: start + len,
        actual: bytes.len(),
    })
}

/// Decodes images to `[N, 1, rows, cols]` scaled into `[0, 1]`. The class
/// count is one more than the largest label (at least two).
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<DatasetHandle<S>> {
    let images = super::read_file(images_path)?;
    let labels = super::read_file(labels_path)?;

    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&labels, IDX_LABELS_MAGIC, labels_path)?;

    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let pixels = payload(&images, 16, n_images * rows * cols)?;
    let label_bytes = payload(&labels, 8, n_labels)?;

    let scale = 1.0 / 255.0;
    let data = pixels.iter().map(|&b| S::lit(b as f64 * scale)).collect();
    let tensor = Tensor::new(vec![n_images, 1, rows, cols], data)?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    DatasetHandle::new(tensor, labels, classes)
}

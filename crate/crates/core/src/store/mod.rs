//! On-disk formats and data ingestion.

mod cache;
mod container;
mod dataset;
mod idx;
mod model_file;

pub use cache::{build_calibration_cache, CalibrationCache};
pub use dataset::{load_csv, make_synthetic, make_synthetic_with, DatasetHandle, Normalization, SyntheticKind, SyntheticSpec};
pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use model_file::{load_model, model_digest, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

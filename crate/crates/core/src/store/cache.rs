//! Persisted ANN activations for a fixed calibration subset.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::{self, TensorRef};
use super::{model_digest, DatasetHandle};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CACHE_MAGIC: [u8; 4] = *b"SNCC";
pub const CACHE_VERSION: u16 = 1;

const CHUNK: usize = 64;

/// Calibration inputs with the source ANN's logits and post-relu taps.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationCache<S> {
    model_digest: String,
    indices: Vec<usize>,
    inputs: Tensor<S>,
    labels: Vec<usize>,
    logits: Tensor<S>,
    /// `(graph index of the relu, activation [n, ...])`
    taps: Vec<(usize, Tensor<S>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_digest: String,
    blob_bytes: usize,
    indices: Vec<usize>,
    labels: Vec<usize>,
    inputs: TensorRef,
    logits: TensorRef,
    taps: Vec<(usize, TensorRef)>,
}

impl<S: Scalar> CalibrationCache<S> {
    pub fn model_digest(&self) -> &str {
        &self.model_digest
    }

    /// Dataset indices of the cached samples, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn inputs(&self) -> &Tensor<S> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn logits(&self) -> &Tensor<S> {
        &self.logits
    }

    pub fn taps(&self) -> &[(usize, Tensor<S>)] {
        &self.taps
    }

    /// Tap of the `k`-th spiking layer.
    pub fn tap(&self, k: usize) -> &Tensor<S> {
        &self.taps[k].1
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Fails unless the cache was produced by `model`.
    pub fn ensure_matches(&self, model: &ModelGraph<S>) -> Result<()> {
        let digest = model_digest(model);
        if digest != self.model_digest {
            return Err(Error::DigestMismatch {
                cached: self.model_digest.clone(),
                model: digest,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let inputs = container::push_tensor(&mut blob, "inputs", &self.inputs);
        let logits = container::push_tensor(&mut blob, "logits", &self.logits);
        let taps = self
            .taps
            .iter()
            .map(|(layer, t)| (*layer, container::push_tensor(&mut blob, &format!("tap.{layer}"), t)))
            .collect();
        let header = Header {
            model_digest: self.model_digest.clone(),
            blob_bytes: blob.len(),
            indices: self.indices.clone(),
            labels: self.labels.clone(),
            inputs,
            logits,
            taps,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        container::encode(&CACHE_MAGIC, CACHE_VERSION, &json, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blob) = container::decode(bytes, &CACHE_MAGIC, CACHE_VERSION)?;
        let h: Header = serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
        let mut refs = vec![&h.inputs, &h.logits];
        refs.extend(h.taps.iter().map(|(_, r)| r));
        container::check_layout(&refs, h.blob_bytes, blob)?;
        let inputs: Tensor<S> = container::read_tensor(blob, &h.inputs)?;
        let logits: Tensor<S> = container::read_tensor(blob, &h.logits)?;
        let taps = h
            .taps
            .iter()
            .map(|(layer, r)| Ok((*layer, container::read_tensor(blob, r)?)))
            .collect::<Result<Vec<_>>>()?;
        let n = h.indices.len();
        if h.labels.len() != n
            || inputs.batch() != n
            || logits.batch() != n
            || taps.iter().any(|(_, t): &(usize, Tensor<S>)| t.batch() != n)
        {
            return Err(Error::Header("cache sample counts disagree".into()));
        }
        Ok(CalibrationCache {
            model_digest: h.model_digest,
            indices: h.indices,
            inputs,
            labels: h.labels,
            logits,
            taps,
        })
    }

    /// SHA-256 of the serialized cache, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?)
    }
}

/// Draws `sample_count` dataset entries without replacement (sorted by index)
/// and records the model's logits and taps on them.
pub fn build_calibration_cache<S: Scalar>(
    model: &ModelGraph<S>,
    dataset: &DatasetHandle<S>,
    sample_count: usize,
    seed: u64,
) -> Result<CalibrationCache<S>> {
    if sample_count == 0 || sample_count > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration sample count {sample_count} must be in 1..={}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, dataset.len(), sample_count).into_vec();
    indices.sort_unstable();

    let inputs = dataset.images().select_rows(&indices)?;
    let labels = indices.iter().map(|&i| dataset.labels()[i]).collect();

    let chunks: Vec<Vec<usize>> = (0..sample_count)
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let parts = chunks
        .par_iter()
        .map(|rows| model.forward_with_taps(&inputs.select_rows(rows)?))
        .collect::<Result<Vec<_>>>()?;

    let logits = Tensor::concat_batch(&parts.iter().map(|(l, _)| l).collect::<Vec<_>>())?;
    let layer_count = parts[0].1.len();
    let taps = (0..layer_count)
        .map(|k| {
            let pieces: Vec<&Tensor<S>> = parts.iter().map(|(_, t)| &t[k].1).collect();
            Ok((parts[0].1[k].0, Tensor::concat_batch(&pieces)?))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CalibrationCache {
        model_digest: model_digest(model),
        indices,
        inputs,
        labels,
        logits,
        taps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;
    use crate::store::make_synthetic;

    fn setup() -> (ModelGraph<f32>, DatasetHandle<f32>) {
        let m = ModelBuilder::mlp(&[2], &[6, 5], 2).build(4).unwrap();
        let d = make_synthetic("rings", 150, 2).unwrap();
        (m, d)
    }

    #[test]
    fn full_sample_uses_every_index_once() {
        let (m, d) = setup();
        let c = build_calibration_cache(&m, &d, d.len(), 1).unwrap();
        assert_eq!(c.indices(), (0..d.len()).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn same_seed_same_digest() {
        let (m, d) = setup();
        let a = build_calibration_cache(&m, &d, 70, 9).unwrap();
        let b = build_calibration_cache(&m, &d, 70, 9).unwrap();
        let c = build_calibration_cache(&m, &d, 70, 10).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn taps_match_fresh_forward() {
        let (m, d) = setup();
        let c = build_calibration_cache(&m, &d, 100, 3).unwrap();
        let (logits, taps) = m.forward_with_taps(&d.images().select_rows(c.indices()).unwrap()).unwrap();
        assert_eq!(&logits, c.logits());
        assert_eq!(taps.as_slice(), c.taps());
        let counts: Vec<usize> = c.taps().iter().map(|(_, t)| t.batch()).collect();
        assert!(counts.iter().all(|&n| n == 100));
    }

    #[test]
    fn digest_binding_and_persistence() {
        let (m, d) = setup();
        let c = build_calibration_cache(&m, &d, 40, 3).unwrap();
        c.ensure_matches(&m).unwrap();
        let other = ModelBuilder::mlp(&[2], &[6, 5], 2).build(5).unwrap();
        assert!(matches!(c.ensure_matches(&other), Err(Error::DigestMismatch { .. })));

        let back = CalibrationCache::<f32>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn oversized_request_rejected() {
        let (m, d) = setup();
        assert!(build_calibration_cache(&m, &d, d.len() + 1, 0).is_err());
    }
}

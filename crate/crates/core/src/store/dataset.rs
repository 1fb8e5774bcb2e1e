use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel statistics of a dataset's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Labelled samples: images `[N, ...]` and one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle<S> {
    images: Tensor<S>,
    labels: Vec<usize>,
    class_count: usize,
    normalization: Normalization,
}

impl<S: Scalar> DatasetHandle<S> {
    pub fn new(images: Tensor<S>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "dataset images need a batch dimension, got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelRange {
                label,
                classes: class_count,
            });
        }
        let normalization = channel_stats(&images);
        Ok(DatasetHandle {
            images,
            labels,
            class_count,
            normalization,
        })
    }

    pub fn images(&self) -> &Tensor<S> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels, self.class_count)
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n} must fall inside 1..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Fraction of labels matched by `predictions`.
    pub fn accuracy(&self, predictions: &[usize]) -> f64 {
        let hits = predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        hits as f64 / self.len().max(1) as f64
    }
}

/// Channel axis is dim 1 for `[N, C, H, W]`; vectors are one channel.
fn channel_stats<S: Scalar>(images: &Tensor<S>) -> Normalization {
    let shape = images.shape();
    let (channels, per_channel) = if shape.len() >= 4 {
        (shape[1], shape[2..].iter().product::<usize>())
    } else {
        (1, images.row_len())
    };
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for row in images.rows() {
        for (c, block) in row.chunks(per_channel).enumerate() {
            for &v in block {
                let v = v.as_f64();
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let count = (images.batch() * per_channel) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(0.0).sqrt())
        .collect();
    Normalization { mean, std }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Gaussian clusters around random class prototypes.
    Blobs,
    /// Concentric noisy rings in the plane, one ring per class.
    Rings,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "rings" => Ok(SyntheticKind::Rings),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Full description of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub count: usize,
    pub seed: u64,
    pub classes: usize,
    /// Per-sample shape; rings require `[2]`.
    pub sample_shape: Vec<usize>,
    /// Gaussian noise standard deviation.
    pub noise: f64,
}

impl SyntheticSpec {
    /// Two well separated classes in the plane.
    pub fn default_for(kind: SyntheticKind, count: usize, seed: u64) -> Self {
        let noise = match kind {
            SyntheticKind::Blobs => 0.5,
            SyntheticKind::Rings => 0.15,
        };
        SyntheticSpec {
            kind,
            count,
            seed,
            classes: 2,
            sample_shape: vec![2],
            noise,
        }
    }
}

pub fn make_synthetic<S: Scalar>(kind: &str, n: usize, seed: u64) -> Result<DatasetHandle<S>> {
    let kind: SyntheticKind = kind.parse()?;
    make_synthetic_with(&SyntheticSpec::default_for(kind, n, seed))
}

/// Labels cycle through the classes before shuffling, so class counts differ
/// by at most one.
pub fn make_synthetic_with<S: Scalar>(spec: &SyntheticSpec) -> Result<DatasetHandle<S>> {
    if spec.count < 2 || spec.classes < 2 || spec.count < spec.classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs n >= classes >= 2, got n = {}, classes = {}",
            spec.count, spec.classes
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise {} must be >= 0", spec.noise)));
    }
    let dims: usize = spec.sample_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");

    let mut labels: Vec<usize> = (0..spec.count).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(spec.count * dims);
    match spec.kind {
        SyntheticKind::Blobs => {
            let centers: Vec<Vec<f64>> = if spec.classes == 2 && dims == 2 {
                vec![vec![-2.0, 0.0], vec![2.0, 0.0]]
            } else {
                (0..spec.classes)
                    .map(|_| (0..dims).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .collect()
            };
            for &l in &labels {
                for &c in &centers[l] {
                    data.push(S::lit(c + noise.sample(&mut rng)));
                }
            }
        }
        SyntheticKind::Rings => {
            if dims != 2 {
                return Err(Error::InvalidArgument(format!(
                    "rings are planar; sample shape {:?} is not [2]",
                    spec.sample_shape
                )));
            }
            for &l in &labels {
                let radius = 1.0 + 2.0 * l as f64 + noise.sample(&mut rng);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                data.push(S::lit(radius * angle.cos()));
                data.push(S::lit(radius * angle.sin()));
            }
        }
    }
    let mut shape = vec![spec.count];
    shape.extend_from_slice(&spec.sample_shape);
    DatasetHandle::new(Tensor::new(shape, data)?, labels, spec.classes)
}

/// Reads `label,v1,v2,...` rows (no header). Values are used as given.
pub fn load_csv<S: Scalar>(path: &Path, sample_shape: &[usize], class_count: usize) -> Result<DatasetHandle<S>> {
    let dims: usize = sample_shape.iter().product();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != dims + 1 {
            return Err(Error::Shape(format!(
                "row {}: expected label plus {dims} values, found {} fields",
                line + 1,
                record.len()
            )));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("row {}: bad label {:?}", line + 1, &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("row {}: bad value {field:?}", line + 1)))?;
            data.push(S::lit(v));
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no rows", path.display())));
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(sample_shape);
    DatasetHandle::new(Tensor::new(shape, data)?, labels, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a: DatasetHandle<f32> = make_synthetic("blobs", 100, 7).unwrap();
        let b: DatasetHandle<f32> = make_synthetic("blobs", 100, 7).unwrap();
        assert_eq!(a, b);
        let c: DatasetHandle<f32> = make_synthetic("blobs", 100, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn classes_are_balanced() {
        for kind in ["blobs", "rings"] {
            let d: DatasetHandle<f32> = make_synthetic(kind, 101, 3).unwrap();
            let mut counts = d.class_counts();
            counts.sort();
            assert_eq!(counts, vec![50, 51]);
        }
    }

    #[test]
    fn unknown_kind_and_small_n() {
        assert!(matches!(make_synthetic::<f32>("spirals", 10, 0), Err(Error::UnknownKind(_))));
        assert!(make_synthetic::<f32>("blobs", 1, 0).is_err());
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "# label,x0,x1\n1,0.5,0.25\n0, 1.0 ,2\n").unwrap();
        let d: DatasetHandle<f64> = load_csv(&path, &[2], 2).unwrap();
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.images().data(), &[0.5, 0.25, 1.0, 2.0]);

        std::fs::write(&path, "3,0.5,0.25\n").unwrap();
        assert!(matches!(load_csv::<f64>(&path, &[2], 2), Err(Error::LabelRange { .. })));
        std::fs::write(&path, "1,0.5\n").unwrap();
        assert!(load_csv::<f64>(&path, &[2], 2).is_err());
    }

    #[test]
    fn normalization_per_channel() {
        let images = Tensor::<f32>::new(vec![1, 2, 1, 2], vec![1.0, 3.0, 0.0, 0.0]).unwrap();
        let d = DatasetHandle::new(images, vec![0], 2).unwrap();
        assert_eq!(d.normalization().mean, vec![2.0, 0.0]);
        assert_eq!(d.normalization().std, vec![1.0, 0.0]);
    }
}

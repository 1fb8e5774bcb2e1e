//! `SNNC` model files.
//!
//! Layout: `b"SNNC"`, format version (u16 LE), header length (u32 LE), a
//! UTF-8 JSON header describing layers and parameter byte ranges, then the
//! little-endian f32 parameter blob. Parameter ranges must tile the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::{self, TensorRef};
use crate::error::{Error, Result};
use crate::model::{Conv2d, Dense, LayerSpec, ModelGraph};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: [u8; 4] = *b"SNNC";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    class_count: usize,
    blob_bytes: usize,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerHeader {
    Dense {
        in_features: usize,
        out_features: usize,
        weight: TensorRef,
        bias: TensorRef,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: TensorRef,
        bias: TensorRef,
    },
    Avgpool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Relu,
}

pub fn model_to_bytes<S: Scalar>(model: &ModelGraph<S>) -> Vec<u8> {
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let h = match layer {
            LayerSpec::Dense(d) => LayerHeader::Dense {
                in_features: d.in_features(),
                out_features: d.out_features(),
                weight: container::push_tensor(&mut blob, &format!("layers.{i}.weight"), &d.weight),
                bias: container::push_tensor(&mut blob, &format!("layers.{i}.bias"), &d.bias),
            },
            LayerSpec::Conv2d(c) => LayerHeader::Conv2d {
                in_channels: c.in_channels(),
                out_channels: c.out_channels(),
                kernel: c.kernel(),
                stride: c.stride,
                padding: c.padding,
                weight: container::push_tensor(&mut blob, &format!("layers.{i}.weight"), &c.weight),
                bias: container::push_tensor(&mut blob, &format!("layers.{i}.bias"), &c.bias),
            },
            LayerSpec::AvgPool2d { kernel, stride } => LayerHeader::Avgpool2d {
                kernel: *kernel,
                stride: *stride,
            },
            LayerSpec::Flatten => LayerHeader::Flatten,
            LayerSpec::Relu => LayerHeader::Relu,
        };
        layers.push(h);
    }
    let header = Header {
        input_shape: model.input_shape().to_vec(),
        class_count: model.class_count(),
        blob_bytes: blob.len(),
        layers,
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    container::encode(&MODEL_MAGIC, MODEL_VERSION, &json, &blob)
}

pub fn model_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ModelGraph<S>> {
    let (header, blob) = container::decode(bytes, &MODEL_MAGIC, MODEL_VERSION)?;
    let header: Header = serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;

    let refs: Vec<&TensorRef> = header
        .layers
        .iter()
        .flat_map(|l| match l {
            LayerHeader::Dense { weight, bias, .. } | LayerHeader::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        })
        .collect();
    container::check_layout(&refs, header.blob_bytes, blob)?;

    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, h) in header.layers.iter().enumerate() {
        let layer = match h {
            LayerHeader::Dense {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                if weight.shape != [*out_features, *in_features] {
                    return Err(Error::Header(format!(
                        "layer {i}: dense weight shape {:?} disagrees with {out_features}x{in_features}",
                        weight.shape
                    )));
                }
                LayerSpec::Dense(Dense::new(
                    container::read_tensor(blob, weight)?,
                    container::read_tensor(blob, bias)?,
                )?)
            }
            LayerHeader::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => {
                if weight.shape != [*out_channels, *in_channels, *kernel, *kernel] {
                    return Err(Error::Header(format!(
                        "layer {i}: conv weight shape {:?} disagrees with hyperparameters",
                        weight.shape
                    )));
                }
                LayerSpec::Conv2d(Conv2d::new(
                    container::read_tensor(blob, weight)?,
                    container::read_tensor(blob, bias)?,
                    *stride,
                    *padding,
                )?)
            }
            LayerHeader::Avgpool2d { kernel, stride } => LayerSpec::AvgPool2d {
                kernel: *kernel,
                stride: *stride,
            },
            LayerHeader::Flatten => LayerSpec::Flatten,
            LayerHeader::Relu => LayerSpec::Relu,
        };
        layers.push(layer);
    }
    ModelGraph::new(header.input_shape, header.class_count, layers)
}

pub fn save_model<S: Scalar>(model: &ModelGraph<S>, path: &Path) -> Result<()> {
    super::write_atomic(path, &model_to_bytes(model))
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<ModelGraph<S>> {
    model_from_bytes(&super::read_file(path)?)
}

/// SHA-256 of the serialized model, hex encoded.
pub fn model_digest<S: Scalar>(model: &ModelGraph<S>) -> String {
    hex::encode(Sha256::digest(model_to_bytes(model)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;

    fn sample() -> ModelGraph<f32> {
        ModelBuilder::new(&[1, 6, 6])
            .conv2d(3, 3, 1, 1)
            .relu()
            .avg_pool(2, 2)
            .flatten()
            .dense(5)
            .relu()
            .dense(2)
            .build(5)
            .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = sample();
        let bytes = model_to_bytes(&m);
        let back: ModelGraph<f32> = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = model_to_bytes(&sample());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(model_from_bytes::<f32>(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = model_to_bytes(&sample());
        bytes[4] = 9;
        assert!(matches!(
            model_from_bytes::<f32>(&bytes),
            Err(Error::VersionMismatch { expected: 1, found: 9 })
        ));
    }

    #[test]
    fn truncated_blob_names_lengths() {
        let m = sample();
        let mut bytes = model_to_bytes(&m);
        bytes.pop();
        let declared = m.param_count() * 4;
        match model_from_bytes::<f32>(&bytes) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, declared);
                assert_eq!(actual, declared - 1);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        let mut longer = model_to_bytes(&m);
        longer.push(0);
        assert!(matches!(model_from_bytes::<f32>(&longer), Err(Error::TrailingBytes { .. })));
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let m = sample();
        let bytes = model_to_bytes(&m);
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + header_len]).unwrap();
        // Point the first bias at the start of the first weight.
        header["layers"][0]["bias"]["offset"] = serde_json::json!(0);
        let json = serde_json::to_vec_pretty(&header).unwrap();
        let patched = container::encode(&MODEL_MAGIC, MODEL_VERSION, &json, &bytes[10 + header_len..]);
        assert!(matches!(model_from_bytes::<f32>(&patched), Err(Error::OffsetOverlap(_))));
    }

    #[test]
    fn digest_tracks_parameters() {
        let a = sample();
        let b: ModelGraph<f32> = ModelBuilder::mlp(&[36], &[4], 2).build(5).unwrap();
        assert_eq!(model_digest(&a), model_digest(&a.clone()));
        assert_ne!(model_digest(&a), model_digest(&b));
    }
}

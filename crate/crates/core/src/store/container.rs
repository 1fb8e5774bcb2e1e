//! Shared framing: magic (4 bytes), version (u16 LE), header length (u32 LE),
//! UTF-8 JSON header, little-endian f32 blob.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PREFIX: usize = 4 + 2 + 4;

/// Location of one tensor inside the blob, in bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct TensorRef {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

pub(crate) fn encode(magic: &[u8; 4], version: u16, header: &[u8], blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX + header.len() + blob.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(blob);
    out
}

/// Splits a container into `(header, blob)` after checking magic and version.
pub(crate) fn decode<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u16) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: PREFIX,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: magic.to_vec(),
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < PREFIX {
        return Err(Error::Truncated {
            expected: PREFIX,
            actual: bytes.len(),
        });
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::VersionMismatch {
            expected: version,
            found,
        });
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < PREFIX + header_len {
        return Err(Error::Truncated {
            expected: PREFIX + header_len,
            actual: bytes.len(),
        });
    }
    Ok((&bytes[PREFIX..PREFIX + header_len], &bytes[PREFIX + header_len..]))
}

/// Appends a tensor to the blob and returns its reference.
pub(crate) fn push_tensor<S: Scalar>(blob: &mut Vec<u8>, name: &str, t: &Tensor<S>) -> TensorRef {
    let offset = blob.len();
    for &v in t.data() {
        blob.extend_from_slice(&v.to_le_f32_bytes());
    }
    TensorRef {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        offset,
        length: blob.len() - offset,
    }
}

/// Checks that references tile the blob exactly and do not overlap.
pub(crate) fn check_layout(refs: &[&TensorRef], declared_blob: usize, blob: &[u8]) -> Result<()> {
    if blob.len() < declared_blob {
        return Err(Error::Truncated {
            expected: declared_blob,
            actual: blob.len(),
        });
    }
    if blob.len() > declared_blob {
        return Err(Error::TrailingBytes {
            expected: declared_blob,
            actual: blob.len(),
        });
    }
    let mut sorted: Vec<&TensorRef> = refs.to_vec();
    sorted.sort_by_key(|r| (r.offset, r.length));
    let mut end = 0usize;
    for r in sorted {
        let elems: usize = r.shape.iter().product();
        if r.length != elems * 4 {
            return Err(Error::Header(format!(
                "{}: {} bytes declared for shape {:?}",
                r.name, r.length, r.shape
            )));
        }
        if r.offset < end {
            return Err(Error::OffsetOverlap(format!(
                "{} starts at {} before previous range ends at {end}",
                r.name, r.offset
            )));
        }
        end = r.offset + r.length;
        if end > declared_blob {
            return Err(Error::Header(format!(
                "{} ends at {end}, past the {declared_blob}-byte blob",
                r.name
            )));
        }
    }
    Ok(())
}

pub(crate) fn read_tensor<S: Scalar>(blob: &[u8], r: &TensorRef) -> Result<Tensor<S>> {
    let data = blob[r.offset..r.offset + r.length]
        .chunks_exact(4)
        .map(|c| S::from_le_f32_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(r.shape.clone(), data)
}

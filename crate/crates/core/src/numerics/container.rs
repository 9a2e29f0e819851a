//! Binary tensor container shared by checkpoints and datasets.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size | content                                    |
//! |-------------|------|--------------------------------------------|
//! | 0           | 8    | magic (`AVRCKPT\0` or `AVRDATA\0`)         |
//! | 8           | 4    | `u32` format version                       |
//! | 12          | 8    | `u64` header length `H` in bytes           |
//! | 20          | H    | UTF-8 JSON header                          |
//! | 20 + H      | ...  | payload: `f64` values, little-endian       |
//!
//! The header is `{"meta": <any>, "tensors": [{"name", "shape", "offset", "len"}]}`
//! where `offset` is the byte offset of the tensor inside the payload and `len`
//! its number of `f64` values. Tensors are stored back to back in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"AVRCKPT\0";
pub const DATASET_MAGIC: [u8; 8] = *b"AVRDATA\0";
pub const CONTAINER_VERSION: u32 = 1;

const PREAMBLE: usize = 20;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn encode(magic: [u8; 8], meta: serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.to_string(), shape: t.shape().to_vec(), offset, len: t.len() };
            offset += t.len() * 8;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { meta, tensors: entries })
        .map_err(|e| Error::invalid(format!("header serialisation: {e}")))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(magic: [u8; 8], bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let need = |offset: usize, n: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + n {
            Err(Error::Parse {
                offset: bytes.len(),
                detail: format!("truncated {what}: need {n} bytes at {offset}, have {}", bytes.len()),
            })
        } else {
            Ok(())
        }
    };
    need(0, 8, "magic")?;
    if bytes[..8] != magic {
        return Err(Error::Parse { offset: 0, detail: "bad magic".into() });
    }
    need(8, 4, "version")?;
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Version { found: version, expected: CONTAINER_VERSION });
    }
    need(12, 8, "header length")?;
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    need(PREAMBLE, hlen, "header")?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + hlen]).map_err(|e| Error::Parse {
        offset: PREAMBLE + e.column().saturating_sub(1),
        detail: format!("header JSON: {e}"),
    })?;
    let base = PREAMBLE + hlen;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Parse {
                offset: PREAMBLE,
                detail: format!("tensor {} shape {:?} disagrees with len {}", e.name, e.shape, e.len),
            });
        }
        let start = base + e.offset;
        need(start, e.len * 8, &format!("payload of {}", e.name))?;
        let data: Vec<f64> = bytes[start..start + e.len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Parse { offset: start, detail: err.to_string() })?;
        out.push((e.name, t));
    }
    Ok((header.meta, out))
}

pub fn write_to<W: Write>(
    mut w: W,
    magic: [u8; 8],
    meta: serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    w.write_all(&encode(magic, meta, tensors)?)?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R, magic: [u8; 8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(magic, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap();
        let b = Tensor::row(&[std::f64::consts::PI]);
        encode(CHECKPOINT_MAGIC, serde_json::json!({"k": 1}), &[("a", &a), ("b", &b)]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample();
        let (meta, ts) = decode(CHECKPOINT_MAGIC, &bytes).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(ts[0].0, "a");
        assert_eq!(ts[0].1.data()[3].to_bits(), 1e-300f64.to_bits());
        assert_eq!(ts[1].1.data()[0], std::f64::consts::PI);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample();
        let cut = &bytes[..bytes.len() - 3];
        match decode(CHECKPOINT_MAGIC, cut) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(CHECKPOINT_MAGIC, &bytes), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = sample();
        assert!(matches!(decode(DATASET_MAGIC, &bytes), Err(Error::Parse { offset: 0, .. })));
    }
}

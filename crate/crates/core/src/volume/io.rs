//! The UVF1 on-disk volume format.
//!
//! Layout:
//!
//! | bytes            | content                                    |
//! |------------------|--------------------------------------------|
//! | 0..8             | magic `UVFORGE1` (last byte is the version) |
//! | 8..12            | header length `n`, `u32` little-endian     |
//! | 12..12+n         | UTF-8 JSON header                          |
//! | 12+n..           | raw little-endian voxel payload            |
//!
//! The header holds `shape`, `spacing`, `dtype` (`f32`, `f64` or `u8`),
//! `kind` (`scalar`, `label` or `prob`) and, for labels and probabilities,
//! `num_classes`. Probability payloads interleave channels per voxel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelVolume, ProbVolume, ScalarVolume, Shape3, Spacing3};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UVFORGE1";
const MAGIC_STEM: &[u8; 7] = b"UVFORGE";
const VERSION: u8 = b'1';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Scalar,
    Label,
    Prob,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: Dtype,
    kind: Kind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    num_classes: Option<usize>,
}

/// Any volume read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredVolume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
    Prob(ProbVolume),
}

fn frame(header: &Header, payload: Vec<u8>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn encode_reals(values: &[f64], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        Dtype::U8 => unreachable!("real payloads are never u8"),
    }
}

/// Serializes a scalar volume; `dtype` must be `F32` or `F64`.
pub fn encode_scalar(v: &ScalarVolume, dtype: Dtype) -> Result<Vec<u8>> {
    if dtype == Dtype::U8 {
        return Err(Error::Header("scalar volumes are stored as f32 or f64".into()));
    }
    let header = Header {
        shape: v.shape().dims(),
        spacing: v.spacing().as_array(),
        dtype,
        kind: Kind::Scalar,
        num_classes: None,
    };
    frame(&header, encode_reals(v.data(), dtype))
}

pub fn encode_label(v: &LabelVolume) -> Result<Vec<u8>> {
    let header = Header {
        shape: v.shape().dims(),
        spacing: v.spacing().as_array(),
        dtype: Dtype::U8,
        kind: Kind::Label,
        num_classes: Some(v.num_classes()),
    };
    frame(&header, v.data().to_vec())
}

pub fn encode_prob(v: &ProbVolume) -> Result<Vec<u8>> {
    let header = Header {
        shape: v.shape().dims(),
        spacing: v.spacing().as_array(),
        dtype: Dtype::F64,
        kind: Kind::Prob,
        num_classes: Some(v.num_classes()),
    };
    frame(&header, encode_reals(v.data(), Dtype::F64))
}

fn decode_reals(payload: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| b as f64).collect(),
    }
}

/// Parses a UVF1 byte buffer.
pub fn decode_volume(bytes: &[u8]) -> Result<StoredVolume> {
    if bytes.len() < 8 || &bytes[..7] != MAGIC_STEM {
        return Err(Error::BadMagic);
    }
    if bytes[7] != VERSION {
        return Err(Error::VersionMismatch(bytes[7]));
    }
    if bytes.len() < 12 {
        return Err(Error::Header("missing header length".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Header("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Header(e.to_string()))?;
    let [d, h, w] = header.shape;
    let shape = Shape3::new(d, h, w)?;
    let [sd, sh, sw] = header.spacing;
    let spacing = Spacing3::new(sd, sh, sw)?;

    let channels = match header.kind {
        Kind::Prob => header
            .num_classes
            .ok_or_else(|| Error::Header("prob volume without num_classes".into()))?,
        _ => 1,
    };
    let expected = shape.len() * channels * header.dtype.width();
    let payload = &bytes[header_end..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::PayloadLengthMismatch {
            expected,
            found: payload.len(),
        });
    }

    match header.kind {
        Kind::Scalar => {
            if header.dtype == Dtype::U8 {
                return Err(Error::Header("scalar volume with u8 dtype".into()));
            }
            Ok(StoredVolume::Scalar(ScalarVolume::new(
                shape,
                spacing,
                decode_reals(payload, header.dtype),
            )?))
        }
        Kind::Label => {
            if header.dtype != Dtype::U8 {
                return Err(Error::Header("label volume must be u8".into()));
            }
            let c = header
                .num_classes
                .ok_or_else(|| Error::Header("label volume without num_classes".into()))?;
            Ok(StoredVolume::Label(LabelVolume::new(
                shape,
                spacing,
                c,
                payload.to_vec(),
            )?))
        }
        Kind::Prob => {
            if header.dtype == Dtype::U8 {
                return Err(Error::Header("prob volume with u8 dtype".into()));
            }
            Ok(StoredVolume::Prob(ProbVolume::new(
                shape,
                spacing,
                channels,
                decode_reals(payload, header.dtype),
            )?))
        }
    }
}

pub fn save_scalar(path: impl AsRef<Path>, v: &ScalarVolume) -> Result<()> {
    std::fs::write(path, encode_scalar(v, Dtype::F64)?)?;
    Ok(())
}

pub fn save_label(path: impl AsRef<Path>, v: &LabelVolume) -> Result<()> {
    std::fs::write(path, encode_label(v)?)?;
    Ok(())
}

pub fn save_prob(path: impl AsRef<Path>, v: &ProbVolume) -> Result<()> {
    std::fs::write(path, encode_prob(v)?)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<StoredVolume> {
    decode_volume(&std::fs::read(path)?)
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    match load_volume(path)? {
        StoredVolume::Scalar(v) => Ok(v),
        _ => Err(Error::Header("expected a scalar volume".into())),
    }
}

pub fn load_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match load_volume(path)? {
        StoredVolume::Label(v) => Ok(v),
        _ => Err(Error::Header("expected a label volume".into())),
    }
}

//! Parameter checkpoints: an 8-byte magic, a little-endian u32 header length,
//! a JSON header holding the block layout, then little-endian f64 values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{ParamBlock, ParamVector};

pub const PARAM_MAGIC: &[u8; 8] = b"UVFPARM1";

#[derive(Serialize, Deserialize)]
struct Header {
    layout: Vec<ParamBlock>,
    dtype: String,
}

pub fn encode_params(p: &ParamVector) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        layout: p.layout().to_vec(),
        dtype: "f64".into(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + 8 * p.len());
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in p.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    if bytes.len() < 12 || &bytes[..8] != PARAM_MAGIC {
        return Err(Error::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Header("header length exceeds file size".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Header(e.to_string()))?;
    if header.dtype != "f64" {
        return Err(Error::Header(format!("unsupported dtype {}", header.dtype)));
    }
    let count: usize = header.layout.iter().map(ParamBlock::len).sum();
    let payload = &body[hlen..];
    let expected = count * 8;
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
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParamVector::new(header.layout, values)
}

pub fn save_params(path: impl AsRef<Path>, p: &ParamVector) -> Result<()> {
    std::fs::write(path, encode_params(p)?)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamVector> {
    decode_params(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let layout = vec![ParamBlock::new("a", &[2]), ParamBlock::new("b", &[1, 3])];
        let p = ParamVector::new(layout, vec![0.1, -2.0, 3.5, f64::MIN_POSITIVE, 7.0]).unwrap();
        let bytes = encode_params(&p).unwrap();
        assert_eq!(&bytes[..8], PARAM_MAGIC);
        assert_eq!(decode_params(&bytes).unwrap(), p);
        assert!(matches!(decode_params(&bytes[..bytes.len() - 3]), Err(Error::TruncatedPayload { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_params(&long), Err(Error::PayloadLengthMismatch { .. })));
        assert!(matches!(decode_params(b"NOTPARAMS..."), Err(Error::BadMagic)));
    }
}

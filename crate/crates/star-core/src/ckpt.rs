//! Model checkpoints: one JSON header line describing the parameter
//! table, then the raw little-endian f64 payload, checksummed.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Format(String),
    #[error("payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint holds a {got:?} model, expected {want:?}")]
    Kind { want: String, got: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    params: Vec<(String, usize, usize)>,
    payload_crc32: u32,
}

pub fn save_params(
    path: &Path,
    kind: &str,
    meta: &serde_json::Value,
    params: &ParamSet,
) -> Result<(), CkptError> {
    let mut shapes = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, value) in params.iter() {
        let (r, c) = value.shape();
        shapes.push((name.clone(), r, c));
        for &v in &value.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: kind.into(),
        meta: meta.clone(),
        params: shapes,
        payload_crc32: crc32fast::hash(&payload),
    };
    let mut w = std::fs::File::create(path)?;
    writeln!(w, "{}", serde_json::to_string(&header).expect("header json"))?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn load_params(path: &Path, kind: &str) -> Result<(ParamSet, serde_json::Value), CkptError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(CkptError::Format("missing header line".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_line)
        .map_err(|e| CkptError::Format(e.to_string()))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CkptError::Format(format!(
            "format version {} unsupported",
            header.format_version
        )));
    }
    if header.kind != kind {
        return Err(CkptError::Kind { want: kind.into(), got: header.kind });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected: usize = header.params.iter().map(|(_, r, c)| r * c * 8).sum();
    if payload.len() != expected {
        return Err(CkptError::Format(format!(
            "payload is {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let computed = crc32fast::hash(&payload);
    if computed != header.payload_crc32 {
        return Err(CkptError::Checksum { stored: header.payload_crc32, computed });
    }
    let mut params = ParamSet::new();
    let mut off = 0;
    for (name, rows, cols) in header.params {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(payload[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        params.insert(&name, Tensor::from_vec(rows, cols, data));
    }
    Ok((params, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("net.w0", Tensor::from_vec(2, 3, vec![1.5, -0.25, 3.0, 0.0, f64::MIN_POSITIVE, -7.125]));
        p.insert("net.b0", Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]));
        p
    }

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = sample_params();
        let meta = serde_json::json!({"hidden": 3, "note": "x"});
        save_params(&path, "classifier", &meta, &params).unwrap();
        let (back, meta2) = load_params(&path, "classifier").unwrap();
        assert_eq!(meta2["hidden"], 3);
        assert_eq!(back.len(), params.len());
        for (name, t) in params.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(t.shape(), b.shape());
            // bit-exact, not approximately equal
            for (x, y) in t.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn wrong_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_params(&path, "classifier", &serde_json::Value::Null, &sample_params()).unwrap();
        match load_params(&path, "policy") {
            Err(CkptError::Kind { want, got }) => {
                assert_eq!(want, "policy");
                assert_eq!(got, "classifier");
            }
            other => panic!("wrong kind accepted: {other:?}"),
        }
    }

    #[test]
    fn corrupt_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_params(&path, "classifier", &serde_json::Value::Null, &sample_params()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_params(&path, "classifier"), Err(CkptError::Checksum { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_params(&path, "classifier", &serde_json::Value::Null, &sample_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match load_params(&path, "classifier") {
            Err(CkptError::Format(msg)) => assert!(msg.contains("bytes")),
            other => panic!("truncation accepted: {other:?}"),
        }
    }
}

//! Canonical JSON and raster files.
//!
//! JSON keys come out sorted and floats are rounded to nine significant
//! digits, so write → read → write is byte-stable.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Number, Value};
use thiserror::Error;

pub const JSON_SIGNIFICANT_DIGITS: usize = 9;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. } | IoError::Parse { path, .. } => path,
        }
    }
}

pub fn round_significant(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", JSON_SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_significant(n.as_f64().unwrap_or(0.0));
            Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonicalize).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, canonicalize(v))).collect()),
        other => other,
    }
}

pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = canonicalize(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let s = to_canonical_json(value).map_err(|e| IoError::parse(path, e.to_string()))?;
    fs::write(path, s).map_err(|e| IoError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let s = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| IoError::parse(path, e.to_string()))
}

/// Row-major little-endian `f32` raster.
pub fn write_raster(path: &Path, values: &[f32]) -> Result<(), IoError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn read_raster(path: &Path, expected_len: usize) -> Result<Vec<f32>, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(IoError::parse(
            path,
            format!("expected {} bytes, found {}", expected_len * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn rounding_keeps_nine_digits() {
        assert_eq!(round_significant(0.1234567891234), 0.123456789);
        assert_eq!(round_significant(-98765.43210987), -98765.4321);
        assert_eq!(round_significant(0.0), 0.0);
        assert_eq!(round_significant(1e-20 / 3.0), 3.33333333e-21);
    }

    #[test]
    fn canonical_json_is_stable() {
        let mut m = BTreeMap::new();
        m.insert("zeta", vec![1.0 / 3.0, 2.0, 1e-7 * std::f64::consts::PI]);
        m.insert("alpha", vec![-0.5]);
        let a = to_canonical_json(&m).unwrap();
        let back: BTreeMap<String, Vec<f64>> = serde_json::from_str(&a).unwrap();
        let b = to_canonical_json(&back).unwrap();
        assert_eq!(a, b);
        assert!(a.find("alpha").unwrap() < a.find("zeta").unwrap());
        assert!(a.contains("0.333333333"));
        assert!(!a.contains("0.3333333333"));
    }

    #[test]
    fn raster_round_trip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        let vals = vec![0.0f32, 1.5, -2.25, f32::MAX];
        write_raster(&p, &vals).unwrap();
        assert_eq!(fs::read(&p).unwrap()[4..8], 1.5f32.to_le_bytes());
        assert_eq!(read_raster(&p, 4).unwrap(), vals);
        assert!(matches!(read_raster(&p, 5), Err(IoError::Parse { .. })));
    }
}

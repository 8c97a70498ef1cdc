//! Line-oriented `key=value` reports.
//!
//! Keys are emitted in insertion order and floats use Rust's shortest
//! round-trip formatting, so identical inputs always give identical bytes.

use std::fmt::{self, Write as _};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("line {0}: expected `key=value`")]
    Malformed(usize),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvReport {
    entries: Vec<(String, String)>,
}

impl KvReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.entries.push((key.into(), format_f64(value)));
        self
    }

    pub fn extend(&mut self, prefix: &str, other: &KvReport) -> &mut Self {
        for (k, v) in &other.entries {
            self.entries.push((format!("{prefix}{k}"), v.clone()));
        }
        self
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, ReportError> {
        let v = self
            .get(key)
            .ok_or_else(|| ReportError::Missing(key.to_string()))?;
        v.parse().map_err(|_| ReportError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
        })
    }

    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ReportError::Malformed(i + 1))?;
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(KvReport { entries })
    }
}

impl fmt::Display for KvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}")?;
        }
        f.write_str(&s)
    }
}

/// Lower-case hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

//! Small helpers shared by the text file formats. Floats are written with
//! Rust's shortest round-trip representation so every file reloads
//! bit-exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn join_f64(values: &[f64], sep: &str) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push_str(sep);
        }
        s.push_str(&fmt_f64(*v));
    }
    s
}

/// First 8 bytes of the SHA-256 of the bit patterns, as hex.
pub(crate) fn digest_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn join_usize(values: &[usize], sep: &str) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

pub(crate) fn parse_f64(s: &str, path: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value {s:?}")));
    }
    Ok(v)
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str, path: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("invalid integer {s:?}")))
}

pub(crate) fn parse_f64_list(s: &str, sep: char, path: &str, line: usize) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep).map(|t| parse_f64(t, path, line)).collect()
}

pub(crate) fn parse_usize_list(s: &str, path: &str, line: usize) -> Result<Vec<usize>> {
    s.split(',').map(|t| parse_num(t, path, line)).collect()
}

/// Splits `key=value` at the first `=`.
pub(crate) fn split_kv<'a>(s: &'a str, path: &str, line: usize) -> Result<(&'a str, &'a str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::parse(path, line, format!("expected key=value, got {s:?}")))
}

pub(crate) fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Ordered `key=value` header lines, looked up by key.
pub(crate) struct KvBlock<'a> {
    pub(crate) path: &'a str,
    entries: Vec<(usize, &'a str, &'a str)>,
}

impl<'a> KvBlock<'a> {
    pub(crate) fn new(path: &'a str) -> Self {
        Self {
            path,
            entries: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, line: usize, text: &'a str) -> Result<()> {
        let (k, v) = split_kv(text, self.path, line)?;
        self.entries.push((line, k, v));
        Ok(())
    }

    pub(crate) fn get(&self, key: &str) -> Result<(usize, &'a str)> {
        self.find(key).ok_or_else(|| {
            let line = self.entries.last().map_or(1, |e| e.0);
            Error::parse(self.path, line, format!("missing header key {key:?}"))
        })
    }

    pub(crate) fn find(&self, key: &str) -> Option<(usize, &'a str)> {
        self.entries.iter().find(|e| e.1 == key).map(|e| (e.0, e.2))
    }

    pub(crate) fn f64(&self, key: &str) -> Result<f64> {
        let (l, v) = self.get(key)?;
        parse_f64(v, self.path, l)
    }

    pub(crate) fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (l, v) = self.get(key)?;
        parse_num(v, self.path, l)
    }
}

//! `key=value` text configuration.

use std::str::FromStr;

use crate::error::{Error, Result};

/// One `key=value` entry with its 1-based source line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits text into entries. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
        out.push(Entry {
            line: i + 1,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

/// Comma-separated list.
pub fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| value(key, s.trim())).collect()
}

pub fn array<T: FromStr + Copy + Default, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = list(key, v)?;
    if items.len() != N {
        return Err(Error::Config(format!("`{key}` needs {N} values, got {}", items.len())));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&items);
    Ok(out)
}

pub fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

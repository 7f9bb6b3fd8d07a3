//! Canonical record format: newline-delimited JSON, one object per line.
//!
//! Reals are written in shortest round-trip form, so decoding an encoded
//! value yields a bit-identical value.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn to_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("record types always serialize")
}

pub fn encode<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_line(r));
        out.push('\n');
    }
    out
}

pub fn decode<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| Error::Record { line: i + 1, source }))
        .collect()
}

pub fn write_file<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(encode(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text)
}

/// Reads a file expected to hold exactly one record.
pub fn read_single<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut records = read_file::<T>(path)?;
    if records.len() != 1 {
        return Err(Error::Invariant(format!(
            "{}: expected one record, found {}",
            path.display(),
            records.len()
        )));
    }
    Ok(records.remove(0))
}

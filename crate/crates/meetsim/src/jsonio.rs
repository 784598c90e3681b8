//! Canonical JSON writing: pretty-printed with sorted keys and a trailing
//! newline, so identical data always serializes to identical bytes.

use std::fs;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Serialize with sorted object keys (via `serde_json::Value`, whose map is
/// a BTreeMap) and a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let text = to_canonical_json(value).map_err(io::Error::other)?;
    fs::write(path, text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> io::Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        io::Error::other(format!("{}: {e}", path.display()))
    })
}

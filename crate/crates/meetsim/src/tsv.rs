//! Strict TSV reading and writing shared by the packager and the simulator
//! outputs. Canonical files use fixed 6-decimal seconds; raw simulator
//! files use shortest round-trip formatting. No quoting, no escaping:
//! values must not contain tabs or newlines.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

/// The literal used for absent values in canonical TSV files.
pub const NA: &str = "n/a";

#[derive(Debug, Error)]
pub enum TsvError {
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    ColumnCount {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: invalid {what} {value:?}")]
    InvalidField {
        path: String,
        line: usize,
        what: &'static str,
        value: String,
    },
    #[error("{path}: missing header line")]
    MissingHeader { path: String },
    #[error("{path}: unexpected header {found:?}, expected {expected:?}")]
    HeaderMismatch {
        path: String,
        expected: String,
        found: String,
    },
}

/// Fixed-point seconds with 6 decimals, used for every numeric field in
/// canonical TSV files. Negative zero is normalized away.
pub fn fmt_seconds(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

/// The value a canonical file will carry for `x`: format at 6 decimals and
/// parse back. Idempotent, so write -> read -> write is byte stable.
pub fn quantize_seconds(x: f64) -> f64 {
    fmt_seconds(x).parse().expect("fixed-point format is parseable")
}

/// A parsed TSV file: header fields plus data rows, with 1-based line
/// numbers retained for error reporting.
#[derive(Debug)]
pub struct TsvFile {
    pub path: String,
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

/// Parse TSV text; every data row must match the header's column count.
pub fn parse_tsv(path: &Path, text: &str) -> Result<TsvFile, TsvError> {
    let path_str = path.display().to_string();
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| TsvError::MissingHeader {
        path: path_str.clone(),
    })?;
    let header: Vec<String> = header_line.split('\t').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(TsvError::ColumnCount {
                path: path_str,
                line: line_no,
                expected: header.len(),
                found: fields.len(),
            });
        }
        rows.push((line_no, fields));
    }
    Ok(TsvFile {
        path: path_str,
        header,
        rows,
    })
}

impl TsvFile {
    pub fn expect_header(&self, expected: &[&str]) -> Result<(), TsvError> {
        if self.header.len() != expected.len()
            || self.header.iter().zip(expected).any(|(a, b)| a != b)
        {
            return Err(TsvError::HeaderMismatch {
                path: self.path.clone(),
                expected: expected.join("\t"),
                found: self.header.join("\t"),
            });
        }
        Ok(())
    }

    pub fn parse_f64(&self, line: usize, value: &str, what: &'static str) -> Result<f64, TsvError> {
        value.parse().map_err(|_| TsvError::InvalidField {
            path: self.path.clone(),
            line,
            what,
            value: value.to_string(),
        })
    }

    pub fn invalid_field(&self, line: usize, what: &'static str, value: &str) -> TsvError {
        TsvError::InvalidField {
            path: self.path.clone(),
            line,
            what,
            value: value.to_string(),
        }
    }
}

/// Render a header plus rows as TSV text with `\n` line endings.
pub fn render_tsv<R, F>(header: &[&str], rows: R, mut render_row: F) -> String
where
    R: IntoIterator,
    F: FnMut(&mut String, R::Item),
{
    let mut out = String::new();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for row in rows {
        render_row(&mut out, row);
        out.push('\n');
    }
    out
}

/// Append one tab-separated row from pre-rendered fields.
pub fn push_row(out: &mut String, fields: &[&str]) {
    let mut first = true;
    for field in fields {
        if !first {
            out.push('\t');
        }
        let _ = write!(out, "{field}");
        first = false;
    }
}

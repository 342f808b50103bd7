//! Versioned CSV files: a `# dpd-lab csv v1 <schema>` comment line, then a
//! header row and data rows.

use std::io::Write;
use std::path::Path;

use crate::error::{io_err, LabError, Result};

pub const CSV_VERSION: u32 = 1;

pub fn write_csv<S: AsRef<str>>(path: &Path, schema: &str, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    writeln!(file, "# dpd-lab csv v{} {}", CSV_VERSION, schema).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let fail = |e: csv::Error| LabError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    w.write_record(header.iter().map(|h| h.as_ref())).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a file written by [`write_csv`]: `(schema, header, rows)`.
pub fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let fail = |detail: String| LabError::Format {
        path: path.to_path_buf(),
        detail,
    };
    let (first, body) = text.split_once('\n').ok_or_else(|| fail("missing header".into()))?;
    let prefix = format!("# dpd-lab csv v{} ", CSV_VERSION);
    let schema = first.strip_prefix(&prefix).ok_or_else(|| fail(format!("expected '{}' line", prefix.trim_end())))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers().map_err(|e| fail(e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| fail(e.to_string()))?.iter().map(String::from).collect());
    }
    Ok((schema.to_string(), header, rows))
}

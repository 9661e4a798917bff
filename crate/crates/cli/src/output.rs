//! JSON and CSV writers.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{CliError, CliResult};

pub const FIT_SCHEMA_VERSION: u32 = 1;

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> CliResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::config(format!("JSON encoding: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Writes `headers` then one record per row; the header is present even
/// when there are no rows.
pub fn write_csv<T: Serialize>(
    dir: &Path,
    name: &str,
    headers: &[&str],
    rows: &[T],
) -> CliResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(&path, io),
        other => CliError::config(format!("CSV encoding: {other:?}")),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&path)
        .map_err(io_err)?;
    w.write_record(headers).map_err(io_err)?;
    for row in rows {
        w.serialize(row).map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct Diagnostic<'a> {
    pub status: &'static str,
    pub command: &'a str,
    pub kind: &'static str,
    pub message: String,
    pub exit_code: i32,
}

pub fn diagnostic<'a>(command: &'a str, err: &CliError) -> Diagnostic<'a> {
    Diagnostic {
        status: "error",
        command,
        kind: err.kind(),
        message: err.to_string(),
        exit_code: err.exit_code(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: f64,
        value: Option<f64>,
        status: &'static str,
    }

    #[test]
    fn csv_has_header_and_trailing_newline() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [
            Row {
                a: 0.5,
                value: Some(1.25),
                status: "ok",
            },
            Row {
                a: 0.75,
                value: None,
                status: "failed",
            },
        ];
        let path = write_csv(dir.path(), "t.csv", &["a", "value", "status"], &rows).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "a,value,status\n0.5,1.25,ok\n0.75,,failed\n");
        let empty: [Row; 0] = [];
        let path = write_csv(dir.path(), "e.csv", &["a", "value", "status"], &empty).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "a,value,status\n");
    }
}

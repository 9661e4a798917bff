//! One-column CSV input.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

/// Which column to read.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl ColumnRef {
    pub fn parse(s: &str) -> Self {
        match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub values: Vec<f64>,
    pub sha256: String,
    pub column: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reads one observation per row. A first row whose selected field is not
/// numeric is taken as a header.
pub fn read_csv(path: &Path, column: Option<&ColumnRef>) -> CliResult<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_csv(&bytes, column).map(|(values, column)| Dataset {
        values,
        sha256: sha256_hex(&bytes),
        column,
    })
}

pub fn parse_csv(bytes: &[u8], column: Option<&ColumnRef>) -> CliResult<(Vec<f64>, String)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut records = reader.records();
    let first = match records.next() {
        Some(r) => r.map_err(|e| CliError::config(format!("malformed CSV: {e}")))?,
        None => return Err(CliError::config("data file is empty")),
    };
    let index_in = |record: &csv::StringRecord| -> CliResult<usize> {
        match column {
            None => Ok(0),
            Some(ColumnRef::Index(i)) if *i < record.len() => Ok(*i),
            Some(ColumnRef::Index(i)) => Err(CliError::config(format!("column {i} not present"))),
            Some(ColumnRef::Name(name)) => record
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| CliError::config(format!("no column named {name}"))),
        }
    };
    let first_numeric = first.get(0).is_some_and(|f| f.parse::<f64>().is_ok())
        && !matches!(column, Some(ColumnRef::Name(_)));
    let (idx, label, mut values) = if first_numeric {
        let idx = index_in(&first)?;
        let v = parse_field(&first, idx, 1)?;
        (idx, format!("{idx}"), vec![v])
    } else {
        let idx = index_in(&first)?;
        (
            idx,
            first.get(idx).unwrap_or_default().to_string(),
            Vec::new(),
        )
    };
    for (k, record) in records.enumerate() {
        let record = record.map_err(|e| CliError::config(format!("malformed CSV: {e}")))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        values.push(parse_field(&record, idx, k + 2)?);
    }
    if values.is_empty() {
        return Err(CliError::config("data file has no observations"));
    }
    Ok((values, label))
}

fn parse_field(record: &csv::StringRecord, idx: usize, line: usize) -> CliResult<f64> {
    let field = record
        .get(idx)
        .ok_or_else(|| CliError::config(format!("line {line}: missing column {idx}")))?;
    let v: f64 = field
        .parse()
        .map_err(|_| CliError::config(format!("line {line}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(CliError::config(format!("line {line}: non-finite value")));
    }
    Ok(v)
}

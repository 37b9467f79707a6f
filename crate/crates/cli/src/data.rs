//! CSV ingestion: a header row naming the columns `x1[,x2,...]`, one
//! observation per row, plain decimal numbers.

use tubetest::model::Dataset;

use crate::config::ConfigError;

/// Reads a dataset from CSV text, inferring the dimension from the
/// header. Errors carry the offending row and column.
pub fn parse_csv(text: &str) -> Result<Dataset, ConfigError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(ConfigError("CSV file is empty".into()));
    };
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    for (i, name) in names.iter().enumerate() {
        let expected = format!("x{}", i + 1);
        if *name != expected {
            return Err(ConfigError(format!(
                "CSV header column {} is '{name}', expected '{expected}'",
                i + 1
            )));
        }
    }
    let dim = names.len();
    let mut rows = Vec::new();
    let mut n = 0usize;
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim {
            return Err(ConfigError(format!(
                "CSV row {} has {} fields, expected {dim}",
                idx + 1,
                fields.len()
            )));
        }
        for (j, field) in fields.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                ConfigError(format!(
                    "CSV row {}, column x{}: invalid number '{field}'",
                    idx + 1,
                    j + 1
                ))
            })?;
            rows.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(ConfigError("CSV file has a header but no data rows".into()));
    }
    Dataset::new(dim, rows).map_err(|e| ConfigError(e.to_string()))
}

/// Reads and parses a CSV file from disk.
pub fn ingest_csv(path: &std::path::Path) -> Result<Dataset, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
    parse_csv(&text)
}

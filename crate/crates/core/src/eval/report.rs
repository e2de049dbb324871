//! JSON-lines evaluation reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub wall_ms: u64,
    pub dataset: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

fn check_hashes<'a>(records: impl IntoIterator<Item = &'a ReportRecord>) -> Result<()> {
    let mut first: Option<&str> = None;
    for r in records {
        match first {
            None => first = Some(&r.config_hash),
            Some(h) if h != r.config_hash => return Err(Error::HashMismatch(h.to_string(), r.config_hash.clone())),
            _ => {}
        }
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Writes `records`, replacing any existing file. All records must carry
/// the same config hash.
pub fn write_report(path: &Path, records: &[ReportRecord]) -> Result<()> {
    check_hashes(records)?;
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Appends to an existing report, refusing records from another config.
pub fn append_report(path: &Path, records: &[ReportRecord]) -> Result<()> {
    let existing = if path.exists() { read_report(path)? } else { Vec::new() };
    check_hashes(existing.iter().chain(records))?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

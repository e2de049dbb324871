//! Numeric CSV ingestion.

use std::path::Path;

use super::{bounding_box, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(e: &::csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::CsvParse {
        line,
        msg: e.to_string(),
    }
}

/// Loads a rectangular numeric CSV with a header row. Every column except
/// `label_column` becomes a feature (in header order); labels are re-indexed
/// densely by ascending raw value.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_csv(&text, label_column)?;
    if let Some(stem) = path.file_stem() {
        ds.name = stem.to_string_lossy().into_owned();
    }
    Ok(ds)
}

pub fn parse_csv(text: &str, label_column: &str) -> Result<Dataset> {
    let mut rdr = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(::csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| parse_err(&e))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::CsvParse {
            line: 1,
            msg: "missing header row".into(),
        });
    }
    let label_at = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::CsvParse {
            line: 1,
            msg: format!("no column named `{label_column}`"),
        })?;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::CsvParse {
                line,
                msg: format!("non-numeric cell `{cell}` in column `{}`", &header[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvParse {
                    line,
                    msg: format!("non-finite cell `{cell}`"),
                });
            }
            if j == label_at {
                raw_labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::CsvParse {
            line: 2,
            msg: "no data rows".into(),
        });
    }

    let mut distinct = raw_labels.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let labels = raw_labels
        .iter()
        .map(|v| distinct.binary_search_by(|d| d.total_cmp(v)).expect("present") as i64)
        .collect();

    let x = Tensor::new(vec![raw_labels.len(), header.len() - 1], features)?;
    let bounds = bounding_box(&x);
    Dataset::new("csv", x, labels, distinct.len(), bounds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_relabelling() {
        let ds = parse_csv("a,y,b\n1,5,2\n3,9,4\n5,5,6\n", "y").unwrap();
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.x.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn parse_errors_carry_lines() {
        assert!(matches!(parse_csv("", "y"), Err(Error::CsvParse { .. })));
        match parse_csv("a,y\n1,0\n2\n", "y") {
            Err(Error::CsvParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_csv("a,y\n1,0\nx,1\n", "y") {
            Err(Error::CsvParse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("non-numeric"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("a,b\n1,0\n", "y").is_err());
    }

    #[test]
    fn roundtrip_through_writer() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let ds = crate::data::synth::gen_two_moons(20, 0.1, 1).unwrap();
        ds.write_csv(&p).unwrap();
        let back = load_csv(&p, "label").unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.labels, ds.labels);
    }
}

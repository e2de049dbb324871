//! Datasets: synthetic generators, file loaders, augmentation and splits.

pub mod augment;
pub mod csv;
pub mod idx;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label carried by samples that have no class (OOD sets).
pub const UNLABELED: i64 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N x D]`
    pub x: Tensor,
    /// Class index per row, or [`UNLABELED`].
    pub labels: Vec<i64>,
    pub class_count: usize,
    /// Per-dimension `(lo, hi)`.
    pub bounds: Vec<(f64, f64)>,
    /// `(rows, cols)` when each sample is a flattened single-channel image.
    pub image_shape: Option<(usize, usize)>,
}

/// JSON sidecar describing a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub bounds: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        x: Tensor,
        labels: Vec<i64>,
        class_count: usize,
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            x,
            labels,
            class_count,
            bounds,
            image_shape: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.shape().len() != 2 {
            return Err(Error::InvalidShape(format!(
                "dataset features must be [N x D], got {:?}",
                self.x.shape()
            )));
        }
        if self.x.rows() != self.labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: self.x.shape().to_vec(),
                rhs: vec![self.labels.len()],
            });
        }
        if self.bounds.len() != self.dim() {
            return Err(Error::InvalidShape(format!(
                "{} bounds for {} dims",
                self.bounds.len(),
                self.dim()
            )));
        }
        if !self.x.all_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        for (row, &l) in self.labels.iter().enumerate() {
            if l != UNLABELED && (l < 0 || l as usize >= self.class_count) {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: l,
                    classes: self.class_count,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Labels as class indices; fails on unlabeled rows.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(row, &l)| {
                if l < 0 {
                    Err(Error::LabelOutOfRange {
                        row,
                        label: l,
                        classes: self.class_count,
                    })
                } else {
                    Ok(l as usize)
                }
            })
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            bounds: self.bounds.clone(),
            image_shape: self.image_shape,
        }
    }

    pub fn within_bounds(&self) -> bool {
        let d = self.dim();
        self.x
            .data()
            .iter()
            .enumerate()
            .all(|(i, &v)| v >= self.bounds[i % d].0 && v <= self.bounds[i % d].1)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            name: self.name.clone(),
            n: self.len(),
            d: self.dim(),
            c: self.class_count,
            bounds: self.bounds.clone(),
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Writes `x0..x{D-1},label` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = ::csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(r).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[r].to_string());
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: ::csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Tight per-dimension bounding box of `[N x D]` data.
pub fn bounding_box(x: &Tensor) -> Vec<(f64, f64)> {
    let d = x.cols();
    let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for r in 0..x.rows() {
        for (j, &v) in x.row(r).iter().enumerate() {
            b[j].0 = b[j].0.min(v);
            b[j].1 = b[j].1.max(v);
        }
    }
    b
}

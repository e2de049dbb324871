//! IDX image/label archives.
//!
//! Images: big-endian `u32 0x00000803`, `u32 count`, `u32 rows`, `u32 cols`,
//! then `count·rows·cols` u8 pixels. Labels: `u32 0x00000801`, `u32 count`,
//! then `count` u8 labels.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    file: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let have = self.buf.len() - self.pos;
        if have < n {
            return Err(Error::IdxTruncated {
                file: self.file,
                offset: self.pos,
                needed: n - have,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::IdxMagic {
                file: self.file,
                found,
                expected,
            });
        }
        Ok(())
    }
}

pub fn parse_images(buf: &[u8]) -> Result<IdxImages> {
    let mut c = Cursor {
        file: "images",
        buf,
        pos: 0,
    };
    c.magic(IMAGES_MAGIC)?;
    let count = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let pixels = c.take(count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor {
        file: "labels",
        buf,
        pos: 0,
    };
    c.magic(LABELS_MAGIC)?;
    let count = c.u32()? as usize;
    Ok(c.take(count)?.to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from parsed archives; pixels are scaled to `[0, 1]`.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let d = images.rows * images.cols;
    let x = Tensor::new(
        vec![images.count, d],
        images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut ds = Dataset::new(
        "idx",
        x,
        labels.iter().map(|&l| i64::from(l)).collect(),
        classes,
        vec![(0.0, 1.0); d],
    )?;
    ds.image_shape = Some((images.rows, images.cols));
    Ok(ds)
}

pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lb = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut ds = dataset_from_idx(&parse_images(&ib)?, &parse_labels(&lb)?)?;
    if let Some(stem) = images_path.file_stem() {
        ds.name = stem.to_string_lossy().into_owned();
    }
    Ok(ds)
}

pub fn write_idx(images: &IdxImages, labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<()> {
    std::fs::write(images_path, encode_images(images)).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, encode_labels(labels)).map_err(|e| Error::io(labels_path, e))
}

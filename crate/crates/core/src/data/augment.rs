//! Batch augmentation and stratified splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub gaussian_noise_std: f64,
    /// Image-shaped data only.
    pub flip_horizontal: bool,
    /// Zero-padded random crop; image-shaped data only.
    pub crop_pad: usize,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_noise_std >= 0.0) {
            return Err(Error::Config("augment noise std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.gaussian_noise_std == 0.0 && !self.flip_horizontal && self.crop_pad == 0
    }
}

/// Augments a `[B x D]` batch; results are clipped to `bounds`.
pub fn augment(
    x: &Tensor,
    spec: &AugmentationSpec,
    image_shape: Option<(usize, usize)>,
    bounds: &[(f64, f64)],
    rng: &mut Rng,
) -> Tensor {
    if spec.is_identity() {
        return x.clone();
    }
    let d = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        if let Some((h, w)) = image_shape.filter(|&(h, w)| h * w == d) {
            if spec.flip_horizontal && rng.random_bool(0.5) {
                for line in row.chunks_mut(w) {
                    line.reverse();
                }
            }
            if spec.crop_pad > 0 {
                let p = spec.crop_pad as i64;
                let dy = rng.random_range(-p..=p);
                let dx = rng.random_range(-p..=p);
                let src = row.to_vec();
                for i in 0..h as i64 {
                    for j in 0..w as i64 {
                        let (si, sj) = (i + dy, j + dx);
                        row[(i * w as i64 + j) as usize] = if si >= 0 && si < h as i64 && sj >= 0 && sj < w as i64 {
                            src[(si * w as i64 + sj) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        if spec.gaussian_noise_std > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += spec.gaussian_noise_std * z;
            }
        }
        for (v, &(lo, hi)) in row.iter_mut().zip(bounds) {
            *v = v.clamp(lo, hi);
        }
    }
    out
}

/// Label-stratified seeded partition into `(train, test)`.
pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_frac}"
        )));
    }
    let mut rng = substream(seed, "split");
    let mut by_label: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in data.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_label.values_mut() {
        idx.shuffle(&mut rng);
        let k = (train_frac * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((data.subset(&train), data.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_gaussian_mixture, two_blob_means};

    #[test]
    fn identity_spec_is_identity() {
        let x = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap();
        let out = augment(
            &x,
            &AugmentationSpec::default(),
            None,
            &[(0.0, 1.0); 2],
            &mut substream(0, "augment"),
        );
        assert_eq!(out, x);
    }

    #[test]
    fn noise_is_clipped_to_bounds() {
        let x = Tensor::new(vec![50, 2], vec![0.5; 100]).unwrap();
        let spec = AugmentationSpec {
            gaussian_noise_std: 5.0,
            ..Default::default()
        };
        let out = augment(&x, &spec, None, &[(0.0, 1.0); 2], &mut substream(1, "augment"));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(out, x);
    }

    #[test]
    fn flip_and_crop_preserve_pixel_multiset_when_padding_zero() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.5, 0.2]]).unwrap();
        let spec = AugmentationSpec {
            flip_horizontal: true,
            ..Default::default()
        };
        let mut seen_flip = false;
        let mut rng = substream(3, "augment");
        for _ in 0..20 {
            let out = augment(&x, &spec, Some((2, 2)), &[(0.0, 1.0); 4], &mut rng);
            assert!(out.data() == x.data() || out.data() == [0.0, 1.0, 0.2, 0.5]);
            seen_flip |= out.data() != x.data();
        }
        assert!(seen_flip);

        let crop = AugmentationSpec {
            crop_pad: 1,
            ..Default::default()
        };
        let out = augment(&x, &crop, Some((2, 2)), &[(0.0, 1.0); 4], &mut rng);
        assert!(out.data().iter().all(|v| x.data().contains(v) || *v == 0.0));
    }

    #[test]
    fn stratified_split_counts_and_determinism() {
        let ds = gen_gaussian_mixture(50, &two_blob_means(), 0.3, 0).unwrap();
        let (train, test) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        for class in 0..2 {
            assert_eq!(train.labels.iter().filter(|&&l| l == class).count(), 40);
        }
        let (again, _) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(again, train);
        assert!(split(&ds, 1.0, 5).is_err());
    }
}

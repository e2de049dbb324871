//! Synthetic datasets with known structure.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{bounding_box, Dataset, UNLABELED};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Isotropic Gaussian blob per class, `n_per_class` samples each.
pub fn gen_gaussian_mixture(n_per_class: usize, means: &[Vec<f64>], std: f64, seed: u64) -> Result<Dataset> {
    check_mixture(means, std)?;
    sample_mixture(n_per_class, means, std, &mut substream(seed, "mixture"))
}

fn check_mixture(means: &[Vec<f64>], std: f64) -> Result<()> {
    let c = means.len();
    if c < 2 {
        return Err(Error::Config(format!("mixture needs at least 2 classes, got {c}")));
    }
    if !(std > 0.0) {
        return Err(Error::Config("mixture std must be positive".into()));
    }
    let d = means[0].len();
    if d == 0 || means.iter().any(|m| m.len() != d) {
        return Err(Error::Config("mixture means must share a positive dimension".into()));
    }
    for i in 0..c {
        for j in i + 1..c {
            if means[i] == means[j] {
                return Err(Error::Config(format!("mixture means {i} and {j} coincide")));
            }
        }
    }
    Ok(())
}

fn sample_mixture(n_per_class: usize, means: &[Vec<f64>], std: f64, rng: &mut Rng) -> Result<Dataset> {
    let (c, d) = (means.len(), means[0].len());
    let mut data = Vec::with_capacity(c * n_per_class * d);
    let mut labels = Vec::with_capacity(c * n_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(mean.iter().map(|&m| m + std * normal(rng)));
            labels.push(class as i64);
        }
    }
    let x = Tensor::new(vec![labels.len(), d], data)?;
    let bounds = bounding_box(&x);
    Dataset::new("gaussian_mixture", x, labels, c, bounds)
}

/// Means of the default two-blob problem: `(−2, 0)` and `(2, 0)`.
pub fn two_blob_means() -> Vec<Vec<f64>> {
    vec![vec![-2.0, 0.0], vec![2.0, 0.0]]
}

/// The same mixture with every mean moved `shift_sigmas · std` along one
/// random unit direction. Samples are unlabeled.
pub fn gen_shifted_mixture(
    n_per_class: usize,
    means: &[Vec<f64>],
    std: f64,
    shift_sigmas: f64,
    seed: u64,
) -> Result<Dataset> {
    check_mixture(means, std)?;
    let d = means[0].len();
    let mut rng = substream(seed, "shift-direction");
    let dir: Vec<f64> = loop {
        let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-9 {
            break v.into_iter().map(|a| a / n).collect();
        }
    };
    let shifted: Vec<Vec<f64>> = means
        .iter()
        .map(|m| m.iter().zip(&dir).map(|(a, u)| a + shift_sigmas * std * u).collect())
        .collect();
    check_mixture(&shifted, std)?;
    let mut ds = sample_mixture(n_per_class, &shifted, std, &mut substream(seed, "shifted"))?;
    ds.name = "shifted_mixture".into();
    ds.labels.fill(UNLABELED);
    Ok(ds)
}

/// Two interleaved unit half-circles; label 0 is centred at the origin,
/// label 1 at `(1, 0.5)`.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if !n.is_multiple_of(2) || n == 0 {
        return Err(Error::Config(format!("two moons needs a positive even n, got {n}")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Config("two moons noise must be non-negative".into()));
    }
    let mut rng = substream(seed, "moons");
    let half = n / 2;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for label in 0..2 {
        for _ in 0..half {
            let t = rng.random_range(0.0..=PI);
            let (px, py) = if label == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx = if noise_std > 0.0 {
                noise_std * normal(&mut rng)
            } else {
                0.0
            };
            let ny = if noise_std > 0.0 {
                noise_std * normal(&mut rng)
            } else {
                0.0
            };
            data.push(px + nx);
            data.push(py + ny);
            labels.push(label);
        }
    }
    let x = Tensor::new(vec![n, 2], data)?;
    let bounds = bounding_box(&x);
    Dataset::new("two_moons", x, labels, 2, bounds)
}

/// Midpoints `0.5·x_a + 0.5·x_b` of random distinct pairs. Unlabeled.
pub fn gen_interpolation_ood(source: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let m = source.len();
    if m < 2 {
        return Err(Error::Config("interpolation needs at least 2 samples".into()));
    }
    let mut rng = substream(seed, "interp");
    let d = source.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let a = rng.random_range(0..m);
        let mut b = rng.random_range(0..m - 1);
        if b >= a {
            b += 1;
        }
        let (ra, rb) = (source.x.row(a), source.x.row(b));
        data.extend(ra.iter().zip(rb).map(|(u, v)| 0.5 * u + 0.5 * v));
    }
    let mut ds = Dataset::new(
        format!("{}_interp", source.name),
        Tensor::new(vec![n, d], data)?,
        vec![UNLABELED; n],
        source.class_count,
        source.bounds.clone(),
    )?;
    ds.image_shape = source.image_shape;
    Ok(ds)
}

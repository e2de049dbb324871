//! Classification objectives: softmax cross-entropy, the queue-based
//! contrastive estimate of `log q(x|y)`, and their α-weighted hybrid.
//!
//! For a row with label `y` and normalized logits `p`, the contrastive term is
//!
//! ```text
//! −log( exp(p[y]/τ) / (exp(p[y]/τ) + Σ_k exp(n_k[y]/τ)) )
//! ```
//!
//! where `n_k` are the stored rows of the logit queue. Queue rows are plain
//! values, never tape variables, so no gradient can reach them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    L2,
    Softmax,
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l2" => Ok(Normalization::L2),
            "softmax" => Ok(Normalization::Softmax),
            other => Err(format!("expected l2 or softmax, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdgeConfig {
    /// Weight of the discriminative term, in `[0, 1]`.
    pub alpha: f64,
    pub temperature: f64,
    /// Logit queue capacity.
    pub queue_size: usize,
    pub normalization: Normalization,
    pub include_positive_in_denominator: bool,
    /// Replace each selected entry `p` with `log(exp(p) + C − 1)`, the value a
    /// logsumexp over a one-hot-masked row produces.
    pub masked_logsumexp: bool,
}

impl Default for HdgeConfig {
    fn default() -> Self {
        HdgeConfig {
            alpha: 0.5,
            temperature: 0.1,
            queue_size: 4096,
            normalization: Normalization::L2,
            include_positive_in_denominator: true,
            masked_logsumexp: false,
        }
    }
}

impl HdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0,1]".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.queue_size == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean over the batch of `−log softmax(logits)[b, label_b]`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.gather(logp, labels)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

pub fn normalize_logits(tape: &mut Tape, logits: Var, mode: Normalization) -> Result<Var> {
    match mode {
        Normalization::L2 => tape.l2_normalize(logits, 1),
        Normalization::Softmax => tape.softmax(logits, 1),
    }
}

/// Value-only row normalization, for filling the queue outside a tape.
pub fn normalize_rows(logits: &Tensor, mode: Normalization) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let n = normalize_logits(&mut tape, v, mode)?;
    Ok(tape.value(n).clone())
}

fn masked_transform(p: f64, classes: usize) -> f64 {
    // log(exp(p) + (C − 1)), evaluated without overflow
    let c = (classes - 1) as f64;
    if c == 0.0 {
        return p;
    }
    let (hi, lo) = if p > c.ln() { (p, c.ln()) } else { (c.ln(), p) };
    hi + (lo - hi).exp().ln_1p()
}

/// Contrastive estimate of `−log q(x|y)` against detached `negatives`
/// (`[K' x C]`, same normalization as `norm_logits`).
pub fn generative_contrastive_loss(
    tape: &mut Tape,
    norm_logits: Var,
    labels: &[usize],
    negatives: &Tensor,
    cfg: &HdgeConfig,
) -> Result<Var> {
    let shape = tape.value(norm_logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape(format!(
            "normalized logits must be [B x C], got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    if negatives.rows() == 0 || negatives.is_empty() {
        return Err(Error::Empty("contrastive negatives"));
    }
    if negatives.shape().len() != 2 || negatives.cols() != c {
        return Err(Error::Shape {
            op: "generative_contrastive_loss",
            lhs: shape,
            rhs: negatives.shape().to_vec(),
        });
    }
    let k = negatives.rows();
    let inv_t = 1.0 / cfg.temperature;

    let mut pos = tape.gather(norm_logits, labels)?;
    if cfg.masked_logsumexp && c > 1 {
        let e = tape.exp(pos)?;
        let shifted = tape.add_scalar(e, (c - 1) as f64)?;
        pos = tape.log(shifted)?;
    }
    let pos = tape.scale(pos, inv_t)?;

    let mut neg = Vec::with_capacity(b * k);
    for &y in labels {
        for r in 0..k {
            let q = negatives.get2(r, y);
            let q = if cfg.masked_logsumexp {
                masked_transform(q, c)
            } else {
                q
            };
            neg.push(q * inv_t);
        }
    }
    let neg = tape.constant(Tensor::new(vec![b, k], neg)?);

    let denom = if cfg.include_positive_in_denominator {
        let col = tape.reshape(pos, vec![b, 1])?;
        let all = tape.concat(&[col, neg], 1)?;
        tape.log_sum_exp(all, 1)?
    } else {
        tape.log_sum_exp(neg, 1)?
    };
    let per_row = tape.sub(denom, pos)?;
    tape.mean(per_row)
}

/// Tape handles for the pieces of the hybrid objective.
#[derive(Debug, Clone, Copy)]
pub struct HybridLoss {
    pub total: Var,
    pub ce: Var,
    pub cl: Var,
    /// Normalized logits; these are what the training loop enqueues.
    pub normalized: Var,
}

impl HybridLoss {
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64) {
        let v = |x: Var| tape.value(x).data()[0];
        (v(self.total), v(self.ce), v(self.cl))
    }
}

/// `α·CE + (1−α)·contrastive`, the contrastive part taken on normalized
/// logits.
pub fn hybrid_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    negatives: &Tensor,
    cfg: &HdgeConfig,
) -> Result<HybridLoss> {
    cfg.validate()?;
    let ce = cross_entropy_loss(tape, logits, labels)?;
    let normalized = normalize_logits(tape, logits, cfg.normalization)?;
    let cl = generative_contrastive_loss(tape, normalized, labels, negatives, cfg)?;
    let a = tape.scale(ce, cfg.alpha)?;
    let b = tape.scale(cl, 1.0 - cfg.alpha)?;
    let total = tape.add(a, b)?;
    Ok(HybridLoss {
        total,
        ce,
        cl,
        normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    fn cfg_t(t: f64) -> HdgeConfig {
        HdgeConfig {
            temperature: t,
            ..HdgeConfig::default()
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let ce = cross_entropy_loss(&mut tape, l, &[0]).unwrap();
        assert!((scalar(&tape, ce) - 2f64.ln()).abs() < 1e-15);

        // softplus(−20)
        let l = tape.constant(Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap());
        let ce = cross_entropy_loss(&mut tape, l, &[0]).unwrap();
        let want = (-20f64).exp().ln_1p();
        assert!((scalar(&tape, ce) - want).abs() < 1e-20);

        let l = tape.constant(Tensor::from_rows(&[vec![3.3; 4]]).unwrap());
        let ce = cross_entropy_loss(&mut tape, l, &[2]).unwrap();
        assert!((scalar(&tape, ce) - 4f64.ln()).abs() < 1e-15);

        assert!(matches!(
            cross_entropy_loss(&mut tape, l, &[4]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn normalize_modes() {
        let t = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(normalize_rows(&t, Normalization::L2).unwrap().data(), &[0.6, 0.8]);
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(normalize_rows(&z, Normalization::Softmax).unwrap().data(), &[0.5, 0.5]);
        assert!(normalize_rows(&z, Normalization::L2).is_err());
    }

    #[test]
    fn contrastive_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap());
        let negs = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let l = generative_contrastive_loss(&mut tape, p, &[0], &negs, &cfg_t(1.0)).unwrap();
        let want = -((2f64).exp() / ((2f64).exp() + 1.0)).ln();
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
        assert!((scalar(&tape, l) - 0.126_928).abs() < 1e-6);

        for k in [1usize, 5, 64] {
            let negs = Tensor::new(vec![k, 2], vec![0.7; 2 * k]).unwrap();
            let p = tape.constant(Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap());
            let l = generative_contrastive_loss(&mut tape, p, &[1], &negs, &cfg_t(0.1)).unwrap();
            assert!((scalar(&tape, l) - ((k + 1) as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn temperature_is_a_logit_scale() {
        let rows = Tensor::from_rows(&[vec![0.3, -0.4], vec![0.9, 0.1]]).unwrap();
        let negs = Tensor::from_rows(&[vec![0.2, 0.5], vec![-0.6, 0.8], vec![0.0, 0.1]]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(rows.clone());
        let a = generative_contrastive_loss(&mut tape, p, &[0, 1], &negs, &cfg_t(0.5)).unwrap();
        let doubled = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 2.0).collect()).unwrap();
        let p2 = tape.constant(doubled(&rows));
        let b = generative_contrastive_loss(&mut tape, p2, &[0, 1], &doubled(&negs), &cfg_t(1.0)).unwrap();
        assert_eq!(scalar(&tape, a), scalar(&tape, b));
    }

    #[test]
    fn contrastive_errors() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let empty = Tensor::zeros(vec![0, 2]);
        assert!(generative_contrastive_loss(&mut tape, p, &[0], &empty, &cfg_t(1.0)).is_err());
        let negs = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            generative_contrastive_loss(&mut tape, p, &[3], &negs, &cfg_t(1.0)),
            Err(Error::LabelOutOfRange { .. })
        ));
        let wide = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(generative_contrastive_loss(&mut tape, p, &[0], &wide, &cfg_t(1.0)).is_err());
    }

    #[test]
    fn excluding_positive_drops_it_from_denominator() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap());
        let negs = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let cfg = HdgeConfig {
            temperature: 1.0,
            include_positive_in_denominator: false,
            ..HdgeConfig::default()
        };
        let l = generative_contrastive_loss(&mut tape, p, &[0], &negs, &cfg).unwrap();
        let want = (1.0 + 1f64.exp()).ln() - 2.0;
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
    }

    #[test]
    fn masked_logsumexp_variant_matches_pseudocode_transform() {
        // logsumexp over a one-hot-masked row of C entries.
        let masked = |row: &[f64], y: usize| {
            row.iter()
                .enumerate()
                .map(|(c, &v)| if c == y { v.exp() } else { 1.0 })
                .sum::<f64>()
                .ln()
        };
        let rows = [vec![0.6, 0.8, 0.0], vec![-0.3, 0.2, 0.9]];
        let negs = [vec![0.1, 0.5, 0.4], vec![0.7, -0.7, 0.1]];
        let labels = [1usize, 2];
        let tau = 0.1;
        let mut want = 0.0;
        for (row, &y) in rows.iter().zip(&labels) {
            let pos = masked(row, y) / tau;
            let mut terms = vec![pos];
            terms.extend(negs.iter().map(|n| masked(n, y) / tau));
            let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            want += (lse - pos) / 2.0;
        }
        let cfg = HdgeConfig {
            masked_logsumexp: true,
            ..HdgeConfig::default()
        };
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&rows).unwrap());
        let l = generative_contrastive_loss(&mut tape, p, &labels, &Tensor::from_rows(&negs).unwrap(), &cfg).unwrap();
        assert!((scalar(&tape, l) - want).abs() < 1e-10);
    }

    #[test]
    fn hybrid_endpoints_and_mixture() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.5, 0.2, -0.7]]).unwrap();
        let negs = normalize_rows(
            &Tensor::from_rows(&[vec![0.1, 0.9, -0.3], vec![1.0, 0.4, 0.2]]).unwrap(),
            Normalization::L2,
        )
        .unwrap();
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let cfg = HdgeConfig {
                alpha,
                ..HdgeConfig::default()
            };
            let mut tape = Tape::new();
            let l = tape.constant(logits.clone());
            let h = hybrid_loss(&mut tape, l, &[2, 0], &negs, &cfg).unwrap();
            let (total, ce, cl) = h.values(&tape);
            assert_eq!(total, alpha * ce + (1.0 - alpha) * cl);
            if alpha == 1.0 {
                assert_eq!(total.to_bits(), ce.to_bits());
            }
            if alpha == 0.0 {
                assert_eq!(total.to_bits(), cl.to_bits());
            }
        }
    }

    #[test]
    fn hybrid_of_known_components() {
        // α = 0.5 with components 0.8 and 0.4
        assert!((0.5 * 0.8 + 0.5 * 0.4 - 0.6f64).abs() < 1e-15);
        let bad = HdgeConfig {
            alpha: 1.5,
            ..HdgeConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("alpha must be in [0,1]"));
    }

    #[test]
    fn negatives_never_receive_gradient() {
        let mut tape = Tape::new();
        let raw_negs = tape.leaf(Tensor::from_rows(&[vec![0.4, 0.1], vec![-0.2, 0.9]]).unwrap());
        let negs = tape.value(raw_negs).clone();
        let l = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.5]]).unwrap());
        let n = normalize_logits(&mut tape, l, Normalization::L2).unwrap();
        let loss = generative_contrastive_loss(&mut tape, n, &[1], &negs, &cfg_t(0.1)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get_or_zeros(raw_negs, 4).iter().all(|&v| v == 0.0));
        assert!(g.get(l).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences() {
        let negs = normalize_rows(
            &Tensor::from_rows(&[vec![0.1, 0.9, -0.3], vec![1.0, 0.4, 0.2], vec![-0.5, 0.3, 0.8]]).unwrap(),
            Normalization::L2,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![1.2, 0.3], vec![-0.4, 0.8]]).unwrap();
        let w1 = Tensor::new(vec![2, 4], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2, -0.3]).unwrap();
        let b1 = Tensor::vector(vec![0.05, -0.1, 0.0, 0.2]);
        let w2 = Tensor::new(
            vec![4, 3],
            vec![0.2, -0.5, 0.3, 0.4, 0.1, -0.2, -0.3, 0.6, 0.1, 0.5, -0.1, 0.2],
        )
        .unwrap();
        let b2 = Tensor::vector(vec![0.0, 0.1, -0.1]);
        for norm in [Normalization::L2, Normalization::Softmax] {
            let cfg = HdgeConfig {
                normalization: norm,
                ..HdgeConfig::default()
            };
            let negs = if norm == Normalization::L2 {
                negs.clone()
            } else {
                normalize_rows(&negs, Normalization::Softmax).unwrap()
            };
            let rep = check_gradients(
                |t, v| {
                    let h = t.matmul(v[0], v[1])?;
                    let h = t.add_bias(h, v[2])?;
                    let h = t.relu(h)?;
                    let h = t.matmul(h, v[3])?;
                    let logits = t.add_bias(h, v[4])?;
                    Ok(hybrid_loss(t, logits, &[0, 2, 1], &negs, &cfg)?.total)
                },
                &[x.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone()],
                1e-6,
            )
            .unwrap();
            assert!(rep.max_rel_err < 1e-5, "{norm:?}: {rep:?}");
        }
    }

    proptest! {
        #[test]
        fn contrastive_nonnegative_and_monotone(
            pos in proptest::collection::vec(-1.0f64..1.0, 3),
            negs in proptest::collection::vec(-1.0f64..1.0, 3 * 5),
            which in 0usize..5,
            bump in 0.01f64..1.0,
        ) {
            let cfg = HdgeConfig::default();
            let negs_t = Tensor::new(vec![5, 3], negs.clone()).unwrap();
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::new(vec![1, 3], pos.clone()).unwrap());
            let base = generative_contrastive_loss(&mut tape, p, &[1], &negs_t, &cfg).unwrap();
            let base = scalar(&tape, base);
            prop_assert!(base >= 0.0);

            let mut bumped = negs;
            bumped[which * 3 + 1] += bump;
            let bumped = Tensor::new(vec![5, 3], bumped).unwrap();
            let more = generative_contrastive_loss(&mut tape, p, &[1], &bumped, &cfg).unwrap();
            prop_assert!(scalar(&tape, more) > base);
        }
    }
}

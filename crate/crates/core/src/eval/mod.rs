//! Accuracy, OOD scoring, AUROC, calibration error and PGD robustness.

pub mod pgd;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Tape, Tensor};

/// Fraction of rows whose argmax equals the label. Ties go to the smallest
/// class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape {
            op: "accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScoreKind {
    /// `logsumexp(f(x))`, the unnormalized log density.
    LogPx,
    /// `max_y softmax(f(x))[y]`.
    MaxProb,
}

impl OodScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            OodScoreKind::LogPx => "log_px",
            OodScoreKind::MaxProb => "max_prob",
        }
    }
}

impl std::str::FromStr for OodScoreKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "log_px" => Ok(OodScoreKind::LogPx),
            "max_prob" => Ok(OodScoreKind::MaxProb),
            other => Err(format!("expected log_px or max_prob, got `{other}`")),
        }
    }
}

/// Per-row score; higher means more in-distribution.
pub fn ood_score_from_logits(logits: &Tensor, kind: OodScoreKind) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let s = match kind {
        OodScoreKind::LogPx => tape.log_sum_exp(l, 1)?,
        OodScoreKind::MaxProb => {
            let p = tape.softmax(l, 1)?;
            let best = tape.value(p).argmax_rows();
            tape.gather(p, &best)?
        }
    };
    Ok(tape.value(s).clone())
}

pub fn ood_score(params: &ModelParams, x: &Tensor, kind: OodScoreKind) -> Result<Tensor> {
    ood_score_from_logits(&params.logits(x)?, kind)
}

/// `P(in > out) + ½·P(in = out)` over all pairs, from midranks.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::Empty("auroc"));
    }
    if scores_in.iter().chain(scores_out).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("auroc scores"));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, true))
        .chain(scores_out.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Ranks are 1-based; doubled so tied midranks stay integral.
    let mut rank_sum_2x: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid_2x = (i + 1 + j + 1) as u128;
        rank_sum_2x += mid_2x * all[i..=j].iter().filter(|e| e.1).count() as u128;
        i = j + 1;
    }
    let (n_in, n_out) = (scores_in.len() as u128, scores_out.len() as u128);
    let u_2x = rank_sum_2x - n_in * (n_in + 1);
    let pairs_2x = 2 * n_in * n_out;
    // Evaluate from whichever side is smaller so that swapping the inputs
    // gives exactly one minus the result.
    if 2 * u_2x <= pairs_2x {
        Ok(u_2x as f64 / pairs_2x as f64)
    } else {
        Ok(1.0 - (pairs_2x - u_2x) as f64 / pairs_2x as f64)
    }
}

/// Expected calibration error over `bins` equal-width buckets. A confidence
/// on a boundary belongs to the upper bucket; `1.0` lands in the last one.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::Shape {
            op: "ece",
            lhs: vec![confidences.len()],
            rhs: vec![correct.len()],
        });
    }
    if confidences.is_empty() {
        return Err(Error::Empty("ece"));
    }
    if bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain {
                op: "ece",
                detail: format!("confidence {c} outside [0, 1]"),
            });
        }
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

/// Max-softmax confidences and correctness flags for `ece`.
pub fn confidence_and_correct(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<bool>)> {
    let conf = ood_score_from_logits(logits, OodScoreKind::MaxProb)?.into_data();
    let correct = logits.argmax_rows().iter().zip(labels).map(|(a, b)| a == b).collect();
    Ok((conf, correct))
}

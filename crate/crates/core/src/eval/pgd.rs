//! Projected gradient ascent on cross-entropy inside an ε-ball.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::accuracy;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::cross_entropy_loss;
use crate::model::{forward, ModelParams};
use crate::rng::{substream, Rng};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdNorm {
    LInf,
    L2,
}

impl PgdNorm {
    pub fn name(self) -> &'static str {
        match self {
            PgdNorm::LInf => "l_inf",
            PgdNorm::L2 => "l_2",
        }
    }
}

impl std::str::FromStr for PgdNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l_inf" | "linf" => Ok(PgdNorm::LInf),
            "l_2" | "l2" => Ok(PgdNorm::L2),
            other => Err(format!("expected l_inf or l_2, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub norm: PgdNorm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

pub const DEFAULT_PGD_STEPS: usize = 20;

impl PgdConfig {
    /// 20 steps of `2.5·ε/20` with a random start. At ε = 0 the step size
    /// is irrelevant and falls back to `2.5/steps`.
    pub fn new(norm: PgdNorm, epsilon: f64) -> Self {
        Self::with_steps(norm, epsilon, DEFAULT_PGD_STEPS)
    }

    pub fn with_steps(norm: PgdNorm, epsilon: f64, steps: usize) -> Self {
        let scale = if epsilon > 0.0 { epsilon } else { 1.0 };
        PgdConfig {
            norm,
            epsilon,
            steps,
            step_size: 2.5 * scale / steps.max(1) as f64,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("pgd epsilon must be non-negative".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("pgd needs at least one step".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("pgd step size must be positive".into()));
        }
        Ok(())
    }
}

fn project_and_clip(adv: &mut [f64], x: &[f64], d: usize, cfg: &PgdConfig, domain: &[(f64, f64)]) {
    for (a_row, x_row) in adv.chunks_mut(d).zip(x.chunks(d)) {
        match cfg.norm {
            PgdNorm::LInf => {
                for (a, &x0) in a_row.iter_mut().zip(x_row) {
                    *a = a.clamp(x0 - cfg.epsilon, x0 + cfg.epsilon);
                }
            }
            PgdNorm::L2 => {
                let n = a_row
                    .iter()
                    .zip(x_row)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if n > cfg.epsilon {
                    let s = cfg.epsilon / n;
                    for (a, &x0) in a_row.iter_mut().zip(x_row) {
                        *a = x0 + (*a - x0) * s;
                    }
                }
            }
        }
        for (a, &(lo, hi)) in a_row.iter_mut().zip(domain) {
            *a = a.clamp(lo, hi);
        }
    }
}

fn random_start(adv: &mut [f64], d: usize, cfg: &PgdConfig, rng: &mut Rng) {
    for row in adv.chunks_mut(d) {
        match cfg.norm {
            PgdNorm::LInf => {
                for a in row.iter_mut() {
                    *a += rng.random_range(-1.0..=1.0) * cfg.epsilon;
                }
            }
            PgdNorm::L2 => {
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    continue;
                }
                let u: f64 = rng.random();
                let r = cfg.epsilon * u.powf(1.0 / d as f64);
                for (a, v) in row.iter_mut().zip(dir) {
                    *a += r * v / n;
                }
            }
        }
    }
}

/// Adversarial inputs for `(x, labels)` under `params`. Every row satisfies
/// `‖x̂ − x‖ ≤ ε` in the chosen norm and lies inside `domain`.
pub fn pgd_attack_with(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    domain: &[(f64, f64)],
    rng: &mut Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let d = x.cols();
    if domain.len() != d {
        return Err(Error::Shape {
            op: "pgd_attack",
            lhs: x.shape().to_vec(),
            rhs: vec![domain.len()],
        });
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut adv = x.clone();
    if cfg.random_start {
        random_start(adv.data_mut(), d, cfg, rng);
        project_and_clip(adv.data_mut(), x.data(), d, cfg, domain);
    }
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let xv = tape.leaf(adv.clone());
        let logits = forward(&mut tape, &bound, xv)?;
        let loss = cross_entropy_loss(&mut tape, logits, labels)?;
        let g = tape.backward(loss)?.get_or_zeros(xv, adv.len());
        for (a_row, g_row) in adv.data_mut().chunks_mut(d).zip(g.chunks(d)) {
            match cfg.norm {
                PgdNorm::LInf => {
                    for (a, &gi) in a_row.iter_mut().zip(g_row) {
                        if gi != 0.0 {
                            *a += cfg.step_size * gi.signum();
                        }
                    }
                }
                PgdNorm::L2 => {
                    let n = g_row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        for (a, &gi) in a_row.iter_mut().zip(g_row) {
                            *a += cfg.step_size * gi / n;
                        }
                    }
                }
            }
        }
        project_and_clip(adv.data_mut(), x.data(), d, cfg, domain);
    }
    Ok(adv)
}

pub fn pgd_attack(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    domain: &[(f64, f64)],
    seed: u64,
) -> Result<Tensor> {
    pgd_attack_with(params, x, labels, cfg, domain, &mut substream(seed, "attack"))
}

/// Accuracy under attack at each ε. `eps_list` must be ascending and start
/// at 0; each point uses `template`'s step count and random-start flag with
/// the default step size for its ε.
pub fn robust_accuracy_curve(
    params: &ModelParams,
    data: &Dataset,
    norm: PgdNorm,
    eps_list: &[f64],
    template: &PgdConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if eps_list.first() != Some(&0.0) || eps_list.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("epsilon list must be ascending and start at 0".into()));
    }
    let labels = data.class_labels()?;
    let mut rng = substream(seed, "attack");
    let mut out = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let cfg = PgdConfig {
            random_start: template.random_start,
            ..PgdConfig::with_steps(norm, eps, template.steps)
        };
        let adv = pgd_attack_with(params, &data.x, &labels, &cfg, &data.bounds, &mut rng)?;
        out.push((eps, accuracy(&params.logits(&adv)?, &labels)?));
    }
    Ok(out)
}

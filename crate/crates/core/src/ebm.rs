//! Energies read off classifier logits, Langevin sampling, and the
//! sample-based marginal likelihood term.
//!
//! `E(x, y) = −f(x)[y]` and `E(x) = −logsumexp_y f(x)[y]`. Nothing here ever
//! evaluates the partition function; the marginal term only compares energies
//! of data against energies of chain samples.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{hybrid_loss, HdgeConfig, HybridLoss};
use crate::model::{forward, BoundParams, ModelParams};
use crate::rng::{substream, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Per-row `−f(x)[y]`.
pub fn energy_joint(tape: &mut Tape, params: &BoundParams, x: Var, labels: &[usize]) -> Result<Var> {
    let logits = forward(tape, params, x)?;
    let picked = tape.gather(logits, labels)?;
    tape.neg(picked)
}

/// Per-row `−logsumexp(f(x))`.
pub fn energy_marginal(tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
    let logits = forward(tape, params, x)?;
    marginal_from_logits(tape, logits)
}

pub fn marginal_from_logits(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lse = tape.log_sum_exp(logits, 1)?;
    tape.neg(lse)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgldInit {
    /// Uniform over an initialization box.
    Uniform,
    /// Start from the current data batch.
    Data,
    /// Persistent replay buffer with random re-initialization.
    Buffer,
}

impl std::str::FromStr for SgldInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(SgldInit::Uniform),
            "data" => Ok(SgldInit::Data),
            "buffer" => Ok(SgldInit::Buffer),
            other => Err(format!("expected uniform, data or buffer, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    pub step_size: f64,
    pub noise_std: f64,
    pub n_steps: usize,
    pub init: SgldInit,
    /// Step size at step `i` is `step_size · (1 + i)^(−decay)`.
    pub decay: f64,
    /// Per-dimension clamp applied after every update.
    pub clamp: Option<Vec<(f64, f64)>>,
}

impl SgldConfig {
    /// Noise variance equal to the step size (`noise_std = √step`).
    pub fn variance_reading(step_size: f64, n_steps: usize) -> Self {
        SgldConfig {
            step_size,
            noise_std: step_size.sqrt(),
            n_steps,
            init: SgldInit::Buffer,
            decay: 0.0,
            clamp: None,
        }
    }

    /// Noise standard deviation equal to the step size.
    pub fn std_reading(step_size: f64, n_steps: usize) -> Self {
        SgldConfig {
            noise_std: step_size,
            ..Self::variance_reading(step_size, n_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::Config("sgld step size and noise std must be positive".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("sgld needs at least one step".into()));
        }
        if !(self.decay >= 0.0) {
            return Err(Error::Config("sgld decay must be non-negative".into()));
        }
        Ok(())
    }

    fn schedule(&self, i: usize) -> (f64, f64) {
        if self.decay == 0.0 {
            return (self.step_size, self.noise_std);
        }
        let ratio = (1.0 + i as f64).powf(-self.decay);
        (self.step_size * ratio, self.noise_std * ratio.sqrt())
    }
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self::variance_reading(1.0, 20)
    }
}

/// Runs `x ← x − (step/2)·∂E/∂x + noise·ε` for `cfg.n_steps` steps.
///
/// `energy` maps a `[B x D]` variable to per-row energies (any shape whose
/// sum is the total energy). Chains share no state: each row's gradient only
/// depends on that row.
pub fn sgld_sample_with<E>(energy: E, init_x: &Tensor, cfg: &SgldConfig, rng: &mut Rng) -> Result<Tensor>
where
    E: Fn(&mut Tape, Var) -> Result<Var>,
{
    cfg.validate()?;
    let mut x = init_x.clone();
    let d = x.cols();
    for step in 0..cfg.n_steps {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let e = energy(&mut tape, xv)?;
        if !tape.value(e).all_finite() {
            return Err(Error::ChainDivergence { step });
        }
        let total = tape.sum(e)?;
        let grads = tape.backward(total)?;
        let g = grads.get_or_zeros(xv, x.len());
        let (alpha, sigma) = cfg.schedule(step);
        for (i, (xi, gi)) in x.data_mut().iter_mut().zip(&g).enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *xi += -0.5 * alpha * gi + sigma * z;
            if let Some(b) = &cfg.clamp {
                let (lo, hi) = b[i % d];
                *xi = xi.clamp(lo, hi);
            }
            if !xi.is_finite() {
                return Err(Error::ChainDivergence { step });
            }
        }
    }
    Ok(x)
}

pub fn sgld_sample<E>(energy: E, init_x: &Tensor, cfg: &SgldConfig, seed: u64) -> Result<Tensor>
where
    E: Fn(&mut Tape, Var) -> Result<Var>,
{
    sgld_sample_with(energy, init_x, cfg, &mut substream(seed, "sgld"))
}

/// Persistent chain states.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    reinit_prob: f64,
    entries: Vec<Vec<f64>>,
}

/// Result of drawing chain starts from a buffer.
#[derive(Debug, Clone)]
pub struct BufferDraw {
    pub x: Tensor,
    /// Slot each chain will be written back to.
    pub slots: Vec<usize>,
    pub reinitialized: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, reinit_prob: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay buffer capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&reinit_prob) {
            return Err(Error::Config("reinit probability must be in [0,1]".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            reinit_prob,
            entries: Vec::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, slot: usize) -> Option<&[f64]> {
        self.entries.get(slot).map(Vec::as_slice)
    }

    /// Draws `batch` chain starts. A chain restarts from `fresh` with
    /// probability `reinit_prob`, or while the buffer is still filling.
    pub fn draw(
        &mut self,
        batch: usize,
        dim: usize,
        mut fresh: impl FnMut(&mut Rng) -> Vec<f64>,
        rng: &mut Rng,
    ) -> Result<BufferDraw> {
        let mut data = Vec::with_capacity(batch * dim);
        let mut slots = Vec::with_capacity(batch);
        let mut reinitialized = 0;
        let mut pending = self.entries.len();
        for _ in 0..batch {
            let filling = pending < self.capacity;
            let reinit = rng.random_bool(self.reinit_prob);
            if filling {
                slots.push(pending);
                pending += 1;
                data.extend(fresh(rng));
                reinitialized += 1;
            } else {
                let slot = rng.random_range(0..self.entries.len());
                slots.push(slot);
                if reinit {
                    data.extend(fresh(rng));
                    reinitialized += 1;
                } else {
                    data.extend_from_slice(&self.entries[slot]);
                }
            }
        }
        Ok(BufferDraw {
            x: Tensor::new(vec![batch, dim], data)?,
            slots,
            reinitialized,
        })
    }

    pub fn write_back(&mut self, slots: &[usize], states: &Tensor) -> Result<()> {
        if !states.all_finite() {
            return Err(Error::NonFinite("replay buffer states"));
        }
        for (r, &slot) in slots.iter().enumerate() {
            let row = states.row(r).to_vec();
            if slot < self.entries.len() {
                self.entries[slot] = row;
            } else if slot == self.entries.len() && slot < self.capacity {
                self.entries.push(row);
            } else {
                return Err(Error::InvalidShape(format!(
                    "buffer slot {slot} beyond {} entries",
                    self.entries.len()
                )));
            }
        }
        Ok(())
    }
}

/// `mean E(data) − mean E(model)`. Its parameter gradient is the negated
/// two-sample estimate of `∂ log p(x) / ∂θ`, so minimizing it raises the
/// model density of the data. `model_x` is treated as a constant.
pub fn jem_marginal_term(tape: &mut Tape, params: &BoundParams, data_x: Var, model_x: &Tensor) -> Result<Var> {
    let e_data = energy_marginal(tape, params, data_x)?;
    let mx = tape.constant(model_x.clone());
    let e_model = energy_marginal(tape, params, mx)?;
    let a = tape.mean(e_data)?;
    let b = tape.mean(e_model)?;
    let term = tape.sub(a, b)?;
    if !tape.value(term).all_finite() {
        return Err(Error::NonFinite("jem marginal term"));
    }
    Ok(term)
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub logits: Var,
    pub hybrid: HybridLoss,
    pub generative: Var,
}

/// Hybrid objective plus `lambda_gen` times the marginal term.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective(
    tape: &mut Tape,
    params: &BoundParams,
    x: Var,
    labels: &[usize],
    negatives: &Tensor,
    cfg: &HdgeConfig,
    model_x: &Tensor,
    lambda_gen: f64,
) -> Result<JointLoss> {
    let logits = forward(tape, params, x)?;
    let hybrid = hybrid_loss(tape, logits, labels, negatives, cfg)?;
    let generative = jem_marginal_term(tape, params, x, model_x)?;
    let weighted = tape.scale(generative, lambda_gen)?;
    let total = tape.add(hybrid.total, weighted)?;
    Ok(JointLoss {
        total,
        logits,
        hybrid,
        generative,
    })
}

/// Chain state for the marginal term across training steps.
#[derive(Debug, Clone)]
pub struct JemSampler {
    pub cfg: SgldConfig,
    pub batch: usize,
    /// Box for uniform (re)initialization.
    pub init_box: Vec<(f64, f64)>,
    pub buffer: ReplayBuffer,
}

impl JemSampler {
    pub fn new(
        cfg: SgldConfig,
        batch: usize,
        init_box: Vec<(f64, f64)>,
        buffer_size: usize,
        reinit_prob: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(JemSampler {
            cfg,
            batch,
            init_box,
            buffer: ReplayBuffer::new(buffer_size, reinit_prob)?,
        })
    }

    fn uniform(&self, rng: &mut Rng) -> Vec<f64> {
        self.init_box
            .iter()
            .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect()
    }

    /// Draws chain starts, runs SGLD under `params` and (for buffer init)
    /// writes the finished chains back.
    pub fn sample(&mut self, params: &ModelParams, data_batch: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let d = self.init_box.len();
        let (init, slots) = match self.cfg.init {
            SgldInit::Uniform => {
                let mut v = Vec::with_capacity(self.batch * d);
                for _ in 0..self.batch {
                    v.extend(self.uniform(rng));
                }
                (Tensor::new(vec![self.batch, d], v)?, None)
            }
            SgldInit::Data => (data_batch.clone(), None),
            SgldInit::Buffer => {
                let init_box = self.init_box.clone();
                let fresh = |r: &mut Rng| {
                    init_box
                        .iter()
                        .map(|&(lo, hi)| if hi > lo { r.random_range(lo..hi) } else { lo })
                        .collect()
                };
                let draw = self.buffer.draw(self.batch, d, fresh, rng)?;
                (draw.x, Some(draw.slots))
            }
        };
        let energy = |tape: &mut Tape, x: Var| {
            let b = params.bind_frozen(tape);
            energy_marginal(tape, &b, x)
        };
        let out = sgld_sample_with(energy, &init, &self.cfg, rng)?;
        if let Some(slots) = slots {
            self.buffer.write_back(&slots, &out)?;
        }
        Ok(out)
    }
}

/// Box scaled by `factor` about its centre.
pub fn expand_box(bounds: &[(f64, f64)], factor: f64) -> Vec<(f64, f64)> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            let (c, h) = (0.5 * (lo + hi), 0.5 * (hi - lo) * factor);
            (c - h, c + h)
        })
        .collect()
}

/// One row per sample, `D` columns, header `x0..x{D-1}`.
pub fn write_samples_csv(path: &Path, samples: &Tensor) -> Result<()> {
    let mut out = String::new();
    let d = samples.cols();
    out.push_str(&(0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(","));
    out.push('\n');
    for r in 0..samples.rows() {
        let row: Vec<String> = samples.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

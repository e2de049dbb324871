//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, absent keys take their
//! defaults and unknown keys are rejected. Lists are comma separated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::augment::AugmentationSpec;
use crate::ebm::{SgldConfig, SgldInit};
use crate::error::{Error, Result};
use crate::eval::pgd::{PgdNorm, DEFAULT_PGD_STEPS};
use crate::eval::OodScoreKind;
use crate::loss::{HdgeConfig, Normalization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        noise: f64,
    },
    /// Two classes use means `(−2, 0)` and `(2, 0)`; more classes sit evenly
    /// on a circle of radius 2.
    GaussianMixture {
        n_per_class: usize,
        std: f64,
        classes: usize,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy only; no queue is kept.
    Ce,
    Hdge,
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce" => Ok(Objective::Ce),
            "hdge" => Ok(Objective::Hdge),
            other => Err(format!("expected ce or hdge, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Accuracy,
    Auroc,
    Ece,
    Robust,
}

impl FromStr for EvalMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "accuracy" => Ok(EvalMetric::Accuracy),
            "auroc" => Ok(EvalMetric::Auroc),
            "ece" => Ok(EvalMetric::Ece),
            "robust" => Ok(EvalMetric::Robust),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodSet {
    /// Mixture with every mean moved 4σ along one random direction.
    Shifted,
    /// Midpoints of random test pairs.
    Interp,
    /// A fresh draw from the training distribution.
    Same,
}

impl OodSet {
    pub fn name(self) -> &'static str {
        match self {
            OodSet::Shifted => "shifted",
            OodSet::Interp => "interp",
            OodSet::Same => "same",
        }
    }
}

impl FromStr for OodSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shifted" => Ok(OodSet::Shifted),
            "interp" => Ok(OodSet::Interp),
            "same" => Ok(OodSet::Same),
            other => Err(format!("unknown OOD set `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: Vec::new(),
            gamma: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JemConfig {
    pub lambda: f64,
    pub sgld: SgldConfig,
    pub buffer_size: usize,
    pub reinit_prob: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metrics: Vec<EvalMetric>,
    pub ood: Vec<OodSet>,
    pub scores: Vec<OodScoreKind>,
    pub pgd_norms: Vec<PgdNorm>,
    pub eps: Vec<f64>,
    pub pgd_steps: usize,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: vec![EvalMetric::Accuracy],
            ood: vec![OodSet::Interp],
            scores: vec![OodScoreKind::LogPx, OodScoreKind::MaxProb],
            pgd_norms: vec![PgdNorm::LInf, PgdNorm::L2],
            eps: vec![0.0, 0.05, 0.1, 0.2],
            pgd_steps: DEFAULT_PGD_STEPS,
            ece_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train_frac: f64,
    pub hidden: Vec<usize>,
    pub objective: Objective,
    pub hdge: HdgeConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentationSpec,
    pub jem: Option<JemConfig>,
    pub eval: EvalConfig,
    pub seed: u64,
    pub sweep_seeds: usize,
    #[serde(skip)]
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::TwoMoons { n: 2000, noise: 0.1 },
            train_frac: 0.8,
            hidden: vec![64, 64],
            objective: Objective::Hdge,
            hdge: HdgeConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 128,
            epochs: 30,
            augment: AugmentationSpec::default(),
            jem: None,
            eval: EvalConfig::default(),
            seed: 0,
            sweep_seeds: 3,
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// First 16 hex digits of the SHA-256 of the canonical JSON form. The
    /// output directory is not part of the hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.hdge.validate()?;
        self.augment.validate()?;
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config("train_frac must be in (0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(
                "optimizer needs lr > 0, momentum in [0, 1) and weight_decay ≥ 0".into(),
            ));
        }
        if !(o.gamma > 0.0) || o.milestones.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "milestones must be strictly ascending and gamma positive".into(),
            ));
        }
        if let Some(j) = &self.jem {
            j.sgld.validate()?;
            if j.batch == 0 || j.buffer_size == 0 || !(0.0..=1.0).contains(&j.reinit_prob) {
                return Err(Error::Config("invalid sgld buffer settings".into()));
            }
            if self.objective == Objective::Ce {
                return Err(Error::Config("lambda_gen requires objective = hdge".into()));
            }
        }
        let e = &self.eval;
        if e.metrics.contains(&EvalMetric::Auroc) && (e.ood.is_empty() || e.scores.is_empty()) {
            return Err(Error::Config("auroc needs at least one OOD set and score".into()));
        }
        if e.ood.contains(&OodSet::Shifted)
            && e.metrics.contains(&EvalMetric::Auroc)
            && !matches!(self.dataset, DatasetSpec::GaussianMixture { .. })
        {
            return Err(Error::Config(
                "the shifted OOD set needs a gaussian_mixture dataset".into(),
            ));
        }
        if e.metrics.contains(&EvalMetric::Robust) {
            if e.eps.first() != Some(&0.0) || e.eps.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Config("eval.eps must be ascending and start at 0".into()));
            }
            if e.pgd_steps == 0 || e.pgd_norms.is_empty() {
                return Err(Error::Config("robust evaluation needs pgd steps and norms".into()));
            }
        }
        if e.ece_bins == 0 {
            return Err(Error::Config("eval.ece_bins must be at least 1".into()));
        }
        if self.sweep_seeds == 0 {
            return Err(Error::Config("sweep.seeds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Key/value pairs with their line numbers, consumed by typed getters.
struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::ConfigKey {
                key: content.to_string(),
                line,
                msg: "expected `key = value`".into(),
            })?;
            let key = k.trim().to_string();
            if map.contains_key(&key) {
                return Err(Error::ConfigKey {
                    key,
                    line,
                    msg: "duplicate key".into(),
                });
            }
            map.insert(key, (v.trim().to_string(), line));
        }
        Ok(Entries { map })
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|e: T::Err| Error::ConfigKey {
                key: key.into(),
                line,
                msg: format!("cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn take_checked<T: FromStr + Copy>(&mut self, key: &str, default: T, ok: impl Fn(T) -> bool, msg: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let line = self.map.get(key).map(|e| e.1);
        let v = self.take(key, default)?;
        match line {
            Some(line) if !ok(v) => Err(Error::ConfigKey {
                key: key.into(),
                line,
                msg: msg.into(),
            }),
            _ => Ok(v),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some((v, line)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e: T::Err| Error::ConfigKey {
                        key: key.into(),
                        line,
                        msg: format!("cannot parse `{s}`: {e}"),
                    })
                })
                .collect(),
        }
    }

    fn take_required(&mut self, key: &str, context: &str) -> Result<String> {
        self.map
            .remove(key)
            .map(|(v, _)| v)
            .ok_or_else(|| Error::Config(format!("{context} requires `{key}`")))
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::ConfigKey {
                key,
                line,
                msg: "unknown key".into(),
            }),
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn take_dataset(e: &mut Entries) -> Result<DatasetSpec> {
    let kind: String = e.take("dataset", "two_moons".to_string())?;
    Ok(match kind.as_str() {
        "two_moons" => DatasetSpec::TwoMoons {
            n: e.take_checked(
                "dataset.n",
                2000,
                |n: usize| n > 0 && n.is_multiple_of(2),
                "dataset.n must be positive and even",
            )?,
            noise: e.take_checked(
                "dataset.noise",
                0.1,
                |v: f64| v >= 0.0,
                "dataset.noise must be non-negative",
            )?,
        },
        "gaussian_mixture" => DatasetSpec::GaussianMixture {
            n_per_class: e.take_checked("dataset.n", 500, |n: usize| n > 0, "dataset.n must be positive")?,
            std: e.take_checked("dataset.std", 0.3, positive, "dataset.std must be positive")?,
            classes: e.take_checked(
                "dataset.classes",
                2,
                |c: usize| c >= 2,
                "dataset.classes must be at least 2",
            )?,
        },
        "csv" => DatasetSpec::Csv {
            path: e.take_required("dataset.path", "dataset = csv")?.into(),
            label_column: e.take("dataset.label_column", "label".to_string())?,
        },
        "idx" => DatasetSpec::Idx {
            images: e.take_required("dataset.path", "dataset = idx")?.into(),
            labels: e.take_required("dataset.labels_path", "dataset = idx")?.into(),
        },
        other => {
            return Err(Error::Config(format!(
                "unknown dataset `{other}` (expected two_moons, gaussian_mixture, csv or idx)"
            )))
        }
    })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut e = Entries::parse(text)?;
    let d = ExperimentConfig::default();
    let dh = HdgeConfig::default();
    let dopt = OptimizerConfig::default();
    let deval = EvalConfig::default();

    let dataset = take_dataset(&mut e)?;
    let hdge = HdgeConfig {
        alpha: e.take_checked(
            "alpha",
            dh.alpha,
            |a: f64| (0.0..=1.0).contains(&a),
            "alpha must be in [0,1]",
        )?,
        temperature: e.take_checked("tau", dh.temperature, positive, "tau must be positive")?,
        queue_size: e.take_checked("k", dh.queue_size, |k: usize| k >= 1, "k must be at least 1")?,
        normalization: e.take::<Normalization>("normalization", dh.normalization)?,
        include_positive_in_denominator: e.take("include_positive", dh.include_positive_in_denominator)?,
        masked_logsumexp: e.take("masked_logsumexp", dh.masked_logsumexp)?,
    };
    let optimizer = OptimizerConfig {
        lr: e.take_checked("optimizer.lr", dopt.lr, positive, "optimizer.lr must be positive")?,
        momentum: e.take_checked(
            "optimizer.momentum",
            dopt.momentum,
            |m: f64| (0.0..1.0).contains(&m),
            "optimizer.momentum must be in [0, 1)",
        )?,
        weight_decay: e.take_checked(
            "optimizer.weight_decay",
            dopt.weight_decay,
            |w: f64| w >= 0.0,
            "optimizer.weight_decay must be non-negative",
        )?,
        milestones: e.take_list("optimizer.milestones", dopt.milestones)?,
        gamma: e.take_checked(
            "optimizer.gamma",
            dopt.gamma,
            positive,
            "optimizer.gamma must be positive",
        )?,
    };
    let augment = AugmentationSpec {
        gaussian_noise_std: e.take_checked(
            "augment.noise_std",
            0.0,
            |v: f64| v >= 0.0,
            "augment.noise_std must be non-negative",
        )?,
        flip_horizontal: e.take("augment.flip", false)?,
        crop_pad: e.take("augment.crop_pad", 0)?,
    };

    let lambda: f64 = e.take_checked("lambda_gen", 0.0, |v: f64| v >= 0.0, "lambda_gen must be non-negative")?;
    let step_size: f64 = e.take_checked("sgld.step_size", 1.0, positive, "sgld.step_size must be positive")?;
    let sgld = SgldConfig {
        step_size,
        noise_std: e.take_checked(
            "sgld.noise_std",
            step_size.sqrt(),
            positive,
            "sgld.noise_std must be positive",
        )?,
        n_steps: e.take_checked("sgld.steps", 20, |n: usize| n >= 1, "sgld.steps must be at least 1")?,
        init: e.take::<SgldInit>("sgld.init", SgldInit::Buffer)?,
        decay: e.take_checked("sgld.decay", 0.0, |v: f64| v >= 0.0, "sgld.decay must be non-negative")?,
        clamp: None,
    };
    let jem_cfg = JemConfig {
        lambda,
        sgld,
        buffer_size: e.take_checked(
            "sgld.buffer_size",
            1000,
            |n: usize| n >= 1,
            "sgld.buffer_size must be at least 1",
        )?,
        reinit_prob: e.take_checked(
            "sgld.reinit_prob",
            0.05,
            |p: f64| (0.0..=1.0).contains(&p),
            "sgld.reinit_prob must be in [0,1]",
        )?,
        batch: e.take_checked("sgld.batch", 64, |n: usize| n >= 1, "sgld.batch must be at least 1")?,
    };

    let eval = EvalConfig {
        metrics: e.take_list("eval", deval.metrics)?,
        ood: e.take_list("eval.ood", deval.ood)?,
        scores: e.take_list("eval.scores", deval.scores)?,
        pgd_norms: e.take_list("eval.pgd_norms", deval.pgd_norms)?,
        eps: e.take_list("eval.eps", deval.eps)?,
        pgd_steps: e.take("eval.pgd_steps", deval.pgd_steps)?,
        ece_bins: e.take("eval.ece_bins", deval.ece_bins)?,
    };

    let cfg = ExperimentConfig {
        dataset,
        train_frac: e.take_checked(
            "dataset.train_frac",
            d.train_frac,
            |f: f64| f > 0.0 && f < 1.0,
            "dataset.train_frac must be in (0, 1)",
        )?,
        hidden: e.take_list("model.hidden", d.hidden)?,
        objective: e.take("objective", d.objective)?,
        hdge,
        optimizer,
        batch_size: e.take_checked(
            "batch_size",
            d.batch_size,
            |b: usize| b >= 1,
            "batch_size must be at least 1",
        )?,
        epochs: e.take("epochs", d.epochs)?,
        augment,
        jem: (lambda > 0.0).then_some(jem_cfg),
        eval,
        seed: e.take("seed", d.seed)?,
        sweep_seeds: e.take_checked(
            "sweep.seeds",
            d.sweep_seeds,
            |n: usize| n >= 1,
            "sweep.seeds must be at least 1",
        )?,
        out: e.take::<String>("out", "runs".into())?.into(),
    };
    e.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Concatenates two config texts, dropping lines of `base` whose key is
/// assigned again in `overrides`.
pub fn merge_config_text(base: &str, overrides: &str) -> String {
    let key = |l: &str| {
        l.split('#')
            .next()
            .and_then(|c| c.split_once('='))
            .map(|(k, _)| k.trim().to_string())
    };
    let replaced: Vec<String> = overrides.lines().filter_map(key).collect();
    let mut out: String = base
        .lines()
        .filter(|l| key(l).is_none_or(|k| !replaced.contains(&k)))
        .map(|l| format!("{l}\n"))
        .collect();
    out.push_str(overrides);
    out
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Settings for `gen-data`: a dataset, a seed, an output directory and the
/// OOD sets to materialize next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenDataSpec {
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub ood: Vec<OodSet>,
}

pub fn parse_gen_data_str(text: &str) -> Result<GenDataSpec> {
    let mut e = Entries::parse(text)?;
    let spec = GenDataSpec {
        dataset: take_dataset(&mut e)?,
        seed: e.take("seed", 0)?,
        out: e.take::<String>("out", "data".into())?.into(),
        ood: e.take_list("ood", Vec::new())?,
    };
    e.finish()?;
    if spec.ood.contains(&OodSet::Shifted) && !matches!(spec.dataset, DatasetSpec::GaussianMixture { .. }) {
        return Err(Error::Config(
            "the shifted OOD set needs a gaussian_mixture dataset".into(),
        ));
    }
    Ok(spec)
}

pub fn parse_gen_data(path: &Path) -> Result<GenDataSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gen_data_str(&text)
}

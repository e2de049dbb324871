//! Evaluation, sweeps and data generation on top of the training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, EvalMetric, ExperimentConfig, GenDataSpec, OodSet};
use super::train::{load_dataset, mixture_means, prepare_data, run_training, Splits, TrainOutput};
use crate::data::augment::split;
use crate::data::synth::{gen_interpolation_ood, gen_shifted_mixture};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::pgd::{robust_accuracy_curve, PgdConfig};
use crate::eval::report::{write_report, ReportRecord};
use crate::eval::{accuracy, auroc, confidence_and_correct, ece, ood_score};
use crate::model::ModelParams;

/// Mean shift of the OOD mixture, in units of the mixture std.
pub const SHIFT_SIGMAS: f64 = 4.0;

/// Seed offset for the fresh in-distribution draw used by the `same` set.
const SAME_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Builds one OOD dataset sized like `splits.test`.
pub fn build_ood_set(set: OodSet, spec: &DatasetSpec, splits: &Splits, seed: u64) -> Result<Dataset> {
    let n = splits.test.len();
    match set {
        OodSet::Interp => gen_interpolation_ood(&splits.test, n, seed),
        OodSet::Shifted => match spec {
            DatasetSpec::GaussianMixture { std, classes, .. } => {
                let per_class = n.div_ceil(*classes);
                gen_shifted_mixture(per_class, &mixture_means(*classes), *std, SHIFT_SIGMAS, seed)
            }
            _ => Err(Error::Config(
                "the shifted OOD set needs a gaussian_mixture dataset".into(),
            )),
        },
        OodSet::Same => match spec {
            DatasetSpec::TwoMoons { .. } | DatasetSpec::GaussianMixture { .. } => {
                let seed = seed.wrapping_add(SAME_SEED_OFFSET);
                let fresh = load_dataset(spec, seed)?;
                let frac = n as f64 / fresh.len() as f64;
                let mut d = if frac < 1.0 {
                    split(&fresh, 1.0 - frac, seed)?.1
                } else {
                    fresh
                };
                d.name = format!("{}_fresh", d.name);
                Ok(d)
            }
            _ => Ok(splits.test.clone()),
        },
    }
}

/// Computes every metric in `cfg.eval` on the test split.
pub fn run_eval(cfg: &ExperimentConfig, params: &ModelParams, splits: &Splits) -> Result<Vec<ReportRecord>> {
    let hash = cfg.hash();
    let test = &splits.test;
    let labels = test.class_labels()?;
    let mut records = Vec::new();
    let record = |metric: String, value: f64, n: usize, dataset: &str, t: Instant, epsilon| ReportRecord {
        metric,
        value,
        n,
        seed: cfg.seed,
        wall_ms: t.elapsed().as_millis() as u64,
        dataset: dataset.to_string(),
        config_hash: hash.clone(),
        epsilon,
    };

    let mut ood_sets: Vec<(OodSet, Dataset)> = Vec::new();
    if cfg.eval.metrics.contains(&EvalMetric::Auroc) {
        if cfg.eval.ood.is_empty() {
            return Err(Error::Config("auroc requested without any OOD set".into()));
        }
        for &set in &cfg.eval.ood {
            ood_sets.push((set, build_ood_set(set, &cfg.dataset, splits, cfg.seed)?));
        }
    }

    for metric in &cfg.eval.metrics {
        match metric {
            EvalMetric::Accuracy => {
                let t = Instant::now();
                let acc = accuracy(&params.logits(&test.x)?, &labels)?;
                records.push(record("accuracy".into(), acc, test.len(), &test.name, t, None));
            }
            EvalMetric::Auroc => {
                for &kind in &cfg.eval.scores {
                    let s_in = ood_score(params, &test.x, kind)?;
                    for (set, data) in &ood_sets {
                        let t = Instant::now();
                        let s_out = ood_score(params, &data.x, kind)?;
                        let a = auroc(s_in.data(), s_out.data())?;
                        records.push(record(
                            format!("auroc_{}", kind.name()),
                            a,
                            test.len() + data.len(),
                            set.name(),
                            t,
                            None,
                        ));
                    }
                }
            }
            EvalMetric::Ece => {
                let t = Instant::now();
                let (conf, correct) = confidence_and_correct(&params.logits(&test.x)?, &labels)?;
                let e = ece(&conf, &correct, cfg.eval.ece_bins)?;
                records.push(record("ece".into(), e, test.len(), &test.name, t, None));
            }
            EvalMetric::Robust => {
                for &norm in &cfg.eval.pgd_norms {
                    let t = Instant::now();
                    let template = PgdConfig::with_steps(norm, 0.0, cfg.eval.pgd_steps);
                    let curve = robust_accuracy_curve(params, test, norm, &cfg.eval.eps, &template, cfg.seed)?;
                    for (eps, acc) in curve {
                        records.push(record(
                            format!("robust_accuracy_{}", norm.name()),
                            acc,
                            test.len(),
                            &test.name,
                            t,
                            Some(eps),
                        ));
                    }
                }
            }
        }
    }
    Ok(records)
}

/// Trains one model and writes its artifacts under `out`; evaluates when
/// the config asks for metrics.
pub fn run_train_and_eval(cfg: &ExperimentConfig, out: &Path) -> Result<(TrainOutput, Vec<ReportRecord>)> {
    let splits = prepare_data(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    splits.full.write_manifest(&out.join("dataset.manifest.json"))?;
    let trained = run_training(cfg, &splits.train, Some(out))?;
    let records = run_eval(cfg, &trained.checkpoint.params, &splits)?;
    if !records.is_empty() {
        write_report(&out.join("report.jsonl"), &records)?;
    }
    Ok((trained, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Alpha,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "k" => Ok(SweepAxis::K),
            "alpha" => Ok(SweepAxis::Alpha),
            other => Err(format!("expected k or alpha, got `{other}`")),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Alpha => "alpha",
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::K => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("k must be a positive integer, got {value}")));
                }
                c.hdge.queue_size = value as usize;
            }
            SweepAxis::Alpha => c.hdge.alpha = value,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    /// `run`, `mean` or `std`.
    pub kind: String,
    pub seed: Option<u64>,
    pub metric: String,
    pub dataset: String,
    pub epsilon: Option<f64>,
    pub score: f64,
    pub config_hash: String,
}

/// One run per (value, seed) with seeds `cfg.seed .. cfg.seed + sweep_seeds`,
/// followed by mean and sample std rows per (value, metric, dataset, ε).
/// Runs execute on scoped threads, each in its own output directory.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], out: Option<&Path>) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let hash = cfg.hash();
    let mut jobs = Vec::new();
    for &v in values {
        let base = axis.apply(cfg, v)?;
        for s in 0..cfg.sweep_seeds as u64 {
            let mut c = base.clone();
            c.seed = cfg.seed + s;
            let dir = out.map(|o| o.join(format!("{}={v}", axis.name())).join(format!("seed={}", c.seed)));
            jobs.push((v, c, dir));
        }
    }

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut results: Vec<Result<Vec<ReportRecord>>> = Vec::with_capacity(jobs.len());
    for batch in jobs.chunks(threads) {
        let done: Vec<Result<Vec<ReportRecord>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|(_, c, dir)| scope.spawn(move || sweep_job(c, dir.as_deref())))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Config("sweep run panicked".into())))
                })
                .collect()
        });
        results.extend(done);
    }

    let mut rows = Vec::new();
    for ((v, c, _), res) in jobs.iter().zip(results) {
        for r in res? {
            rows.push(SweepRow {
                axis: axis.name().into(),
                value: *v,
                kind: "run".into(),
                seed: Some(c.seed),
                metric: r.metric,
                dataset: r.dataset,
                epsilon: r.epsilon,
                score: r.value,
                config_hash: hash.clone(),
            });
        }
    }
    let summary = summarize(&rows);
    rows.extend(summary);
    if let Some(dir) = out {
        write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    }
    Ok(rows)
}

fn sweep_job(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<ReportRecord>> {
    match dir {
        Some(d) => Ok(run_train_and_eval(cfg, d)?.1),
        None => {
            let splits = prepare_data(cfg)?;
            let trained = run_training(cfg, &splits.train, None)?;
            run_eval(cfg, &trained.checkpoint.params, &splits)
        }
    }
}

fn summarize(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut groups: Vec<(&SweepRow, Vec<f64>)> = Vec::new();
    for r in rows {
        let key = |g: &SweepRow| {
            g.value == r.value && g.metric == r.metric && g.dataset == r.dataset && g.epsilon == r.epsilon
        };
        match groups.iter_mut().find(|(g, _)| key(g)) {
            Some((_, v)) => v.push(r.score),
            None => groups.push((r, vec![r.score])),
        }
    }
    let mut out = Vec::new();
    for (r, scores) in groups {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = if scores.len() > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        for (kind, score) in [("mean", mean), ("std", std)] {
            out.push(SweepRow {
                kind: kind.into(),
                seed: None,
                score,
                ..r.clone()
            });
        }
    }
    out
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = ::csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the dataset (and requested OOD sets) as CSV plus a manifest each.
pub fn run_gen_data(spec: &GenDataSpec) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let full = load_dataset(&spec.dataset, spec.seed)?;
    let mut written = Vec::new();
    let mut emit = |d: &Dataset, stem: &str| -> Result<()> {
        let csv = spec.out.join(format!("{stem}.csv"));
        let manifest = spec.out.join(format!("{stem}.manifest.json"));
        d.write_csv(&csv)?;
        d.write_manifest(&manifest)?;
        written.push(csv);
        written.push(manifest);
        Ok(())
    };
    emit(&full, &full.name)?;
    let splits = Splits {
        train: full.clone(),
        test: full.clone(),
        full: full.clone(),
    };
    for &set in &spec.ood {
        let d = build_ood_set(set, &spec.dataset, &splits, spec.seed)?;
        emit(&d, &format!("{}_ood_{}", full.name, set.name()))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config_str;

    fn mixture_cfg(extra: &str) -> ExperimentConfig {
        parse_config_str(&crate::harness::config::merge_config_text(
            "dataset = gaussian_mixture\ndataset.n = 100\nepochs = 2\nbatch_size = 32\nk = 64\nmodel.hidden = 16\n",
            extra,
        ))
        .unwrap()
    }

    #[test]
    fn empty_eval_list_gives_empty_report() {
        let cfg = mixture_cfg("eval =\n");
        let splits = prepare_data(&cfg).unwrap();
        let p = ModelParams::init(&[2, 16, 2], &mut crate::rng::substream(0, "init")).unwrap();
        assert!(run_eval(&cfg, &p, &splits).unwrap().is_empty());
    }

    #[test]
    fn record_count_matches_request() {
        let cfg = mixture_cfg(
            "eval = accuracy, auroc, ece, robust\neval.ood = shifted, interp, same\neval.scores = log_px, max_prob\neval.eps = 0, 0.1\neval.pgd_steps = 3\n",
        );
        let splits = prepare_data(&cfg).unwrap();
        let p = run_training(&cfg, &splits.train, None).unwrap().checkpoint.params;
        let recs = run_eval(&cfg, &p, &splits).unwrap();
        // 1 accuracy + 2 scores x 3 sets + 1 ece + 2 norms x 2 eps
        assert_eq!(recs.len(), 1 + 6 + 1 + 4);
        assert!(recs.iter().all(|r| r.config_hash == cfg.hash()));
        let acc = recs.iter().find(|r| r.metric == "accuracy").unwrap().value;
        let robust0 = recs
            .iter()
            .find(|r| r.metric == "robust_accuracy_l_inf" && r.epsilon == Some(0.0))
            .unwrap();
        assert_eq!(robust0.value, acc);
    }

    #[test]
    fn same_distribution_auroc_is_near_half() {
        let cfg = parse_config_str(
            "dataset = gaussian_mixture\ndataset.n = 2500\nepochs = 1\nmodel.hidden = 16\nk = 64\neval = auroc\neval.ood = same\neval.scores = log_px\n",
        )
        .unwrap();
        let splits = prepare_data(&cfg).unwrap();
        let p = run_training(&cfg, &splits.train, None).unwrap().checkpoint.params;
        let recs = run_eval(&cfg, &p, &splits).unwrap();
        assert_eq!(recs.len(), 1);
        assert!((recs[0].value - 0.5).abs() < 0.02, "{}", recs[0].value);
    }

    #[test]
    fn sweep_table_shape() {
        let cfg = mixture_cfg("epochs = 1\n");
        let rows = run_sweep(&cfg, SweepAxis::K, &[256.0], None).unwrap();
        let runs: Vec<_> = rows.iter().filter(|r| r.kind == "run").collect();
        assert_eq!(runs.len(), 3);
        assert_eq!(rows.iter().filter(|r| r.kind == "mean").count(), 1);
        assert!(run_sweep(&cfg, SweepAxis::K, &[], None).is_err());
        assert!(run_sweep(&cfg, SweepAxis::K, &[1.5], None).is_err());
        assert!(run_sweep(&cfg, SweepAxis::Alpha, &[2.0], None).is_err());
    }

    #[test]
    fn alpha_sweep_endpoint_matches_cross_entropy() {
        let cfg = mixture_cfg("sweep.seeds = 1\n");
        let rows = run_sweep(&cfg, SweepAxis::Alpha, &[0.0, 0.5, 1.0], None).unwrap();
        let at_one = rows.iter().find(|r| r.kind == "run" && r.value == 1.0).unwrap();
        let mut ce = cfg.clone();
        ce.objective = crate::harness::config::Objective::Ce;
        let splits = prepare_data(&ce).unwrap();
        let p = run_training(&ce, &splits.train, None).unwrap().checkpoint.params;
        let recs = run_eval(&ce, &p, &splits).unwrap();
        assert_eq!(at_one.score.to_bits(), recs[0].value.to_bits());
    }

    #[test]
    fn gen_data_writes_csv_and_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::harness::config::parse_gen_data_str(&format!(
            "dataset = gaussian_mixture\ndataset.n = 20\nood = shifted, interp\nout = {}\n",
            dir.path().display()
        ))
        .unwrap();
        let files = run_gen_data(&spec).unwrap();
        assert_eq!(files.len(), 6);
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files[1]).unwrap()).unwrap();
        assert_eq!(m["N"], 40);
        assert_eq!(m["C"], 2);
    }
}

//! Dataset preparation and the training loop.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, Objective};
use super::optim::Sgd;
use crate::data::augment::{augment, split};
use crate::data::csv::load_csv;
use crate::data::idx::load_idx_images;
use crate::data::synth::{gen_gaussian_mixture, gen_two_moons, two_blob_means};
use crate::data::Dataset;
use crate::ebm::{expand_box, joint_objective, JemSampler, SgldConfig};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::loss::{cross_entropy_loss, hybrid_loss};
use crate::model::{forward, save_checkpoint, Checkpoint, ModelParams};
use crate::queue::LogitQueue;
use crate::rng::substream;
use crate::tensor::Tape;

/// Class means for a `classes`-way mixture.
pub fn mixture_means(classes: usize) -> Vec<Vec<f64>> {
    if classes == 2 {
        return two_blob_means();
    }
    (0..classes)
        .map(|c| {
            let t = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            vec![2.0 * t.cos(), 2.0 * t.sin()]
        })
        .collect()
}

/// Full dataset plus its seeded stratified split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub full: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::TwoMoons { n, noise } => gen_two_moons(*n, *noise, seed),
        DatasetSpec::GaussianMixture {
            n_per_class,
            std,
            classes,
        } => gen_gaussian_mixture(*n_per_class, &mixture_means(*classes), *std, seed),
        DatasetSpec::Csv { path, label_column } => load_csv(path, label_column),
        DatasetSpec::Idx { images, labels } => load_idx_images(images, labels),
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let full = load_dataset(&cfg.dataset, cfg.seed)?;
    let (train, test) = split(&full, cfg.train_frac, cfg.seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("split left an empty train or test set".into()));
    }
    Ok(Splits { full, train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_cl: Option<f64>,
    pub loss_gen: Option<f64>,
    pub train_acc: f64,
    pub lr: f64,
    pub wall_ms: u64,
    pub config_hash: String,
}

/// Sidecar next to each binary checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    pub rng_summary: u64,
    pub dims: Vec<usize>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricsRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint, meta: &CheckpointMeta) -> Result<()> {
    save_checkpoint(&ckpt.params, path)?;
    let side = path.with_extension("json");
    std::fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

pub fn write_metrics(path: &Path, history: &[MetricsRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in history {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on `train`. With `out` set, writes `metrics.jsonl`, a checkpoint at
/// the start of every milestone epoch and `checkpoint_final.hdge`.
pub fn run_training(cfg: &ExperimentConfig, train: &Dataset, out: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = cfg.hash();
    let labels = train.class_labels()?;
    let mut dims = vec![train.dim()];
    dims.extend(&cfg.hidden);
    dims.push(train.class_count);

    let mut params = ModelParams::init(&dims, &mut substream(cfg.seed, "init"))?;
    let mut opt = Sgd::new(cfg.optimizer.clone());
    let mut shuffle_rng = substream(cfg.seed, "shuffle");
    let mut augment_rng = substream(cfg.seed, "augment");
    let mut sgld_rng = substream(cfg.seed, "sgld");

    let mut queue = match cfg.objective {
        Objective::Ce => None,
        Objective::Hdge => {
            let mut q = LogitQueue::new(cfg.hdge.queue_size, train.class_count)?;
            q.warmup_fill(
                train,
                &params,
                cfg.hdge.normalization,
                &mut substream(cfg.seed, "queue"),
            )?;
            Some(q)
        }
    };
    let mut sampler = match &cfg.jem {
        None => None,
        Some(j) => {
            // Image data has a hard [0, 1] domain; chains stay inside it.
            let (init_box, clamp) = if train.image_shape.is_some() {
                (train.bounds.clone(), Some(train.bounds.clone()))
            } else {
                (expand_box(&train.bounds, 1.5), None)
            };
            let sgld = SgldConfig {
                clamp,
                ..j.sgld.clone()
            };
            Some((
                j.lambda,
                JemSampler::new(sgld, j.batch, init_box, j.buffer_size, j.reinit_prob)?,
            ))
        }
    };

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let meta = |step: u64, epoch: usize, rng: &crate::rng::Rng| CheckpointMeta {
        step,
        epoch,
        seed: cfg.seed,
        rng_summary: rng.get_word_pos() as u64,
        dims: dims.clone(),
        config_hash: hash.clone(),
    };

    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.optimizer.milestones.contains(&epoch) {
            if let Some(dir) = out {
                let p = dir.join(format!("checkpoint_epoch{epoch}.hdge"));
                let ck = Checkpoint {
                    params: params.clone(),
                    step,
                    rng_summary: shuffle_rng.get_word_pos() as u64,
                };
                write_checkpoint(&p, &ck, &meta(step, epoch, &shuffle_rng))?;
                checkpoint_paths.push(p);
            }
        }
        let lr = opt.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = augment(
                &train.x.select_rows(chunk),
                &cfg.augment,
                train.image_shape,
                &train.bounds,
                &mut augment_rng,
            );
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let model_x = match sampler.as_mut() {
                Some((_, s)) => Some(s.sample(&params, &xb, &mut sgld_rng)?),
                None => None,
            };

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xv = tape.constant(xb);
            let (total, logits, ce, cl, gen, normalized) = match &queue {
                None => {
                    let logits = forward(&mut tape, &bound, xv)?;
                    let ce = cross_entropy_loss(&mut tape, logits, &yb)?;
                    (ce, logits, ce, None, None, None)
                }
                Some(q) => {
                    let negatives = q.current_negatives()?;
                    match (&model_x, &sampler) {
                        (Some(mx), Some((lambda, _))) => {
                            let j = joint_objective(&mut tape, &bound, xv, &yb, &negatives, &cfg.hdge, mx, *lambda)?;
                            let h = j.hybrid;
                            (
                                j.total,
                                j.logits,
                                h.ce,
                                Some(h.cl),
                                Some(j.generative),
                                Some(h.normalized),
                            )
                        }
                        _ => {
                            let logits = forward(&mut tape, &bound, xv)?;
                            let h = hybrid_loss(&mut tape, logits, &yb, &negatives, &cfg.hdge)?;
                            (h.total, logits, h.ce, Some(h.cl), None, Some(h.normalized))
                        }
                    }
                }
            };
            let scalar = |v| tape.value(v).data()[0];
            let (loss_total, loss_ce) = (scalar(total), scalar(ce));
            let loss_cl = cl.map(scalar);
            let loss_gen = gen.map(scalar);
            if !loss_total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    ce: loss_ce,
                    cl: loss_cl.unwrap_or(f64::NAN),
                    gen: loss_gen,
                });
            }
            let train_acc = accuracy(tape.value(logits), &yb)?;
            let grads = tape.backward(total)?;
            opt.step(&mut params, &bound, &grads, lr);
            if let (Some(q), Some(n)) = (queue.as_mut(), normalized) {
                q.enqueue_batch(tape.value(n), &yb)?;
            }
            history.push(MetricsRecord {
                step,
                epoch,
                loss_total,
                loss_ce,
                loss_cl,
                loss_gen,
                train_acc,
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
                config_hash: hash.clone(),
            });
            step += 1;
        }
    }

    let checkpoint = Checkpoint {
        params,
        step,
        rng_summary: shuffle_rng.get_word_pos() as u64,
    };
    if let Some(dir) = out {
        let p = dir.join("checkpoint_final.hdge");
        write_checkpoint(&p, &checkpoint, &meta(step, cfg.epochs, &shuffle_rng))?;
        checkpoint_paths.push(p);
        write_metrics(&dir.join("metrics.jsonl"), &history)?;
    }
    Ok(TrainOutput {
        checkpoint,
        history,
        checkpoint_paths,
    })
}

//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use hdge::error::Result;
use hdge::loss::{
    cross_entropy_loss, generative_contrastive_loss, hybrid_loss, normalize_rows, HdgeConfig, Normalization,
};
use hdge::tensor::gradcheck::check_gradients;
use hdge::{substream, Rng, Tape, Tensor, Var};
use rand::Rng as _;

pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Keeps values clear of the ReLU kink so central differences are valid.
pub fn away_from_zero(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t
        .into_data()
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Every differentiable op, each wrapped to a scalar, with inputs.
pub fn single_op_cases() -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut rng = substream(11, "gradcheck");
    let mut r = |shape: Vec<usize>| away_from_zero(random_tensor(shape, -1.5, 1.5, &mut rng));
    let a = r(vec![3, 4]);
    let b = r(vec![3, 4]);
    let m = r(vec![4, 5]);
    let bias = r(vec![4]);
    let weights = r(vec![3, 4]);
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap();
    let negs = normalize_rows(&r(vec![6, 4]), Normalization::L2).unwrap();
    let negs2 = negs.clone();
    let negs3 = negs.clone();

    // Weighted sums keep every output entry's gradient distinct.
    fn wsum(t: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
        let wv = t.constant(w.clone());
        let p = t.mul(x, wv)?;
        t.sum(p)
    }
    let w1 = weights.clone();
    let w2 = weights.clone();
    let w3 = weights.clone();
    let w4 = weights.clone();
    let w5 = weights.clone();
    let w6 = weights.clone();
    let w7 = weights.clone();
    let w8 = weights.clone();
    let w9 = weights.clone();
    let w10 = weights.clone();
    let w11 = weights.clone();
    let w12 = weights.clone();
    let w13 = weights.clone();
    let col = Tensor::new(vec![3], vec![0.3, -1.2, 0.8]).unwrap();
    let row = Tensor::new(vec![4], vec![0.5, 1.1, -0.7, 0.2]).unwrap();
    let w43 = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let tall = Tensor::new(vec![6, 4], (0..24).map(|i| (i as f64 * 0.53).cos()).collect()).unwrap();

    vec![
        (
            "matmul",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }) as OpFn,
            vec![a.clone(), m.clone()],
        ),
        (
            "add",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                wsum(t, y, &w1)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "sub",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.sub(v[0], v[1])?;
                wsum(t, y, &w2)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "mul",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.mul(v[0], v[1])?;
                wsum(t, y, &w3)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "scale",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.scale(v[0], -2.5)?;
                wsum(t, y, &w4)
            }),
            vec![a.clone()],
        ),
        (
            "neg",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.neg(v[0])?;
                wsum(t, y, &w5)
            }),
            vec![a.clone()],
        ),
        (
            "add_scalar",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.add_scalar(v[0], 3.0)?;
                let s = t.mul(y, y)?;
                wsum(t, s, &w6)
            }),
            vec![a.clone()],
        ),
        (
            "add_bias",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.add_bias(v[0], v[1])?;
                let s = t.mul(y, y)?;
                wsum(t, s, &w7)
            }),
            vec![a.clone(), bias.clone()],
        ),
        (
            "relu",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.relu(v[0])?;
                wsum(t, y, &w8)
            }),
            vec![a.clone()],
        ),
        (
            "exp",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.exp(v[0])?;
                wsum(t, y, &w9)
            }),
            vec![a.clone()],
        ),
        (
            "log",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.log(v[0])?;
                wsum(t, y, &w10)
            }),
            vec![pos.clone()],
        ),
        (
            "sum",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.mul(v[0], v[0])?;
                t.sum(s)
            }),
            vec![a.clone()],
        ),
        (
            "mean",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.mul(v[0], v[0])?;
                t.mean(s)
            }),
            vec![a.clone()],
        ),
        (
            "sum_axis0",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.sum_axis(v[0], 0)?;
                let w = t.constant(row.clone());
                let p = t.mul(y, w)?;
                let q = t.mul(p, y)?;
                t.sum(q)
            }),
            vec![a.clone()],
        ),
        (
            "sum_axis1",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.sum_axis(v[0], 1)?;
                let w = t.constant(col.clone());
                let p = t.mul(y, w)?;
                let q = t.mul(p, y)?;
                t.sum(q)
            }),
            vec![a.clone()],
        ),
        (
            "log_sum_exp0",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.log_sum_exp(v[0], 0)?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }),
            vec![a.clone()],
        ),
        (
            "log_sum_exp1",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.log_sum_exp(v[0], 1)?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }),
            vec![a.clone()],
        ),
        (
            "softmax",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.softmax(v[0], 1)?;
                wsum(t, y, &w11)
            }),
            vec![a.clone()],
        ),
        (
            "log_softmax",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.log_softmax(v[0], 1)?;
                wsum(t, y, &w12)
            }),
            vec![a.clone()],
        ),
        (
            "l2_normalize",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.l2_normalize(v[0], 1)?;
                wsum(t, y, &w13)
            }),
            vec![a.clone()],
        ),
        (
            "gather",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.gather(v[0], &[2, 0, 3])?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }),
            vec![a.clone()],
        ),
        (
            "reshape",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.reshape(v[0], vec![4, 3])?;
                let w = t.constant(w43.clone());
                let p = t.mul(y, w)?;
                let q = t.mul(p, y)?;
                t.sum(q)
            }),
            vec![a.clone()],
        ),
        (
            "concat0",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.concat(&[v[0], v[1]], 0)?;
                let w = t.constant(tall.clone());
                let p = t.mul(y, w)?;
                let q = t.mul(p, y)?;
                t.sum(q)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "concat1",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                let s = t.exp(y)?;
                t.sum(s)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "cross_entropy",
            Box::new(|t: &mut Tape, v: &[Var]| cross_entropy_loss(t, v[0], &[1, 3, 0])),
            vec![a.clone()],
        ),
        (
            "contrastive_l2",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let n = t.l2_normalize(v[0], 1)?;
                generative_contrastive_loss(t, n, &[1, 3, 0], &negs, &HdgeConfig::default())
            }),
            vec![a.clone()],
        ),
        (
            "hybrid_l2",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                Ok(hybrid_loss(t, v[0], &[2, 2, 1], &negs2, &HdgeConfig::default())?.total)
            }),
            vec![a.clone()],
        ),
        (
            "hybrid_softmax_masked",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let cfg = HdgeConfig {
                    normalization: Normalization::Softmax,
                    masked_logsumexp: true,
                    include_positive_in_denominator: false,
                    alpha: 0.3,
                    ..HdgeConfig::default()
                };
                Ok(hybrid_loss(t, v[0], &[0, 1, 3], &negs3, &cfg)?.total)
            }),
            vec![a.clone()],
        ),
    ]
}

/// A random composite graph over two `[3 x 4]` inputs. Ops are drawn from
/// the full set and chained through a growing pool; `log` only ever sees
/// `1 + x²` so it stays in its domain.
pub fn random_composite(seed: u64) -> (impl Fn(&mut Tape, &[Var]) -> Result<Var>, Vec<Tensor>) {
    let mut rng = substream(seed, "composite");
    let inputs = vec![
        away_from_zero(random_tensor(vec![3, 4], -1.0, 1.0, &mut rng)),
        away_from_zero(random_tensor(vec![3, 4], -1.0, 1.0, &mut rng)),
    ];
    let square = random_tensor(vec![4, 4], -0.6, 0.6, &mut rng);
    let bias = random_tensor(vec![4], -0.5, 0.5, &mut rng);
    let weights = random_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
    let plan: Vec<(u32, usize, usize, f64)> = (0..rng.random_range(4..10))
        .map(|_| {
            (
                rng.random_range(0..14),
                rng.random_range(0..64),
                rng.random_range(0..64),
                rng.random_range(-1.5..1.5),
            )
        })
        .collect();
    let graph = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut pool: Vec<Var> = v.to_vec();
        for &(op, i, j, c) in &plan {
            let a = pool[i % pool.len()];
            let b = pool[j % pool.len()];
            let out = match op {
                0 => t.add(a, b)?,
                1 => t.sub(a, b)?,
                2 => t.mul(a, b)?,
                3 => t.scale(a, c)?,
                4 => {
                    let w = t.constant(square.clone());
                    t.matmul(a, w)?
                }
                5 => {
                    let bv = t.constant(bias.clone());
                    t.add_bias(a, bv)?
                }
                6 => {
                    let s = t.scale(a, 0.5)?;
                    t.exp(s)?
                }
                7 => {
                    let sq = t.mul(a, a)?;
                    let p = t.add_scalar(sq, 1.0)?;
                    t.log(p)?
                }
                8 => t.softmax(a, 1)?,
                9 => t.log_softmax(a, 1)?,
                10 => {
                    let sq = t.mul(a, a)?;
                    let p = t.add_scalar(sq, 0.5)?;
                    t.l2_normalize(p, 1)?
                }
                11 => {
                    let l = t.log_sum_exp(a, 1)?;
                    let r = t.reshape(l, vec![3, 1])?;
                    let z = t.concat(&[r, r, r, r], 1)?;
                    t.add(z, b)?
                }
                12 => t.neg(a)?,
                _ => {
                    let s = t.add_scalar(a, c)?;
                    t.relu(s)?
                }
            };
            pool.push(out);
        }
        let last = *pool.last().expect("non-empty pool");
        let w = t.constant(weights.clone());
        let p = t.mul(last, w)?;
        let q = t.mul(p, last)?;
        let lin = t.mul(last, w)?;
        let s = t.add(q, lin)?;
        t.sum(s)
    };
    (graph, inputs)
}

pub fn gradient_suite() -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, f, inputs) in single_op_cases() {
        let rep = check_gradients(f, &inputs, 1e-6)?;
        assert!(rep.entries > 0, "{name}");
        worst = worst.max(rep.max_rel_err);
        checked += 1;
    }
    for seed in 0..20 {
        let (f, inputs) = random_composite(seed);
        let rep = check_gradients(f, &inputs, 1e-6)?;
        worst = worst.max(rep.max_rel_err);
        checked += 1;
    }
    Ok((worst, checked))
}

/// Drops every `wall_ms` field from a JSON-lines text.
pub fn strip_wall_ms(jsonl: &str) -> Vec<serde_json::Value> {
    jsonl
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_ms");
            }
            v
        })
        .collect()
}

/// Runs `f(seed)` for each seed on its own thread.
pub fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || f(seed))).collect();
        handles.into_iter().map(|h| h.join().expect("seed run")).collect()
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

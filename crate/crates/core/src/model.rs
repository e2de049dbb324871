//! MLP classifier `x ↦ logits` and its binary checkpoint format.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! b"HDGE" | u32 version=1 | u32 layer_count | (u32 in, u32 out) * layer_count
//! | f64 params, per layer: weight row-major [in x out], then bias [out]
//! ```

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDGE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[in x out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Affine layers with ReLU between them and identity at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

/// Parameters registered on a tape for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "model dims need at least input and output, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("model dims must be positive, got {dims:?}")));
    }
    Ok(())
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        validate_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(ModelParams { layers })
    }

    /// All-zero parameters with the given dims.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(ModelParams {
            layers: dims
                .windows(2)
                .map(|w| Layer {
                    weight: Tensor::zeros(vec![w[0], w[1]]),
                    bias: Tensor::zeros(vec![w[1]]),
                })
                .collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.out_dim()] {
                return Err(Error::InvalidShape(format!(
                    "layer {i}: weight {:?}, bias {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape {
                    op: "layer chain",
                    lhs: vec![i, w[0].out_dim()],
                    rhs: vec![i + 1, w[1].in_dim()],
                });
            }
        }
        Ok(ModelParams { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Flattened parameters in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Registers the parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Registers the parameters as constants (no parameter gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        }
    }

    /// Applies `update(param, grad)` to every parameter that got a gradient.
    pub fn apply_gradients(
        &mut self,
        bound: &BoundParams,
        grads: &crate::tensor::Gradients,
        mut update: impl FnMut(usize, &mut [f64], &[f64]),
    ) {
        let mut slot = 0;
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            for (param, var) in [(&mut layer.weight, w), (&mut layer.bias, b)] {
                let g = grads.get_or_zeros(var, param.len());
                update(slot, param.data_mut(), &g);
                slot += 1;
            }
        }
    }

    /// Logits for a `[B x D]` batch without building a persistent graph.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// `[B x D] → [B x C]` logits on `tape`.
pub fn forward(tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
    let d = params
        .vars
        .first()
        .map(|&(w, _)| tape.value(w).shape()[0])
        .ok_or(Error::Empty("forward"))?;
    let xs = tape.value(x).shape();
    if xs.len() != 2 || xs[1] != d {
        return Err(Error::Shape {
            op: "forward",
            lhs: xs.to_vec(),
            rhs: vec![xs.first().copied().unwrap_or(0), d],
        });
    }
    let mut h = x;
    let last = params.vars.len() - 1;
    for (i, &(w, b)) in params.vars.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Parameters plus training bookkeeping. Only the parameters go into the
/// binary file; `step` and `rng_summary` travel in a JSON sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub rng_summary: u64,
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * params.layers.len() + 8 * params.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        buf.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
    }
    for v in params.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointTruncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes. When `expected_dims` is given the stored dims
/// must match exactly.
pub fn decode_checkpoint(buf: &[u8], expected_dims: Option<&[usize]>) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| Error::CheckpointMagic)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((r.u32()? as usize, r.u32()? as usize));
    }
    let mut dims: Vec<usize> = shapes.first().map(|s| vec![s.0]).unwrap_or_default();
    dims.extend(shapes.iter().map(|s| s.1));
    if let Some(want) = expected_dims {
        if want != dims.as_slice() {
            return Err(Error::CheckpointDims {
                found: dims,
                expected: want.to_vec(),
            });
        }
    }
    let mut layers = Vec::with_capacity(count);
    for &(i, o) in &shapes {
        let w = (0..i * o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let b = (0..o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(Layer {
            weight: Tensor::new(vec![i, o], w)?,
            bias: Tensor::new(vec![o], b)?,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::InvalidShape(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }
    ModelParams::from_layers(layers)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected_dims: Option<&[usize]>) -> Result<ModelParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf, expected_dims)
}

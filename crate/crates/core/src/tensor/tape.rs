use std::sync::atomic::{AtomicU64, Ordering};

use super::{axis_split, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    LogSumExp(usize, usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    L2Normalize(usize, usize),
    Gather(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of the forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward sweep is a single reverse pass. Build a fresh tape per step.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss or
    /// is a constant.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros of length `len` for
    /// unreachable variables.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::StaleVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn tracked(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    /// Differentiable input (parameters, inputs under attack).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let tracked = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(ia, ib),
            tracked,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape != tb.shape {
            return Err(Error::Shape {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        let tracked = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(Tensor { shape, data }, op(ia, ib), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        let tracked = self.tracked(ia);
        Ok(self.push(value, op, tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x * c, Op::Scale(ia, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x + c, Op::AddScalar(ia))
    }

    /// `x[.., n] + b[n]`, broadcasting `b` over the leading dimensions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let (tx, tb) = (self.val(ix), self.val(ib));
        let n = tb.len();
        if tb.shape.len() != 1 || tx.shape.last() != Some(&n) {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = tx
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(&tb.data).map(|(a, b)| a + b))
            .collect();
        let shape = tx.shape.clone();
        let tracked = self.tracked(ix) || self.tracked(ib);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(ix, ib), tracked))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(ia))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, f64::exp, Op::Exp(ia))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if let Some(bad) = self.val(ia).data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(a, f64::ln, Op::Log(ia))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).data.iter().sum();
        let tracked = self.tracked(ia);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), tracked))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        let tracked = self.tracked(ia);
        Ok(self.push(Tensor::scalar(m), Op::Mean(ia), tracked))
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let (outer, n, inner) = axis_split(&t.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data[base + i];
                }
            }
        }
        let shape = Self::reduced_shape(&t.shape, axis);
        let tracked = self.tracked(ia);
        Ok(self.push(Tensor { shape, data: out }, Op::SumAxis(ia, axis), tracked))
    }

    /// Max-shifted `log Σ exp` along `axis`; the axis is removed.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let (outer, n, inner) = axis_split(&t.shape, axis)?;
        if n == 0 {
            return Err(Error::Empty("log_sum_exp"));
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| t.data[(o * n + k) * inner + i];
                out[o * inner + i] = lse_lane(n, at);
            }
        }
        let shape = Self::reduced_shape(&t.shape, axis);
        let tracked = self.tracked(ia);
        Ok(self.push(Tensor { shape, data: out }, Op::LogSumExp(ia, axis), tracked))
    }

    fn lane_map(
        &mut self,
        a: Var,
        axis: usize,
        name: &'static str,
        f: impl Fn(&[f64], &mut [f64]) -> Result<()>,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let (outer, n, inner) = axis_split(&t.shape, axis)?;
        if n == 0 {
            return Err(Error::Empty(name));
        }
        let mut out = vec![0.0; t.len()];
        let mut lane = vec![0.0; n];
        let mut res = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    lane[k] = t.data[(o * n + k) * inner + i];
                }
                f(&lane, &mut res)?;
                for k in 0..n {
                    out[(o * n + k) * inner + i] = res[k];
                }
            }
        }
        let shape = t.shape.clone();
        let tracked = self.tracked(ia);
        Ok(self.push(Tensor { shape, data: out }, op(ia, axis), tracked))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.lane_map(
            a,
            axis,
            "softmax",
            |x, y| {
                let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (yk, &xk) in y.iter_mut().zip(x) {
                    *yk = (xk - m).exp();
                    s += *yk;
                }
                for yk in y.iter_mut() {
                    *yk /= s;
                }
                Ok(())
            },
            Op::Softmax,
        )
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.lane_map(
            a,
            axis,
            "log_softmax",
            |x, y| {
                let (m, rest) = shifted_tail(x);
                let l = rest.ln_1p();
                for (yk, &xk) in y.iter_mut().zip(x) {
                    *yk = (xk - m) - l;
                }
                Ok(())
            },
            Op::LogSoftmax,
        )
    }

    /// Rescales every lane along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.lane_map(
            a,
            axis,
            "l2_normalize",
            |x, y| {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 1e-12) {
                    return Err(Error::Degenerate {
                        op: "l2_normalize",
                        detail: format!("vector norm {norm:e} <= 1e-12"),
                    });
                }
                for (yk, &xk) in y.iter_mut().zip(x) {
                    *yk = xk / norm;
                }
                Ok(())
            },
            Op::L2Normalize,
        )
    }

    /// `out[b] = x[b, labels[b]]` for a `[B x C]` input.
    pub fn gather(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        if t.shape.len() != 2 || t.shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        let c = t.shape[1];
        let mut out = Vec::with_capacity(labels.len());
        for (row, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: l as i64,
                    classes: c,
                });
            }
            out.push(t.data[row * c + l]);
        }
        let tracked = self.tracked(ix);
        Ok(self.push(Tensor::vector(out), Op::Gather(ix, labels.to_vec()), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.val(ia).clone().reshaped(shape)?;
        let tracked = self.tracked(ia);
        Ok(self.push(value, Op::Reshape(ia), tracked))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = idx.first().ok_or(Error::Empty("concat"))?;
        let base = self.val(*first).shape.clone();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for &i in &idx {
            let s = &self.val(i).shape;
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let t = self.val(i);
                let n = t.shape[axis];
                data.extend_from_slice(&t.data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = idx.iter().any(|&i| self.tracked(i));
        Ok(self.push(Tensor { shape, data }, Op::Concat(idx, axis), tracked))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let lv = self.val(li);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.tracked(li) {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], i: usize, contrib: Vec<f64>) {
        if !self.tracked(i) {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.tracked(*a) {
                    // g[m x n] . b^T[n x k]
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * tb.data[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.tracked(*b) {
                    // a^T[k x m] . g[m x n]
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let av = ta.data[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut db[c * n..(c + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, zip_map(g, &tb.data, |g, b| g * b));
                self.accumulate(grads, *b, zip_map(g, &ta.data, |g, a| g * a));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.tracked(*b) {
                    let n = self.val(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(a) => {
                let x = &self.val(*a).data;
                self.accumulate(grads, *a, zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, &y.data, |g, y| g * y)),
            Op::Log(a) => {
                let x = &self.val(*a).data;
                self.accumulate(grads, *a, zip_map(g, x, |g, x| g / x));
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let x = self.val(*a);
                let (outer, n, inner) = axis_split(&x.shape, *axis).expect("validated");
                let mut dx = vec![0.0; x.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSumExp(a, axis) => {
                let x = self.val(*a);
                let (outer, n, inner) = axis_split(&x.shape, *axis).expect("validated");
                let mut dx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let (go, yo) = (g[o * inner + i], y.data[o * inner + i]);
                        for k in 0..n {
                            let at = (o * n + k) * inner + i;
                            dx[at] = go * (x.data[at] - yo).exp();
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Softmax(a, axis) => {
                let dx = lane_backward(&y.shape, *axis, g, &y.data, |g, y, dx| {
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for k in 0..g.len() {
                        dx[k] = y[k] * (g[k] - dot);
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a, axis) => {
                let dx = lane_backward(&y.shape, *axis, g, &y.data, |g, y, dx| {
                    let gs: f64 = g.iter().sum();
                    for k in 0..g.len() {
                        dx[k] = g[k] - y[k].exp() * gs;
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::L2Normalize(a, axis) => {
                let x = self.val(*a);
                let (outer, n, inner) = axis_split(&x.shape, *axis).expect("validated");
                let mut dx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let norm = (0..n).map(|k| x.data[at(k)].powi(2)).sum::<f64>().sqrt();
                        let dot: f64 = (0..n).map(|k| y.data[at(k)] * g[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = (g[at(k)] - y.data[at(k)] * dot) / norm;
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Gather(x, labels) => {
                let c = self.val(*x).shape[1];
                let mut dx = vec![0.0; labels.len() * c];
                for (row, &l) in labels.iter().enumerate() {
                    dx[row * c + l] = g[row];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(&y.shape, *axis).expect("validated");
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).shape[*axis];
                    if self.tracked(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[start..start + n * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += n;
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *d += av * bv;
            }
        }
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Max of the lane and `Σ_{k≠argmax} exp(x_k − max)`.
fn shifted_tail(x: &[f64]) -> (f64, f64) {
    let mut arg = 0;
    for (k, &v) in x.iter().enumerate() {
        if v > x[arg] {
            arg = k;
        }
    }
    let m = x[arg];
    let rest = x
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != arg)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    (m, rest)
}

fn lse_lane(n: usize, at: impl Fn(usize) -> f64) -> f64 {
    let lane: Vec<f64> = (0..n).map(at).collect();
    let (m, rest) = shifted_tail(&lane);
    m + rest.ln_1p()
}

/// Shared scaffold for backward rules that act lane-by-lane along `axis`.
fn lane_backward(
    shape: &[usize],
    axis: usize,
    g: &[f64],
    y: &[f64],
    f: impl Fn(&[f64], &[f64], &mut [f64]),
) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis).expect("validated");
    let mut dx = vec![0.0; g.len()];
    let (mut gl, mut yl, mut dl) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..n {
                let at = (o * n + k) * inner + i;
                gl[k] = g[at];
                yl[k] = y[at];
            }
            f(&gl, &yl, &mut dl);
            for k in 0..n {
                dx[(o * n + k) * inner + i] = dl[k];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let v = tape.constant(t2(&[vec![3.0], vec![4.0]]));
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = tape.leaf(t2(&[vec![1.0, 2.0]]));
        let out = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
        let s = tape.sum(out).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        // subgradient at exactly zero is zero
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0]);

        let y = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sc = tape.scale(y, 2.0).unwrap();
        assert_eq!(tape.value(sc).data(), &[2.0, 4.0, 6.0]);

        let bad = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(bad), Err(Error::Domain { .. })));
        let a = tape.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(tape.add(a, y), Err(Error::Shape { .. })));
    }

    #[test]
    fn exp_gradient_matches_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        let e = tape.exp(x).unwrap();
        let s = tape.sum(e).unwrap();
        let g = tape.backward(s).unwrap();
        let g = g.get(x).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-15);
        assert!((g[1] - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_examples() {
        let mut tape = Tape::new();
        let cases: [(Vec<f64>, f64); 3] = [
            (vec![0.0, 0.0], 2f64.ln()),
            (vec![1000.0, 1000.0], 1000.0 + 2f64.ln()),
            (vec![1.0, 2.0, 3.0], 3.407_605_964_444_38),
        ];
        for (x, want) in cases {
            let v = tape.constant(Tensor::vector(x));
            let l = tape.log_sum_exp(v, 0).unwrap();
            assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
        }
        let empty = tape.constant(Tensor::zeros(vec![2, 0]));
        assert!(tape.log_sum_exp(empty, 1).is_err());
        let v = tape.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(tape.log_sum_exp(v, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![7.5; 4]));
        let s = tape.softmax(c, 0).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let c = tape.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = tape.softmax(c, 0).unwrap();
        assert!((tape.value(s).data()[1] - 0.75).abs() < 1e-15);
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.softmax(c, 0).unwrap();
        assert!((tape.value(s).data()[0] - 0.268_941_421_369_995).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(t2(&[vec![3.0, 4.0], vec![1.0, 0.0]]));
        let n = tape.l2_normalize(c, 1).unwrap();
        assert_eq!(tape.value(n).data(), &[0.6, 0.8, 1.0, 0.0]);
        let z = tape.constant(t2(&[vec![0.0, 0.0]]));
        assert!(matches!(tape.l2_normalize(z, 1), Err(Error::Degenerate { .. })));

        let rep = check_gradients(
            |t, v| {
                let n = t.l2_normalize(v[0], 0)?;
                let w = t.constant(Tensor::vector(vec![0.3, -1.7]));
                let p = t.mul(n, w)?;
                t.sum(p)
            },
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn gather_examples() {
        let mut tape = Tape::new();
        let l = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let g = tape.gather(l, &[0, 1]).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 4.0]);
        let g0 = tape.gather(l, &[0, 0]).unwrap();
        assert_eq!(tape.value(g0).data(), &[1.0, 3.0]);
        let s = tape.sum(g).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(l).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
        match tape.gather(l, &[0, 2]) {
            Err(Error::LabelOutOfRange { row, .. }) => assert_eq!(row, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(g.get(unused).is_none());

        let z = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(z).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0; 3]);

        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let other = Tape::new();
        assert!(matches!(other.backward(s), Err(Error::StaleVar)));
    }

    #[test]
    fn concat_and_reshape_route_gradients() {
        let rep = check_gradients(
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let r = t.reshape(c, vec![10])?;
                let e = t.exp(r)?;
                let w = t.constant(Tensor::vector((0..10).map(f64::from).collect()));
                let p = t.mul(e, w)?;
                t.sum(p)
            },
            &[
                Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap(),
                Tensor::new(vec![2, 3], vec![0.5, -0.6, 0.7, 0.0, 0.2, -0.1]).unwrap(),
            ],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    proptest! {
        #[test]
        fn lse_bounds(x in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let mut tape = Tape::new();
            let n = x.len() as f64;
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = tape.constant(Tensor::vector(x));
            let l = tape.log_sum_exp(v, 0).unwrap();
            let l = tape.value(l).data()[0];
            prop_assert!(l >= m);
            prop_assert!(l <= m + n.ln() + 1e-12);
        }

        #[test]
        fn softmax_rows_are_distributions(
            x in proptest::collection::vec(-15.0f64..15.0, 12)
        ) {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(vec![3, 4], x).unwrap());
            let s = tape.softmax(v, 1).unwrap();
            for row in tape.value(s).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}

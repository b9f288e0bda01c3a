//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] replays the tape in reverse, accumulating
//! exact analytic gradients. Tensors are immutable once computed; a graph is
//! built and consumed within a single training or evaluation step.
//!
//! Gradient buffers of interior nodes are dropped as soon as they have been
//! propagated, which keeps the peak footprint close to the forward tape.

pub mod kernels;
mod ops;

use crate::error::{Result, SimsidError};
use crate::par;
use crate::tensor::Tensor;
use kernels::{ConvDims, MemUnitSaved};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    SoftmaxAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    GatherRows { input: Var, rows: Vec<u32> },
    StopGrad,
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    Upsample { x: Var, factor: usize },
    BnTrain { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    TopkSoftmaxSt { x: Var, temp: f64, n: usize, probs: Vec<f64> },
    MemoryRows { x: Var, items: Var, row_block: Vec<u32>, temp: f64, saved: MemUnitSaved },
    MemoryMap { x: Var, items: Var, block_of_loc: Vec<u32>, temp: f64, saved: MemUnitSaved },
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub(crate) fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Insert a tensor as a graph input. `requires_grad` marks it as a
    /// differentiable leaf whose gradient survives the backward pass.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn len_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.0].data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).unwrap())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    pub(crate) fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], requires: &[bool], v: Var, len: usize) -> Option<&'a mut Vec<f64>> {
        if !requires[v.0] {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate additively into
    /// every differentiable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(SimsidError::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape()),
            ));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            let Graph { values, grads, requires, ops } = self;
            let value_i = &values[i];
            match &ops[i] {
                Op::Leaf | Op::StopGrad => {}
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(g) = Self::grad_buf(grads, requires, *v, gy.len()) {
                            for (gv, &u) in g.iter_mut().zip(&gy) {
                                *gv += u;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for (gv, &u) in g.iter_mut().zip(&gy) {
                            *gv += u;
                        }
                    }
                    if let Some(g) = Self::grad_buf(grads, requires, *b, gy.len()) {
                        for (gv, &u) in g.iter_mut().zip(&gy) {
                            *gv -= u;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (values[a.0].data(), values[b.0].data());
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for ((gv, &u), &x) in g.iter_mut().zip(&gy).zip(bv) {
                            *gv += u * x;
                        }
                    }
                    if let Some(g) = Self::grad_buf(grads, requires, *b, gy.len()) {
                        for ((gv, &u), &x) in g.iter_mut().zip(&gy).zip(av) {
                            *gv += u * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for (gv, &u) in g.iter_mut().zip(&gy) {
                            *gv += u * c;
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    let n = values[b.0].len();
                    if let Some(g) = Self::grad_buf(grads, requires, *x, gy.len()) {
                        for (gv, &u) in g.iter_mut().zip(&gy) {
                            *gv += u;
                        }
                    }
                    if let Some(g) = Self::grad_buf(grads, requires, *b, n) {
                        for (row, _) in gy.chunks(n).enumerate() {
                            let chunk = &gy[row * n..(row + 1) * n];
                            for (gv, &u) in g.iter_mut().zip(chunk) {
                                *gv += u;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                    let n = values[b.0].shape()[1];
                    if requires[a.0] {
                        let g = Self::grad_buf(grads, requires, *a, m * k).unwrap();
                        kernels::matmul_abt_acc(g, &gy, values[b.0].data(), m, n, k);
                    }
                    if requires[b.0] {
                        let mut tmp = vec![0.0; k * n];
                        kernels::matmul_atb_into(&mut tmp, values[a.0].data(), &gy, m, k, n);
                        let g = Self::grad_buf(grads, requires, *b, k * n).unwrap();
                        for (gv, &u) in g.iter_mut().zip(&tmp) {
                            *gv += u;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                    // gy has shape [c, r]
                    if let Some(g) = Self::grad_buf(grads, requires, *a, r * c) {
                        for i in 0..c {
                            for j in 0..r {
                                g[j * c + i] += gy[i * r + j];
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let xv = values[a.0].data();
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for ((gv, &u), &x) in g.iter_mut().zip(&gy).zip(xv) {
                            if x > 0.0 {
                                *gv += u;
                            }
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let xv = values[a.0].data();
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for ((gv, &u), &x) in g.iter_mut().zip(&gy).zip(xv) {
                            *gv += if x > 0.0 { u } else { u * slope };
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = value_i.data();
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for ((gv, &u), &y) in g.iter_mut().zip(&gy).zip(yv) {
                            *gv += u * y * (1.0 - y);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let yv = value_i.data();
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for ((gv, &u), &y) in g.iter_mut().zip(&gy).zip(yv) {
                            *gv += u * (1.0 - y * y);
                        }
                    }
                }
                Op::Softplus(a) => {
                    let xv = values[a.0].data();
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for ((gv, &u), &x) in g.iter_mut().zip(&gy).zip(xv) {
                            *gv += u * stable_sigmoid(x);
                        }
                    }
                }
                Op::SoftmaxAxis(a, axis) => {
                    let shape = values[a.0].shape();
                    let l = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let yv = value_i.data();
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let base = o * l * inner + ii;
                                let mut dot = 0.0;
                                for j in 0..l {
                                    let idx = base + j * inner;
                                    dot += yv[idx] * gy[idx];
                                }
                                for j in 0..l {
                                    let idx = base + j * inner;
                                    g[idx] += yv[idx] * (gy[idx] - dot);
                                }
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let n = values[a.0].len();
                    if let Some(g) = Self::grad_buf(grads, requires, *a, n) {
                        for gv in g.iter_mut() {
                            *gv += gy[0];
                        }
                    }
                }
                Op::MeanAll(a) => {
                    let n = values[a.0].len();
                    let u = gy[0] / n as f64;
                    if let Some(g) = Self::grad_buf(grads, requires, *a, n) {
                        for gv in g.iter_mut() {
                            *gv += u;
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(g) = Self::grad_buf(grads, requires, *a, gy.len()) {
                        for (gv, &u) in g.iter_mut().zip(&gy) {
                            *gv += u;
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = value_i.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let total_axis = out_shape[*axis];
                    let mut offset = 0;
                    for inp in inputs {
                        let alen = values[inp.0].shape()[*axis];
                        let n = values[inp.0].len();
                        if let Some(g) = Self::grad_buf(grads, requires, *inp, n) {
                            for o in 0..outer {
                                let src = (o * total_axis + offset) * inner;
                                let dst = o * alen * inner;
                                for (gv, &u) in g[dst..dst + alen * inner].iter_mut().zip(&gy[src..src + alen * inner]) {
                                    *gv += u;
                                }
                            }
                        }
                        offset += alen;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let in_shape = values[input.0].shape();
                    let out_shape = value_i.shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let (alen, slen) = (in_shape[*axis], out_shape[*axis]);
                    let n = values[input.0].len();
                    if let Some(g) = Self::grad_buf(grads, requires, *input, n) {
                        for o in 0..outer {
                            let dst = (o * alen + start) * inner;
                            let src = o * slen * inner;
                            for (gv, &u) in g[dst..dst + slen * inner].iter_mut().zip(&gy[src..src + slen * inner]) {
                                *gv += u;
                            }
                        }
                    }
                }
                Op::GatherRows { input, rows } => {
                    let cols = values[input.0].shape()[1];
                    let n = values[input.0].len();
                    if let Some(g) = Self::grad_buf(grads, requires, *input, n) {
                        for (r, &src_row) in rows.iter().enumerate() {
                            let dst = src_row as usize * cols;
                            for (gv, &u) in g[dst..dst + cols].iter_mut().zip(&gy[r * cols..(r + 1) * cols]) {
                                *gv += u;
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, dims } => {
                    let (dx, dw, db) = kernels::conv2d_backward(values[x.0].data(), values[w.0].data(), dims, &gy);
                    if let Some(g) = Self::grad_buf(grads, requires, *x, dx.len()) {
                        for (gv, &u) in g.iter_mut().zip(&dx) {
                            *gv += u;
                        }
                    }
                    if let Some(g) = Self::grad_buf(grads, requires, *w, dw.len()) {
                        for (gv, &u) in g.iter_mut().zip(&dw) {
                            *gv += u;
                        }
                    }
                    if let Some(g) = Self::grad_buf(grads, requires, *b, db.len()) {
                        for (gv, &u) in g.iter_mut().zip(&db) {
                            *gv += u;
                        }
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    let xs = values[x.0].shape();
                    let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                    let ys = value_i.shape();
                    let dx = kernels::maxpool_backward(&gy, argmax, planes, h, w, ys[2], ys[3]);
                    if let Some(g) = Self::grad_buf(grads, requires, *x, dx.len()) {
                        for (gv, &u) in g.iter_mut().zip(&dx) {
                            *gv += u;
                        }
                    }
                }
                Op::Upsample { x, factor } => {
                    let xs = values[x.0].shape();
                    let dx = kernels::upsample_nearest_backward(&gy, xs[0] * xs[1], xs[2], xs[3], *factor);
                    if let Some(g) = Self::grad_buf(grads, requires, *x, dx.len()) {
                        for (gv, &u) in g.iter_mut().zip(&dx) {
                            *gv += u;
                        }
                    }
                }
                Op::BnTrain { x, gamma, beta, mean, inv_std } => {
                    bn_backward_train(values, grads, requires, i, *x, *gamma, *beta, mean, inv_std, &gy);
                }
                Op::BnEval { x, gamma, beta, mean, inv_std } => {
                    bn_backward_eval(values, grads, requires, *x, *gamma, *beta, mean, inv_std, &gy);
                }
                Op::TopkSoftmaxSt { x, temp, n, probs } => {
                    // straight-through: backward of a softmax over all entries
                    let n = *n;
                    let rows = gy.len() / n;
                    if let Some(g) = Self::grad_buf(grads, requires, *x, gy.len()) {
                        for r in 0..rows {
                            let p = &probs[r * n..(r + 1) * n];
                            let u = &gy[r * n..(r + 1) * n];
                            let dot: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                g[r * n + j] += p[j] * (u[j] - dot) / temp;
                            }
                        }
                    }
                }
                Op::MemoryRows { x, items, row_block, temp, saved } => {
                    mem_rows_backward(values, grads, requires, *x, *items, row_block, *temp, saved, &gy);
                }
                Op::MemoryMap { x, items, block_of_loc, temp, saved } => {
                    mem_map_backward(values, grads, requires, *x, *items, block_of_loc, *temp, saved, &gy);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[allow(clippy::too_many_arguments)]
fn bn_backward_train(
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
    requires: &[bool],
    _node: usize,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[f64],
    inv_std: &[f64],
    gy: &[f64],
) {
    let xs = values[x.0].shape();
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let m = (n * hw) as f64;
    let xv = values[x.0].data();
    let gv = values[gamma.0].data();

    // per-channel reductions
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let mut s = 0.0;
            let mut sx = 0.0;
            for idx in base..base + hw {
                let xhat = (xv[idx] - mu) * is;
                s += gy[idx];
                sx += gy[idx] * xhat;
            }
            sum_dy[ch] += s;
            sum_dy_xhat[ch] += sx;
        }
    }
    if requires[beta.0] {
        let g = grads[beta.0].get_or_insert_with(|| vec![0.0; c]);
        for (gv_, &u) in g.iter_mut().zip(&sum_dy) {
            *gv_ += u;
        }
    }
    if requires[gamma.0] {
        let g = grads[gamma.0].get_or_insert_with(|| vec![0.0; c]);
        for (gv_, &u) in g.iter_mut().zip(&sum_dy_xhat) {
            *gv_ += u;
        }
    }
    if requires[x.0] {
        let g = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let coeff = gv[ch] * is;
                let (mdy, mdyx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                for idx in base..base + hw {
                    let xhat = (xv[idx] - mu) * is;
                    g[idx] += coeff * (gy[idx] - mdy - xhat * mdyx);
                }
            }
        }
    }
}

fn bn_backward_eval(
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
    requires: &[bool],
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[f64],
    inv_std: &[f64],
    gy: &[f64],
) {
    let xs = values[x.0].shape();
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let xv = values[x.0].data();
    let gv = values[gamma.0].data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (mu, is) = (mean[ch], inv_std[ch]);
            if requires[x.0] {
                let g = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
                let coeff = gv[ch] * is;
                for idx in base..base + hw {
                    g[idx] += gy[idx] * coeff;
                }
            }
            if requires[gamma.0] {
                let mut s = 0.0;
                for idx in base..base + hw {
                    s += gy[idx] * (xv[idx] - mu) * is;
                }
                let g = grads[gamma.0].get_or_insert_with(|| vec![0.0; c]);
                g[ch] += s;
            }
            if requires[beta.0] {
                let s: f64 = gy[base..base + hw].iter().sum();
                let g = grads[beta.0].get_or_insert_with(|| vec![0.0; c]);
                g[ch] += s;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn mem_rows_backward(
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
    requires: &[bool],
    x: Var,
    items: Var,
    row_block: &[u32],
    temp: f64,
    saved: &MemUnitSaved,
    gy: &[f64],
) {
    let dim = values[x.0].shape()[1];
    let ishape = values[items.0].shape();
    let (n_items, k) = (ishape[1], saved.active.len() / row_block.len());
    let xv = values[x.0].data();
    let iv = values[items.0].data();
    let rows = row_block.len();

    let mut dx = vec![0.0; xv.len()];
    let mut ditems = vec![0.0; iv.len()];
    for r in 0..rows {
        let b = row_block[r] as usize;
        let block = &iv[b * n_items * dim..(b + 1) * n_items * dim];
        kernels::mem_unit_backward(
            &xv[r * dim..(r + 1) * dim],
            block,
            n_items,
            dim,
            temp,
            &saved.probs[r * n_items..(r + 1) * n_items],
            &saved.active[r * k..(r + 1) * k],
            &gy[r * dim..(r + 1) * dim],
            &mut dx[r * dim..(r + 1) * dim],
            if requires[items.0] {
                Some(&mut ditems[b * n_items * dim..(b + 1) * n_items * dim])
            } else {
                None
            },
            None,
        );
    }
    if requires[x.0] {
        let g = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
        for (gv, &u) in g.iter_mut().zip(&dx) {
            *gv += u;
        }
    }
    if requires[items.0] {
        let g = grads[items.0].get_or_insert_with(|| vec![0.0; iv.len()]);
        for (gv, &u) in g.iter_mut().zip(&ditems) {
            *gv += u;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn mem_map_backward(
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
    requires: &[bool],
    x: Var,
    items: Var,
    block_of_loc: &[u32],
    temp: f64,
    saved: &MemUnitSaved,
    gy: &[f64],
) {
    let xs = values[x.0].shape();
    let (nb, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let ishape = values[items.0].shape();
    let (n_blocks, n_items) = (ishape[0], ishape[1]);
    let units = nb * hw;
    let k = saved.active.len() / units;
    let xv = values[x.0].data();
    let iv = values[items.0].data();

    // channel-last views of the input and upstream gradient
    let zt = nchw_to_nlc(xv, nb, c, hw);
    let gt = nchw_to_nlc(gy, nb, c, hw);

    // pass 1: per-unit dz and the straight-through score gradients
    let mut ds = vec![0.0; units * n_items];
    let mut dzt = vec![0.0; units * c];
    {
        let ds_chunks: Vec<&mut [f64]> = ds.chunks_mut(n_items).collect();
        par::for_each_chunk_mut(&mut dzt, c, |u, dz| {
            let loc = u % hw;
            let b = block_of_loc[loc] as usize;
            let block = &iv[b * n_items * c..(b + 1) * n_items * c];
            let ds_u: &mut [f64] = unsafe {
                let base = ds_chunks[u].as_ptr() as *mut f64;
                std::slice::from_raw_parts_mut(base, n_items)
            };
            kernels::mem_unit_backward(
                &zt[u * c..(u + 1) * c],
                block,
                n_items,
                c,
                temp,
                &saved.probs[u * n_items..(u + 1) * n_items],
                &saved.active[u * k..(u + 1) * k],
                &gt[u * c..(u + 1) * c],
                dz,
                None,
                Some(ds_u),
            );
        });
    }
    if requires[x.0] {
        let g = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
        nlc_acc_into_nchw(&dzt, nb, c, hw, g);
    }

    // pass 2: per-block item gradients, units visited in fixed order
    if requires[items.0] {
        let mut unit_lists: Vec<Vec<u32>> = vec![Vec::new(); n_blocks];
        for u in 0..units {
            unit_lists[block_of_loc[u % hw] as usize].push(u as u32);
        }
        let g = grads[items.0].get_or_insert_with(|| vec![0.0; iv.len()]);
        par::for_each_chunk_mut(g, n_items * c, |b, gb| {
            for &u in &unit_lists[b] {
                let u = u as usize;
                let z = &zt[u * c..(u + 1) * c];
                let dout = &gt[u * c..(u + 1) * c];
                let ds_u = &ds[u * n_items..(u + 1) * n_items];
                for (i, &dsi) in ds_u.iter().enumerate() {
                    let row = &mut gb[i * c..(i + 1) * c];
                    for (gv, &zv) in row.iter_mut().zip(z) {
                        *gv = zv.mul_add(dsi, *gv);
                    }
                }
                let probs = &saved.probs[u * n_items..(u + 1) * n_items];
                let active = &saved.active[u * k..(u + 1) * k];
                let mask_denom: f64 = active.iter().map(|&i| probs[i as usize]).sum();
                for &i in active {
                    let wgt = probs[i as usize] / mask_denom;
                    let row = &mut gb[i as usize * c..(i as usize + 1) * c];
                    for (gv, &d) in row.iter_mut().zip(dout) {
                        *gv = d.mul_add(wgt, *gv);
                    }
                }
            }
        });
    }
}

/// `[n,c,h,w]` → `[n, h*w, c]` so per-location channel vectors are contiguous.
pub(crate) fn nchw_to_nlc(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, hw * c, |b, ob| {
        let xb = &x[b * c * hw..(b + 1) * c * hw];
        for ch in 0..c {
            for l in 0..hw {
                ob[l * c + ch] = xb[ch * hw + l];
            }
        }
    });
    let _ = n;
    out
}

pub(crate) fn nlc_to_nchw(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, c * hw, |b, ob| {
        let xb = &x[b * hw * c..(b + 1) * hw * c];
        for l in 0..hw {
            for ch in 0..c {
                ob[ch * hw + l] = xb[l * c + ch];
            }
        }
    });
    let _ = n;
    out
}

fn nlc_acc_into_nchw(x: &[f64], n: usize, c: usize, hw: usize, acc: &mut [f64]) {
    par::for_each_chunk_mut(acc, c * hw, |b, ob| {
        let xb = &x[b * hw * c..(b + 1) * hw * c];
        for l in 0..hw {
            for ch in 0..c {
                ob[ch * hw + l] += xb[l * c + ch];
            }
        }
    });
    let _ = n;
}

/// Max relative error between the analytic gradient of a scalar-valued
/// composite and central finite differences.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(t.clone(), false);
        let y = f(&mut g, xv)?;
        if g.value(y).len() != 1 {
            return Err(SimsidError::arg("grad_check", "composite must be scalar-valued"));
        }
        Ok(g.scalar_value(y))
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    if g.value(y).len() != 1 {
        return Err(SimsidError::arg("grad_check", "composite must be scalar-valued"));
    }
    g.backward(y)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fd = (eval(&xp)? - eval(&xm)?) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests;

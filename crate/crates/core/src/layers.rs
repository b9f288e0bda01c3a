//! Conv / batch-norm / linear building blocks over the parameter store.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{BoundParams, BufId, BufStore, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm context: training mutates running statistics, evaluation only
/// reads them. Carrying the split borrow here lets one forward body serve
/// both modes.
pub enum BnCtx<'a> {
    Train(&'a mut BufStore),
    Eval(&'a BufStore),
}

impl BnCtx<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            BnCtx::Train(_) => Mode::Train,
            BnCtx::Eval(_) => Mode::Eval,
        }
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w = store.alloc(format!("{name}.w"), Tensor::randn(&[co, ci, k, k], std, rng));
        let b = store.alloc(format!("{name}.b"), Tensor::zeros(&[co]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        g.conv2d(x, bound.var(self.w), bound.var(self.b), self.stride, self.pad)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufId,
    pub running_var: BufId,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, bufs: &mut BufStore, name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: store.alloc(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.alloc(format!("{name}.beta"), Tensor::zeros(&[c])),
            running_mean: bufs.alloc(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: bufs.alloc(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
            channels: c,
        }
    }

    pub fn forward_train(&self, g: &mut Graph, bound: &BoundParams, bufs: &mut BufStore, x: Var) -> Result<Var> {
        let (y, mean, var) = g.batch_norm_train(x, bound.var(self.gamma), bound.var(self.beta), BN_EPS)?;
        let rm = bufs.get_mut(self.running_mean).data_mut();
        for (r, &m) in rm.iter_mut().zip(&mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = bufs.get_mut(self.running_var).data_mut();
        for (r, &v) in rv.iter_mut().zip(&var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        Ok(y)
    }

    pub fn forward_eval(&self, g: &mut Graph, bound: &BoundParams, bufs: &BufStore, x: Var) -> Result<Var> {
        debug_assert_eq!(bufs.get(self.running_mean).len(), self.channels);
        g.batch_norm_eval(
            x,
            bound.var(self.gamma),
            bound.var(self.beta),
            bufs.get(self.running_mean).data(),
            bufs.get(self.running_var).data(),
            BN_EPS,
        )
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, ctx: &mut BnCtx, x: Var) -> Result<Var> {
        match ctx {
            BnCtx::Train(bufs) => self.forward_train(g, bound, bufs, x),
            BnCtx::Eval(bufs) => self.forward_eval(g, bound, bufs, x),
        }
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: store.alloc(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng)),
            b: store.alloc(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        g.linear(x, bound.var(self.w), bound.var(self.b))
    }
}

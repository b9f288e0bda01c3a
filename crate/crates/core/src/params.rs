//! Central registries for trainable parameters and non-trainable buffers.
//!
//! Networks allocate their tensors here at construction and keep only
//! [`ParamId`]/[`BufId`] handles, so checkpointing, optimizer sweeps, and
//! per-side gradient scoping can all work over one flat, name-addressable list.

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SimsidError};
use crate::optim::Parameter;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bind every parameter into the graph as a leaf. `trainable` controls
    /// whether the leaves request gradients (training vs pure evaluation).
    pub fn bind_all(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self.params.iter().map(|p| g.leaf(p.value.clone(), trainable)).collect();
        BoundParams { vars }
    }

    /// Copy gradients accumulated in the graph back onto parameters whose
    /// name satisfies `filter`. Existing parameter gradients accumulate.
    pub fn harvest_grads(
        &mut self,
        g: &Graph,
        bound: &BoundParams,
        filter: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !filter(&p.name) {
                continue;
            }
            let Some(gt) = g.grad_tensor(bound.vars[i]) else { continue };
            match &mut p.grad {
                None => p.grad = Some(gt),
                Some(acc) => {
                    if acc.shape() != gt.shape() {
                        return Err(SimsidError::shape("harvest_grads", p.name.clone()));
                    }
                    for (a, &v) in acc.data_mut().iter_mut().zip(gt.data()) {
                        *a += v;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Bit-level digest of all parameter values (FNV-1a over raw bits).
    /// Used to prove that evaluation never mutates the model.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for &v in p.value.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Non-trainable named tensors (batch-norm running statistics).
#[derive(Default)]
pub struct BufStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl BufStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor) -> BufId {
        self.names.push(name.into());
        self.values.push(value);
        BufId(self.values.len() - 1)
    }

    pub fn get(&self, id: BufId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: BufId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.values {
            for &v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

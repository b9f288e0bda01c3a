//! Space-aware memory: per-location blocks of learnable normal-pattern items.
//!
//! Each patch (or feature-map) location owns one block; a query feature only
//! ever searches its own block, so lookup cost is independent of the grid
//! size. The forward pass mixes the top-k most similar items through a
//! masked softmax; the backward pass distributes gradient to every item of
//! the queried block (straight-through).

use crate::autodiff::kernels;
use crate::error::{Result, SimsidError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Learnable memory with one `items_per_block x item_dim` block per location
/// on a `(rows, cols)` grid. The blocks live in the [`ParamStore`] as a single
/// `[rows*cols, items_per_block, item_dim]` parameter.
pub struct SpaceAwareMemory {
    pub grid: (usize, usize),
    pub items_per_block: usize,
    pub item_dim: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub items: ParamId,
}

/// Everything a single lookup produces.
#[derive(Debug, Clone)]
pub struct LookupResult {
    /// Mixture of the active items: `sum_k weights[k] * item[k]`.
    pub augmented: Tensor,
    /// Raw dot-product similarity of the query against every item.
    pub similarities: Vec<f64>,
    /// Post-shrinkage mixing weights; nonzero exactly on the active set.
    pub weights: Vec<f64>,
    /// Indices of the top-k items, ascending.
    pub active_set: Vec<usize>,
}

impl SpaceAwareMemory {
    /// Allocate a memory with Gaussian items of standard deviation
    /// `1/sqrt(item_dim)`, deterministic per seed.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        grid: (usize, usize),
        items_per_block: usize,
        item_dim: usize,
        top_k: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if grid.0 == 0 || grid.1 == 0 || items_per_block == 0 || item_dim == 0 {
            return Err(SimsidError::arg(
                "memory_init",
                format!("counts must be positive: grid {grid:?}, items {items_per_block}, dim {item_dim}"),
            ));
        }
        if top_k == 0 || top_k > items_per_block {
            return Err(SimsidError::arg(
                "memory_init",
                format!("top_k {top_k} outside 1..={items_per_block}"),
            ));
        }
        if temperature <= 0.0 {
            return Err(SimsidError::arg("memory_init", "temperature must be positive"));
        }
        let std = 1.0 / (item_dim as f64).sqrt();
        let blocks = grid.0 * grid.1;
        let items = store.alloc(
            format!("{name}.items"),
            Tensor::randn(&[blocks, items_per_block, item_dim], std, rng),
        );
        Ok(SpaceAwareMemory { grid, items_per_block, item_dim, top_k, temperature, items })
    }

    pub fn block_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn block_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.grid.0 || col >= self.grid.1 {
            return Err(SimsidError::arg(
                "memory",
                format!("location ({row},{col}) outside grid {:?}", self.grid),
            ));
        }
        Ok(row * self.grid.1 + col)
    }

    /// Borrow one block as an `[items_per_block, item_dim]` tensor.
    pub fn block<'a>(&self, store: &'a ParamStore, row: usize, col: usize) -> Result<Tensor> {
        let b = self.block_index(row, col)?;
        let data = store.get(self.items).value.data();
        let len = self.items_per_block * self.item_dim;
        let _ = &data;
        Tensor::new(vec![self.items_per_block, self.item_dim], data[b * len..(b + 1) * len].to_vec())
    }

    /// Query the block owned by `(row, col)`. Training passes Gumbel noise;
    /// evaluation passes `None` and is fully deterministic.
    pub fn lookup_at(
        &self,
        store: &ParamStore,
        row: usize,
        col: usize,
        z: &Tensor,
        noise: Option<&[f64]>,
    ) -> Result<LookupResult> {
        let block = self.block(store, row, col)?;
        memory_lookup(z, &block, self.top_k, self.temperature, noise)
    }
}

/// Gumbel samples `-ln(-ln(u))` for the training-mode lookup.
pub fn sample_gumbel(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = loop {
                let u = rng.random::<f64>();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect()
}

/// Forward weights of the shrinkage schema: softmax over the top-k entries of
/// `(scores + noise) / temperature`, exactly zero elsewhere. The differentiable
/// graph version with the straight-through backward is
/// [`crate::autodiff::Graph::topk_softmax_st`].
pub fn gumbel_shrinkage(scores: &[f64], k: usize, temperature: f64, noise: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(SimsidError::arg("gumbel_shrinkage", format!("k={k} outside 1..={n}")));
    }
    if temperature <= 0.0 {
        return Err(SimsidError::arg("gumbel_shrinkage", "temperature must be positive"));
    }
    if let Some(nz) = noise {
        if nz.len() != n {
            return Err(SimsidError::shape("gumbel_shrinkage", format!("noise len {} vs {n}", nz.len())));
        }
    }
    let logits: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (s + noise.map_or(0.0, |nz| nz[i])) / temperature)
        .collect();
    let mut probs = vec![0.0; n];
    let mut active = vec![0u32; k];
    let mask_denom = kernels::shrinkage_select(&logits, k, &mut probs, &mut active);
    let mut weights = vec![0.0; n];
    for &i in &active {
        weights[i as usize] = probs[i as usize] / mask_denom;
    }
    Ok(weights)
}

/// One space-aware lookup against a caller-selected block.
pub fn memory_lookup(
    z: &Tensor,
    block: &Tensor,
    k: usize,
    temperature: f64,
    noise: Option<&[f64]>,
) -> Result<LookupResult> {
    let bs = block.shape();
    if bs.len() != 2 || z.shape() != [bs[1]] {
        return Err(SimsidError::shape(
            "memory_lookup",
            format!("query {:?} against block {:?}", z.shape(), bs),
        ));
    }
    let (n_items, dim) = (bs[0], bs[1]);
    if k == 0 || k > n_items {
        return Err(SimsidError::arg("memory_lookup", format!("k={k} outside 1..={n_items}")));
    }
    let similarities: Vec<f64> = (0..n_items)
        .map(|i| {
            block.data()[i * dim..(i + 1) * dim]
                .iter()
                .zip(z.data())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let weights = gumbel_shrinkage(&similarities, k, temperature, noise)?;
    let mut augmented = vec![0.0; dim];
    let mut active_set = Vec::with_capacity(k);
    for (i, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            active_set.push(i);
            for (o, &m) in augmented.iter_mut().zip(&block.data()[i * dim..(i + 1) * dim]) {
                *o += w * m;
            }
        }
    }
    Ok(LookupResult {
        augmented: Tensor::new(vec![dim], augmented)?,
        similarities,
        weights,
        active_set,
    })
}

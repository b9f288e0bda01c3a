//! Feature in-painting: refine each patch feature from the memory-augmented
//! features of its spatial neighbors.
//!
//! Pipeline per batch: a point-wise convolution reduces channels, every patch
//! token queries its own memory block, and a single-head attention layer lets
//! the raw center token attend over its neighbors' augmented tokens (the
//! center's own augmented token is never a key/value). A feed-forward sublayer
//! and a second point-wise convolution close the block; the whole block sits
//! behind a residual from its input.

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SimsidError};
use crate::layers::{Conv2d, Mode};
use crate::memory::{sample_gumbel, SpaceAwareMemory};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Valid 8-neighborhood of `(row, col)` on a `(rows, cols)` grid, in
/// row-major order: 8 coordinates in the interior, 5 on edges, 3 in corners.
pub fn neighbor_index(row: usize, col: usize, extent: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = extent;
    if row >= rows || col >= cols {
        return Err(SimsidError::arg(
            "neighbor_index",
            format!("center ({row},{col}) outside grid {extent:?}"),
        ));
    }
    let mut out = Vec::with_capacity(8);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (r, c) = (row as i64 + dr, col as i64 + dc);
            if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
                out.push((r as usize, c as usize));
            }
        }
    }
    Ok(out)
}

struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

pub struct InpaintBlock {
    pub extent: (usize, usize),
    pub token_dim: usize,
    reduced_channels: usize,
    patch_h: usize,
    patch_w: usize,
    reduce: Conv2d,
    restore: Conv2d,
    attn: Option<Attention>,
    pub memory: Option<SpaceAwareMemory>,
}

/// Channel reduction of the point-wise convolutions.
pub const CHANNEL_REDUCTION: usize = 4;

impl InpaintBlock {
    /// Build the block for patch features of shape `[channels, ph, pw]` on a
    /// `(rows, cols)` patch grid. A 1x1 grid has no neighborhoods anywhere, so
    /// the block degenerates to the convolution pair plus residual and skips
    /// allocating attention and memory.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        extent: (usize, usize),
        channels: usize,
        patch_h: usize,
        patch_w: usize,
        items_per_block: usize,
        top_k: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels % CHANNEL_REDUCTION != 0 {
            return Err(SimsidError::arg(
                "inpaint",
                format!("channels {channels} not divisible by reduction {CHANNEL_REDUCTION}"),
            ));
        }
        let rc = channels / CHANNEL_REDUCTION;
        let d = rc * patch_h * patch_w;
        let reduce = Conv2d::new(store, &format!("{name}.reduce"), channels, rc, 1, 1, 0, rng);
        let restore = Conv2d::new(store, &format!("{name}.restore"), rc, channels, 1, 1, 0, rng);
        let degenerate = extent == (1, 1);
        let attn = if degenerate {
            None
        } else {
            let std = 1.0 / (d as f64).sqrt();
            let proj = |store: &mut ParamStore, nm: &str, rng: &mut ChaCha8Rng| {
                store.alloc(format!("{name}.attn.{nm}"), Tensor::randn(&[d, d], std, rng))
            };
            Some(Attention {
                wq: proj(store, "wq", rng),
                wk: proj(store, "wk", rng),
                wv: proj(store, "wv", rng),
                wo: proj(store, "wo", rng),
                ff_w1: store.alloc(format!("{name}.ff.w1"), Tensor::randn(&[d, d], (2.0 / d as f64).sqrt(), rng)),
                ff_b1: store.alloc(format!("{name}.ff.b1"), Tensor::zeros(&[d])),
                ff_w2: store.alloc(format!("{name}.ff.w2"), Tensor::randn(&[d, d], std, rng)),
                ff_b2: store.alloc(format!("{name}.ff.b2"), Tensor::zeros(&[d])),
            })
        };
        let memory = if degenerate {
            None
        } else {
            Some(SpaceAwareMemory::init(
                store,
                &format!("{name}.mem"),
                extent,
                items_per_block,
                d,
                top_k,
                temperature,
                rng,
            )?)
        };
        Ok(InpaintBlock {
            extent,
            token_dim: d,
            reduced_channels: rc,
            patch_h,
            patch_w,
            reduce,
            restore,
            attn,
            memory,
        })
    }

    /// In-paint a grid of patch features `x: [batch * rows * cols, c, ph, pw]`
    /// (patch-major within each sample, row-major patches).
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        batch: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let p = self.extent.0 * self.extent.1;
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[0] != batch * p || xs[2] != self.patch_h || xs[3] != self.patch_w {
            return Err(SimsidError::shape(
                "inpaint",
                format!("grid {:?} against extent {:?} batch {batch}", xs, self.extent),
            ));
        }
        let nb = xs[0];
        let red = self.reduce.forward(g, bound, x)?;
        let tokens = g.reshape(red, &[nb, self.token_dim])?;

        let refined = match (&self.attn, &self.memory) {
            (Some(_), Some(mem)) => {
                let row_block: Vec<u32> = (0..nb).map(|r| (r % p) as u32).collect();
                let noise = match mode {
                    Mode::Train => Some(Tensor::new(
                        vec![nb, mem.items_per_block],
                        sample_gumbel(nb * mem.items_per_block, rng),
                    )?),
                    Mode::Eval => None,
                };
                let zhat = g.memory_rows(
                    tokens,
                    bound.var(mem.items),
                    &row_block,
                    mem.top_k,
                    mem.temperature,
                    noise.as_ref(),
                )?;
                self.token_refine(g, bound, tokens, zhat, batch)?
            }
            // degenerate 1x1 grid: nothing to attend over
            _ => tokens,
        };

        let red_out = g.reshape(refined, &[nb, self.reduced_channels, self.patch_h, self.patch_w])?;
        let restored = self.restore.forward(g, bound, red_out)?;
        g.add(x, restored)
    }

    /// Token-level refinement: each center attends from its raw token to its
    /// neighbors' augmented tokens, with residuals around the attention and
    /// feed-forward sublayers.
    pub(crate) fn token_refine(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        tokens: Var,
        zhat: Var,
        batch: usize,
    ) -> Result<Var> {
        let attn = self.attn.as_ref().expect("token_refine requires attention");
        let p = self.extent.0 * self.extent.1;
        let q_all = g.matmul(tokens, bound.var(attn.wq))?;
        let k_all = g.matmul(zhat, bound.var(attn.wk))?;
        let v_all = g.matmul(zhat, bound.var(attn.wv))?;
        let scale = 1.0 / (self.token_dim as f64).sqrt();

        let mut contexts = Vec::with_capacity(batch * p);
        for b in 0..batch {
            for center in 0..p {
                let (row, col) = (center / self.extent.1, center % self.extent.1);
                let neighbors: Vec<((usize, usize), u32)> = neighbor_index(row, col, self.extent)?
                    .into_iter()
                    .map(|(r, c)| ((r, c), (b * p + r * self.extent.1 + c) as u32))
                    .collect();
                let q = g.slice(q_all, 0, b * p + center, 1)?;
                contexts.push(attend(g, q, k_all, v_all, &neighbors, scale)?);
            }
        }
        let ctx_all = g.concat(&contexts, 0)?;
        let proj = g.matmul(ctx_all, bound.var(attn.wo))?;
        let h = g.add(tokens, proj)?;
        let ff1 = g.linear(h, bound.var(attn.ff_w1), bound.var(attn.ff_b1))?;
        let ff1 = g.relu(ff1);
        let ff2 = g.linear(ff1, bound.var(attn.ff_w2), bound.var(attn.ff_b2))?;
        g.add(h, ff2)
    }
}

/// Single-head scaled dot-product attention of one query over a neighbor set.
///
/// Neighbors are canonicalized to row-major coordinate order before any
/// arithmetic, so the output is bit-identical under any permutation of the
/// input list (the attention treats key/value pairs as a set).
pub(crate) fn attend(
    g: &mut Graph,
    q: Var,
    k_all: Var,
    v_all: Var,
    neighbors: &[((usize, usize), u32)],
    scale: f64,
) -> Result<Var> {
    let mut sorted = neighbors.to_vec();
    sorted.sort_by_key(|&(coord, _)| coord);
    let rows: Vec<u32> = sorted.iter().map(|&(_, r)| r).collect();
    let kn = g.gather_rows(k_all, &rows)?;
    let vn = g.gather_rows(v_all, &rows)?;
    let kt = g.transpose(kn)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, scale);
    let att = g.softmax_axis(scaled, 1)?;
    g.matmul(att, vn)
}

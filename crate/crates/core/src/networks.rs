//! The four networks: patch encoder, teacher and student decoders, and the
//! full-resolution discriminator, plus patchify/unpatchify plumbing.
//!
//! The two decoders are built identically; the student additionally runs
//! the in-painting block on the bottleneck features and filters its two
//! coarsest upsampling levels through space-aware memories. The teacher
//! consumes encoder features through stop-gradient, so no loss on the
//! teacher output can move the encoder.

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SimsidError};
use crate::inpaint::InpaintBlock;
use crate::layers::{BatchNorm2d, BnCtx, Conv2d, Linear, Mode};
use crate::memory::{sample_gumbel, SpaceAwareMemory};
use crate::params::{BoundParams, BufStore, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Down/upsampling stages in the encoder and decoders.
pub const LEVELS: usize = 3;
/// Generator memories cover at most this many grid cells per side; coarser
/// feature maps keep one block per location, finer ones share blocks over
/// equal tiles.
pub const GEN_MEM_MAX_GRID: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    /// Patch grid as (rows, cols).
    pub grid: (usize, usize),
    pub base_width: usize,
    pub disc_width: usize,
    pub items_per_block: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 128,
            grid: (4, 4),
            base_width: 32,
            disc_width: 16,
            items_per_block: 100,
            top_k: 5,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn patch_hw(&self) -> (usize, usize) {
        (self.image_side / self.grid.0, self.image_side / self.grid.1)
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.grid;
        if rows == 0 || cols == 0 || self.image_side % rows != 0 || self.image_side % cols != 0 {
            return Err(SimsidError::arg(
                "model config",
                format!("image side {} not divisible by grid {:?}", self.image_side, self.grid),
            ));
        }
        let (ph, pw) = self.patch_hw();
        let down = 1 << LEVELS;
        if ph % down != 0 || pw % down != 0 {
            return Err(SimsidError::arg(
                "model config",
                format!("patch {ph}x{pw} not divisible by the {down}x downsampling"),
            ));
        }
        if self.image_side % 16 != 0 {
            return Err(SimsidError::arg("model config", "discriminator needs image side divisible by 16"));
        }
        if self.base_width % 4 != 0 {
            return Err(SimsidError::arg("model config", "base width must be divisible by 4"));
        }
        if self.top_k == 0 || self.top_k > self.items_per_block {
            return Err(SimsidError::arg(
                "model config",
                format!("top_k {} outside 1..={}", self.top_k, self.items_per_block),
            ));
        }
        Ok(())
    }
}

// ── Patch plumbing ──────────────────────────────────────────────────

/// Split `[b,1,h,w]` into `[b*rows*cols, 1, h/rows, w/cols]` tiles, row-major
/// patches within each sample.
pub fn patchify(images: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(SimsidError::shape("patchify", format!("{s:?} is not [b,1,h,w]")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(SimsidError::arg(
            "patchify",
            format!("image {h}x{w} not divisible by grid {grid:?}"),
        ));
    }
    let (ph, pw) = (h / rows, w / cols);
    let mut out = vec![0.0; images.len()];
    let src = images.data();
    for bi in 0..b {
        for r in 0..rows {
            for c in 0..cols {
                let tile = ((bi * rows + r) * cols + c) * ph * pw;
                for y in 0..ph {
                    let s0 = bi * h * w + (r * ph + y) * w + c * pw;
                    out[tile + y * pw..tile + (y + 1) * pw].copy_from_slice(&src[s0..s0 + pw]);
                }
            }
        }
    }
    Tensor::new(vec![b * rows * cols, 1, ph, pw], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid: (usize, usize), batch: usize) -> Result<Tensor> {
    let s = patches.shape();
    let (rows, cols) = grid;
    if s.len() != 4 || s[1] != 1 || s[0] != batch * rows * cols {
        return Err(SimsidError::shape(
            "unpatchify",
            format!("{s:?} against grid {grid:?} batch {batch}"),
        ));
    }
    let (ph, pw) = (s[2], s[3]);
    let (h, w) = (rows * ph, cols * pw);
    let mut out = vec![0.0; patches.len()];
    let src = patches.data();
    for bi in 0..batch {
        for r in 0..rows {
            for c in 0..cols {
                let tile = ((bi * rows + r) * cols + c) * ph * pw;
                for y in 0..ph {
                    let d0 = bi * h * w + (r * ph + y) * w + c * pw;
                    out[d0..d0 + pw].copy_from_slice(&src[tile + y * pw..tile + (y + 1) * pw]);
                }
            }
        }
    }
    Tensor::new(vec![batch, 1, h, w], out)
}

/// In-graph unpatchify so reconstructed tiles can feed the discriminator.
pub fn unpatchify_var(g: &mut Graph, patches: Var, grid: (usize, usize), batch: usize) -> Result<Var> {
    let (rows, cols) = grid;
    let mut samples = Vec::with_capacity(batch);
    for bi in 0..batch {
        let mut row_vars = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut tiles = Vec::with_capacity(cols);
            for c in 0..cols {
                tiles.push(g.slice(patches, 0, (bi * rows + r) * cols + c, 1)?);
            }
            row_vars.push(g.concat(&tiles, 3)?);
        }
        samples.push(g.concat(&row_vars, 2)?);
    }
    g.concat(&samples, 0)
}

// ── Encoder ─────────────────────────────────────────────────────────

pub struct Encoder {
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
}

pub struct Encoded {
    /// `[nb, 4w, ph/8, pw/8]`
    pub bottleneck: Var,
    /// Stage-1 output `[nb, w, ph/2, pw/2]`, consumed by decoder level 2.
    pub skip1: Var,
    /// Stage-2 output `[nb, 2w, ph/4, pw/4]`, consumed by decoder level 1.
    pub skip2: Var,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, bufs: &mut BufStore, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let chans = [(1, width), (width, 2 * width), (2 * width, 4 * width)];
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for (i, (ci, co)) in chans.into_iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("enc.conv{}", i + 1), ci, co, 3, 1, 1, rng));
            bns.push(BatchNorm2d::new(store, bufs, &format!("enc.bn{}", i + 1), co));
        }
        Encoder { convs, bns }
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, ctx: &mut BnCtx, tiles: Var) -> Result<Encoded> {
        let mut x = tiles;
        let mut stage_out = Vec::with_capacity(LEVELS);
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let y = conv.forward(g, bound, x)?;
            let y = bn.forward(g, bound, ctx, y)?;
            let y = g.relu(y);
            x = g.maxpool2d(y, 2, 2)?;
            stage_out.push(x);
        }
        Ok(Encoded { bottleneck: stage_out[2], skip1: stage_out[0], skip2: stage_out[1] })
    }
}

// ── Decoder (shared by teacher and student) ─────────────────────────

pub struct Decoder {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    head: Conv2d,
}

/// Space-aware memories filtering the student's two coarsest upsampling
/// levels (applied after the skip concatenation, before the convolution).
pub struct GeneratorMems<'a> {
    pub level1: &'a SpaceAwareMemory,
    pub level2: &'a SpaceAwareMemory,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, bufs: &mut BufStore, prefix: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = width;
        Decoder {
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), 6 * w, 2 * w, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(store, bufs, &format!("{prefix}.bn1"), 2 * w),
            conv2: Conv2d::new(store, &format!("{prefix}.conv2"), 3 * w, w, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(store, bufs, &format!("{prefix}.bn2"), w),
            conv3: Conv2d::new(store, &format!("{prefix}.conv3"), w, w, 3, 1, 1, rng),
            bn3: BatchNorm2d::new(store, bufs, &format!("{prefix}.bn3"), w),
            head: Conv2d::new(store, &format!("{prefix}.head"), w, 1, 3, 1, 1, rng),
        }
    }

    /// Decode patch features back to image tiles in `[-1, 1]`.
    ///
    /// Exactly `LEVELS - 1` skip connections are wired (levels 1 and 2); the
    /// outermost level deliberately receives none. Returns the tiles plus the
    /// per-level features used for distillation.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        ctx: &mut BnCtx,
        feat: Var,
        skip1: Var,
        skip2: Var,
        mems: Option<&GeneratorMems>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let filter = |g: &mut Graph, x: Var, mem: &SpaceAwareMemory, rng: &mut ChaCha8Rng, train: bool| -> Result<Var> {
            let s = g.value(x).shape().to_vec();
            let units = s[0] * s[2] * s[3];
            let noise = if train {
                Some(Tensor::new(
                    vec![units, mem.items_per_block],
                    sample_gumbel(units * mem.items_per_block, rng),
                )?)
            } else {
                None
            };
            g.memory_map(x, bound.var(mem.items), mem.grid, mem.top_k, mem.temperature, noise.as_ref())
        };
        let train = ctx.mode() == Mode::Train;

        // level 1: upsample, concat the deeper skip, filter, convolve
        let up = g.upsample_nearest(feat, 2)?;
        let mut x = g.concat(&[up, skip2], 1)?;
        if let Some(m) = mems {
            x = filter(g, x, m.level1, rng, train)?;
        }
        let x = self.conv1.forward(g, bound, x)?;
        let x = self.bn1.forward(g, bound, ctx, x)?;
        let z1 = g.relu(x);

        // level 2
        let up = g.upsample_nearest(z1, 2)?;
        let mut x = g.concat(&[up, skip1], 1)?;
        if let Some(m) = mems {
            x = filter(g, x, m.level2, rng, train)?;
        }
        let x = self.conv2.forward(g, bound, x)?;
        let x = self.bn2.forward(g, bound, ctx, x)?;
        let z2 = g.relu(x);

        // level 3: outermost, no skip connection
        let up = g.upsample_nearest(z2, 2)?;
        let x = self.conv3.forward(g, bound, up)?;
        let x = self.bn3.forward(g, bound, ctx, x)?;
        let z3 = g.relu(x);

        let x = self.head.forward(g, bound, z3)?;
        let tiles = g.tanh(x);
        Ok((tiles, vec![z1, z2, z3]))
    }
}

// ── Discriminator ───────────────────────────────────────────────────

pub struct Discriminator {
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
    fc: Linear,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new(store: &mut ParamStore, bufs: &mut BufStore, width: usize, image_side: usize, rng: &mut ChaCha8Rng) -> Self {
        let chans = [(1, width), (width, 2 * width), (2 * width, 4 * width), (4 * width, 8 * width)];
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for (i, (ci, co)) in chans.into_iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("disc.conv{}", i + 1), ci, co, 3, 2, 1, rng));
            bns.push(BatchNorm2d::new(store, bufs, &format!("disc.bn{}", i + 1), co));
        }
        let side = image_side / 16;
        let fan_in = 8 * width * side * side;
        let fc = Linear::new(store, "disc.fc", fan_in, 1, 1.0 / (fan_in as f64).sqrt(), rng);
        Discriminator { convs, bns, fc }
    }

    /// Full-resolution realness logit, one per image.
    pub fn forward_logits(&self, g: &mut Graph, bound: &BoundParams, ctx: &mut BnCtx, images: Var) -> Result<Var> {
        let s = g.value(images).shape().to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(SimsidError::shape("discriminate", format!("{s:?} is not [b,1,h,w]")));
        }
        let b = s[0];
        let mut x = images;
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let y = conv.forward(g, bound, x)?;
            let y = bn.forward(g, bound, ctx, y)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let flat_len = g.value(x).len() / b;
        let flat = g.reshape(x, &[b, flat_len])?;
        self.fc.forward(g, bound, flat)
    }
}

// ── Full model ──────────────────────────────────────────────────────

pub struct SimSIDModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bufs: BufStore,
    pub encoder: Encoder,
    pub teacher: Decoder,
    pub student: Decoder,
    pub inpaint: InpaintBlock,
    pub mem_level1: SpaceAwareMemory,
    pub mem_level2: SpaceAwareMemory,
    pub disc: Discriminator,
}

fn capped_grid(h: usize, w: usize) -> (usize, usize) {
    (h.min(GEN_MEM_MAX_GRID), w.min(GEN_MEM_MAX_GRID))
}

impl SimSIDModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut bufs = BufStore::new();
        let mut r = rng::rng(config.seed, rng::stream::PARAM_INIT, 0);
        let w = config.base_width;
        let (ph, pw) = config.patch_hw();

        let encoder = Encoder::new(&mut store, &mut bufs, w, &mut r);
        let teacher = Decoder::new(&mut store, &mut bufs, "gt", w, &mut r);
        let student = Decoder::new(&mut store, &mut bufs, "gs", w, &mut r);
        let inpaint = InpaintBlock::new(
            &mut store,
            "inp",
            config.grid,
            4 * w,
            ph / 8,
            pw / 8,
            config.items_per_block,
            config.top_k,
            config.temperature,
            &mut r,
        )?;
        // the two coarsest upsampling levels of the student generator
        let mem_level1 = SpaceAwareMemory::init(
            &mut store,
            "gs.mem1",
            capped_grid(ph / 4, pw / 4),
            config.items_per_block,
            6 * w,
            config.top_k,
            config.temperature,
            &mut r,
        )?;
        let mem_level2 = SpaceAwareMemory::init(
            &mut store,
            "gs.mem2",
            capped_grid(ph / 2, pw / 2),
            config.items_per_block,
            3 * w,
            config.top_k,
            config.temperature,
            &mut r,
        )?;
        let disc = Discriminator::new(&mut store, &mut bufs, config.disc_width, config.image_side, &mut r);

        Ok(SimSIDModel {
            config,
            params: store,
            bufs,
            encoder,
            teacher,
            student,
            inpaint,
            mem_level1,
            mem_level2,
            disc,
        })
    }

    pub fn is_disc_param(name: &str) -> bool {
        name.starts_with("disc.")
    }

    pub fn disc_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| Self::is_disc_param(&p.name))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn teacher_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("gt."))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn student_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("gs.") || p.name.starts_with("inp."))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    fn check_batch(&self, images: &Tensor) -> Result<usize> {
        let s = images.shape();
        let side = self.config.image_side;
        if s.len() != 4 || s[1] != 1 || s[2] != side || s[3] != side {
            return Err(SimsidError::shape(
                "model input",
                format!("{s:?}, expected [b,1,{side},{side}]"),
            ));
        }
        Ok(s[0])
    }

    /// Student path in eval mode: patchify, encode, in-paint, decode,
    /// discriminate. Returns the realness logit per image and the student
    /// reconstruction (full images). Pure: no buffer or parameter mutation.
    pub fn eval_forward(&self, g: &mut Graph, images: &Tensor) -> Result<(Var, Var)> {
        let batch = self.check_batch(images)?;
        let bound = self.params.bind_all(g, false);
        let mut ctx = BnCtx::Eval(&self.bufs);
        // eval never samples noise; a throwaway stream keeps signatures simple
        let mut dummy = rng::rng(0, rng::stream::GUMBEL, u64::MAX);

        let tiles = g.constant(patchify(images, self.config.grid)?);
        let enc = self.encoder.forward(g, &bound, &mut ctx, tiles)?;
        let painted = self
            .inpaint
            .forward(g, &bound, enc.bottleneck, batch, Mode::Eval, &mut dummy)?;
        let mems = GeneratorMems { level1: &self.mem_level1, level2: &self.mem_level2 };
        let (s_tiles, _) = self.student.forward(
            g,
            &bound,
            &mut ctx,
            painted,
            enc.skip1,
            enc.skip2,
            Some(&mems),
            &mut dummy,
        )?;
        let s_full = unpatchify_var(g, s_tiles, self.config.grid, batch)?;
        let logit = self.disc.forward_logits(g, &bound, &mut ctx, s_full)?;
        Ok((logit, s_full))
    }

    /// Realness probability of arbitrary images under the current weights.
    pub fn discriminate(&self, g: &mut Graph, images: &Tensor) -> Result<Var> {
        self.check_batch(images)?;
        let bound = self.params.bind_all(g, false);
        let mut ctx = BnCtx::Eval(&self.bufs);
        let x = g.constant(images.clone());
        let logit = self.disc.forward_logits(g, &bound, &mut ctx, x)?;
        Ok(g.sigmoid(logit))
    }
}

/// Everything the loss computation needs from one training-mode forward pass.
pub struct TrainForward {
    pub bound: BoundParams,
    pub batch: usize,
    /// Patchified input, also the reconstruction target.
    pub input_tiles: Var,
    /// Full-resolution input images (constant leaf).
    pub input_full: Var,
    pub teacher_tiles: Var,
    pub student_tiles: Var,
    pub student_full: Var,
    pub teacher_feats: Vec<Var>,
    pub student_feats: Vec<Var>,
    pub d_real_logit: Var,
    pub d_fake_detached_logit: Var,
    pub d_fake_live_logit: Var,
}

impl SimSIDModel {
    /// Full training-mode forward: teacher and student reconstructions, the
    /// distillation features, and the three discriminator passes. `trainable`
    /// turns parameter gradients off for probes that only need values.
    pub fn train_forward(
        &mut self,
        g: &mut Graph,
        images: &Tensor,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Result<TrainForward> {
        let batch = self.check_batch(images)?;
        let bound = self.params.bind_all(g, trainable);
        let mut ctx = BnCtx::Train(&mut self.bufs);

        let input_full = g.constant(images.clone());
        let input_tiles = g.constant(patchify(images, self.config.grid)?);
        let enc = self.encoder.forward(g, &bound, &mut ctx, input_tiles)?;

        // teacher: raw encoder features through stop-gradient
        let t_feat = g.stop_grad(enc.bottleneck);
        let t_skip1 = g.stop_grad(enc.skip1);
        let t_skip2 = g.stop_grad(enc.skip2);
        let (teacher_tiles, teacher_feats) =
            self.teacher
                .forward(g, &bound, &mut ctx, t_feat, t_skip1, t_skip2, None, rng)?;

        // student: in-painted features, gradients flow into the encoder
        let painted = self
            .inpaint
            .forward(g, &bound, enc.bottleneck, batch, Mode::Train, rng)?;
        let mems = GeneratorMems { level1: &self.mem_level1, level2: &self.mem_level2 };
        let (student_tiles, student_feats) = self.student.forward(
            g,
            &bound,
            &mut ctx,
            painted,
            enc.skip1,
            enc.skip2,
            Some(&mems),
            rng,
        )?;
        let student_full = unpatchify_var(g, student_tiles, self.config.grid, batch)?;

        let d_real_logit = self.disc.forward_logits(g, &bound, &mut ctx, input_full)?;
        let fake_detached = g.stop_grad(student_full);
        let d_fake_detached_logit = self.disc.forward_logits(g, &bound, &mut ctx, fake_detached)?;
        let d_fake_live_logit = self.disc.forward_logits(g, &bound, &mut ctx, student_full)?;

        Ok(TrainForward {
            bound,
            batch,
            input_tiles,
            input_full,
            teacher_tiles,
            student_tiles,
            student_full,
            teacher_feats,
            student_feats,
            d_real_logit,
            d_fake_detached_logit,
            d_fake_live_logit,
        })
    }
}

#[cfg(test)]
mod tests;

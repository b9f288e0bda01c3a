//! The five-loss objective, augmentation, and the alternating training loop.
//!
//! Per step, one shared forward pass feeds two backward passes: the
//! discriminator objective every step, the generator-side objective every
//! `gen_update_period` steps. Updates are scoped by parameter name, so
//! neither side's objective can ever move the other side's weights: the
//! discriminator update is harvested before generator gradients exist, and
//! generator harvesting filters discriminator parameters out.

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::data::{stack_images, DatasetSplit, ImageSample};
use crate::error::{Result, SimsidError};
use crate::metrics;
use crate::networks::{ModelConfig, SimSIDModel, TrainForward};
use crate::optim::{adam_step, cosine_lr};
use crate::rng;
use crate::scoring;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Loss coefficients. The defaults are the tuned operating point of the
/// training recipe; the config echo test pins them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub teacher: f64,
    pub student: f64,
    pub distill: f64,
    pub generator: f64,
    pub discriminator: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { teacher: 0.01, student: 10.0, distill: 0.001, generator: 0.005, discriminator: 0.005 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub teacher: f64,
    pub student: f64,
    pub distill: f64,
    /// `mean log(1 - D(fake))`: the generator's adversarial term as defined.
    pub generator: f64,
    /// `mean [log D(real) + log(1 - D(fake))]`: the discriminator's gain.
    pub discriminator: f64,
    /// Scalar the generator side actually descends.
    pub weighted_generator_total: f64,
    /// Scalar the discriminator side actually descends (the negated gain).
    pub weighted_discriminator_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub gen_update_period: usize,
    pub seed: u64,
    pub patch_grid: usize,
    pub items_per_block: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub base_width: usize,
    pub disc_width: usize,
    pub image_side: usize,
    pub translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            lr_max: 1e-4,
            lr_min: 2e-5,
            weight_decay: 1e-5,
            gen_update_period: 2,
            seed: 0,
            patch_grid: 4,
            items_per_block: 100,
            top_k: 5,
            temperature: 1.0,
            base_width: 32,
            disc_width: 16,
            image_side: 128,
            translate_frac: 0.05,
            scale_min: 0.95,
            scale_max: 1.05,
            patience: 20,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_side: self.image_side,
            grid: (self.patch_grid, self.patch_grid),
            base_width: self.base_width,
            disc_width: self.disc_width,
            items_per_block: self.items_per_block,
            top_k: self.top_k,
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

// ── Augmentation ────────────────────────────────────────────────────

/// Apply a fixed translation (pixels) and isotropic scale about the image
/// center with bilinear resampling; out-of-bounds reads take the image
/// minimum (background).
pub fn augment_with(image: &Tensor, tx: f64, ty: f64, scale: f64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(SimsidError::shape("augment", format!("{s:?} is not [1,h,w]")));
    }
    let (h, w) = (s[1], s[2]);
    let src = image.data();
    let fill = src.iter().cloned().fold(f64::INFINITY, f64::min);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let sy = cy + (y as f64 - cy - ty) / scale;
            let sx = cx + (x as f64 - cx - tx) / scale;
            let v = if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                fill
            } else {
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let a = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let b = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                a * (1.0 - fy) + b * fy
            };
            out[y * w + x] = v;
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Seeded random translation within `±translate_frac` of the side per axis
/// and isotropic scaling within `[scale_min, scale_max]`.
pub fn augment(image: &Tensor, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let side = image.shape()[1] as f64;
    let t = cfg.translate_frac * side;
    let tx = rng.random_range(-t..=t);
    let ty = rng.random_range(-t..=t);
    let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    augment_with(image, tx, ty, scale)
}

// ── Losses ──────────────────────────────────────────────────────────

pub struct LossNodes {
    pub teacher: Var,
    pub student: Var,
    pub distill: Var,
    pub generator_logged: Var,
    pub discriminator_logged: Var,
    /// Objective the generator side minimizes (non-saturating adversarial
    /// surrogate in place of the raw `log(1 - D)` term).
    pub generator_objective: Var,
    /// Objective the discriminator side minimizes.
    pub discriminator_objective: Var,
}

/// Sum of per-level mean squared feature distances, teacher side detached so
/// distillation only shapes the student path.
pub fn distillation_loss(g: &mut Graph, teacher_feats: &[Var], student_feats: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(teacher_feats.len());
    for (&t, &s) in teacher_feats.iter().zip(student_feats) {
        let t_detached = g.stop_grad(t);
        terms.push((1.0, g.mse(t_detached, s)?));
    }
    g.weighted_sum(&terms)
}

/// Assemble all loss nodes from one training forward pass. Log values use
/// the raw definitions; the optimized objectives use numerically stable
/// softplus forms of the same quantities.
pub fn compute_losses(g: &mut Graph, fwd: &TrainForward, weights: &LossWeights) -> Result<LossNodes> {
    let teacher = g.mse(fwd.input_tiles, fwd.teacher_tiles)?;
    let student = g.mse(fwd.input_tiles, fwd.student_tiles)?;
    let distill = distillation_loss(g, &fwd.teacher_feats, &fwd.student_feats)?;

    // log D(x) = -softplus(-logit); log(1 - D(x)) = -softplus(logit)
    let sp_live = g.softplus(fwd.d_fake_live_logit);
    let m_sp_live = g.mean_all(sp_live);
    let generator_logged = g.scale(m_sp_live, -1.0);

    let neg_real = g.scale(fwd.d_real_logit, -1.0);
    let sp_neg_real = g.softplus(neg_real);
    let sp_fake_det = g.softplus(fwd.d_fake_detached_logit);
    let bce = g.add(sp_neg_real, sp_fake_det)?;
    let dis_minimized = g.mean_all(bce);
    let discriminator_logged = g.scale(dis_minimized, -1.0);

    // non-saturating generator surrogate: mean softplus(-logit) = -mean log D(fake)
    let neg_live = g.scale(fwd.d_fake_live_logit, -1.0);
    let sp_neg_live = g.softplus(neg_live);
    let gen_surrogate = g.mean_all(sp_neg_live);

    let generator_objective = g.weighted_sum(&[
        (weights.teacher, teacher),
        (weights.student, student),
        (weights.distill, distill),
        (weights.generator, gen_surrogate),
    ])?;
    let discriminator_objective = g.scale(dis_minimized, weights.discriminator);

    for (name, v) in [
        ("teacher reconstruction", teacher),
        ("student reconstruction", student),
        ("distillation", distill),
        ("generator adversarial", generator_logged),
        ("discriminator", discriminator_logged),
    ] {
        if !g.scalar_value(v).is_finite() {
            return Err(SimsidError::NonFinite { context: format!("{name} loss") });
        }
    }
    Ok(LossNodes {
        teacher,
        student,
        distill,
        generator_logged,
        discriminator_logged,
        generator_objective,
        discriminator_objective,
    })
}

impl LossBreakdown {
    fn from_nodes(g: &Graph, nodes: &LossNodes) -> Self {
        LossBreakdown {
            teacher: g.scalar_value(nodes.teacher),
            student: g.scalar_value(nodes.student),
            distill: g.scalar_value(nodes.distill),
            generator: g.scalar_value(nodes.generator_logged),
            discriminator: g.scalar_value(nodes.discriminator_logged),
            weighted_generator_total: g.scalar_value(nodes.generator_objective),
            weighted_discriminator_total: g.scalar_value(nodes.discriminator_objective),
        }
    }
}

// ── Step and loop ───────────────────────────────────────────────────

/// Whether the generator side updates on this step.
pub fn is_generator_step(step_index: usize, period: usize) -> bool {
    period > 0 && step_index % period == 0
}

/// One optimization step on one batch. The discriminator updates every step;
/// the generator side (encoder, both decoders, memories, in-painting) only on
/// generator steps. Gumbel noise derives from `(seed, step_index)` so a step
/// can be replayed exactly.
pub fn train_step(
    model: &mut SimSIDModel,
    batch: &Tensor,
    cfg: &TrainConfig,
    lr: f64,
    step_index: usize,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let mut noise_rng = rng::rng(cfg.seed, rng::stream::GUMBEL, step_index as u64);
    let fwd = model.train_forward(&mut g, batch, &mut noise_rng, true)?;
    let losses = compute_losses(&mut g, &fwd, &cfg.weights)?;
    let breakdown = LossBreakdown::from_nodes(&g, &losses);

    model.params.clear_grads();
    g.backward(losses.discriminator_objective)?;
    model.params.harvest_grads(&g, &fwd.bound, SimSIDModel::is_disc_param)?;
    for (_, p) in model.params.iter_mut() {
        if SimSIDModel::is_disc_param(&p.name) && p.grad.is_some() {
            adam_step(p, lr, cfg.weight_decay)?;
        }
    }
    model.params.clear_grads();

    if is_generator_step(step_index, cfg.gen_update_period) {
        g.zero_grads();
        g.backward(losses.generator_objective)?;
        model
            .params
            .harvest_grads(&g, &fwd.bound, |n| !SimSIDModel::is_disc_param(n))?;
        for (_, p) in model.params.iter_mut() {
            if !SimSIDModel::is_disc_param(&p.name) && p.grad.is_some() {
                adam_step(p, lr, cfg.weight_decay)?;
            }
        }
        model.params.clear_grads();
    }
    Ok(breakdown)
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub val_auc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub best_val_auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub records: Vec<EpochRecord>,
}

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,L_t,L_s,L_dist,L_gen,L_dis,lr,val_auc\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.losses.teacher,
            r.losses.student,
            r.losses.distill,
            r.losses.generator,
            r.losses.discriminator,
            r.lr,
            r.val_auc
        ));
    }
    out
}

/// Full training run: cosine learning rate, per-epoch calibration and
/// validation AUC, best-checkpoint tracking, optional early stopping.
/// Writes `checkpoint.bin` and `train_log.csv` into `out_dir`.
pub fn train(cfg: &TrainConfig, split: &DatasetSplit, out_dir: &Path) -> Result<TrainOutcome> {
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(SimsidError::Data("train and validation splits must be non-empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut model = SimSIDModel::new(cfg.model_config())?;
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let log_path = out_dir.join("train_log.csv");

    let val_labels: Vec<bool> = split.validation.iter().map(|s| s.label.is_abnormal()).collect();
    let mut records = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize); // (val auc, epoch)
    let mut step_index = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut rng::rng(cfg.seed, rng::stream::SHUFFLE, epoch as u64));

        let mut sums = [0.0f64; 7];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let augmented: Vec<ImageSample> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut r = rng::rng(
                        cfg.seed,
                        rng::stream::AUGMENT,
                        (epoch as u64) << 32 | (batches * cfg.batch_size + j) as u64,
                    );
                    Ok(ImageSample {
                        pixels: augment(&split.train[i].pixels, cfg, &mut r)?,
                        ..split.train[i].clone()
                    })
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&ImageSample> = augmented.iter().collect();
            let batch = stack_images(&refs)?;
            let b = train_step(&mut model, &batch, cfg, lr, step_index)?;
            step_index += 1;
            batches += 1;
            for (s, v) in sums.iter_mut().zip([
                b.teacher,
                b.student,
                b.distill,
                b.generator,
                b.discriminator,
                b.weighted_generator_total,
                b.weighted_discriminator_total,
            ]) {
                *s += v;
            }
        }
        if batches == 0 {
            return Err(SimsidError::Data("no trainable batches (training set too small)".into()));
        }
        let n = batches as f64;
        let losses = LossBreakdown {
            teacher: sums[0] / n,
            student: sums[1] / n,
            distill: sums[2] / n,
            generator: sums[3] / n,
            discriminator: sums[4] / n,
            weighted_generator_total: sums[5] / n,
            weighted_discriminator_total: sums[6] / n,
        };

        // honest validation: recalibrate on the training set every epoch
        let stats = scoring::calibrate(&model, &split.train)?;
        let val_raw = scoring::raw_scores_for(&model, &split.validation)?;
        let val_auc = metrics::roc_auc(&val_raw, &val_labels)?;

        records.push(EpochRecord { epoch, losses, lr, val_auc });
        std::fs::write(&log_path, log_csv(&records))?;

        if val_auc > best.0 {
            best = (val_auc, epoch);
            checkpoint::save(&model, Some(&stats), &checkpoint_path)?;
        }
        if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        best_val_auc: best.0,
        best_epoch: best.1,
        epochs_run: records.len(),
        records,
    })
}

#[cfg(test)]
mod tests;

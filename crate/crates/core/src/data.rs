//! Synthetic structured-image generation, anomaly injection, directory
//! ingestion, and training-set contamination.
//!
//! Every synthetic sample shares one fixed spatial layout (two dark lung
//! fields, periodic rib bands, a bright central column) with small per-sample
//! jitter, so recurring structure dominates the corpus the way standardized
//! imaging protocols make radiographs alike. Anomalies modify at most a small
//! local region.

use crate::error::{Result, SimsidError};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const IMAGE_SIDE: usize = 128;

/// Layout and anomaly constants, kept in one place so the separability
/// window of the synthetic benchmark can be re-tuned without touching code.
pub mod constants {
    /// Body intensity on the [0,1] composition scale.
    pub const BASE: f64 = 0.68;
    pub const LUNG_DROP: f64 = 0.38;
    /// Lung centers as fractions of the image side.
    pub const LUNG_CX: [f64; 2] = [0.32, 0.68];
    pub const LUNG_CY: f64 = 0.52;
    pub const LUNG_RX: f64 = 0.15;
    pub const LUNG_RY: f64 = 0.26;
    /// Soft edge width of the lung boundary, in normalized ellipse units.
    pub const LUNG_EDGE: f64 = 0.18;
    pub const COLUMN_HALF_WIDTH: f64 = 0.065;
    pub const COLUMN_GAIN: f64 = 0.20;
    pub const RIB_COUNT: usize = 6;
    pub const RIB_Y0: f64 = 0.22;
    pub const RIB_SPACING: f64 = 0.105;
    /// Gaussian half-width of a rib band as a fraction of the side.
    pub const RIB_SIGMA: f64 = 0.012;
    pub const RIB_GAIN: f64 = 0.12;
    /// Per-sample jitter bound for positions, sizes, and intensities.
    pub const JITTER: f64 = 0.03;
    pub const PIXEL_NOISE: f64 = 0.02;

    pub const BLOB_R_MIN: f64 = 8.0;
    pub const BLOB_R_MAX: f64 = 16.0;
    pub const BLOB_GAIN: f64 = 0.45;
    pub const SHUFFLE_SIZE: usize = 24;
    pub const SHUFFLE_TILE: usize = 4;
    /// Per-tile intensity offset magnitude of the texture shuffle.
    pub const SHUFFLE_OFFSET: (f64, f64) = (0.10, 0.18);
    pub const WARP_SIZE: usize = 32;
    pub const WARP_AMP: f64 = 6.0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Bright round opacity inside a lung field.
    Blob,
    /// Local texture scramble of a square region.
    TextureShuffle,
    /// Local vertical warp bending the rib bands.
    BandWarp,
}

#[derive(Debug, Clone, Copy)]
pub struct AnomalyMeta {
    pub kind: AnomalyKind,
    /// (row, col) center in pixels.
    pub center: (usize, usize),
    /// All modified pixels lie within this radius of the center.
    pub radius: usize,
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    /// `[1, side, side]`, values in `[-1, 1]`.
    pub pixels: Tensor,
    pub label: Label,
    pub source_id: String,
    pub anomaly: Option<AnomalyMeta>,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub validation: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Abnormal fraction of the training set.
    pub contamination_ratio: f64,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Compose one normal image on the [0,1] scale, then map to [-1,1].
fn compose_normal(rng: &mut ChaCha8Rng) -> Tensor {
    use constants::*;
    let s = IMAGE_SIDE as f64;
    fn jit(rng: &mut ChaCha8Rng, v: f64) -> f64 {
        v + rng.random_range(-JITTER..=JITTER)
    }
    fn jit_scale(rng: &mut ChaCha8Rng, v: f64) -> f64 {
        v * (1.0 + rng.random_range(-JITTER..=JITTER))
    }
    let base = jit_scale(rng, BASE);
    let lung_cx = [jit(rng, LUNG_CX[0]) * s, jit(rng, LUNG_CX[1]) * s];
    let lung_cy = jit(rng, LUNG_CY) * s;
    let lung_rx = jit_scale(rng, LUNG_RX) * s;
    let lung_ry = jit_scale(rng, LUNG_RY) * s;
    let lung_drop = jit_scale(rng, LUNG_DROP);
    let col_x = jit(rng, 0.5) * s;
    let col_hw = COLUMN_HALF_WIDTH * s;
    let col_gain = jit_scale(rng, COLUMN_GAIN);
    let rib_y: Vec<f64> = (0..RIB_COUNT)
        .map(|k| jit(rng, RIB_Y0 + k as f64 * RIB_SPACING) * s)
        .collect();
    let rib_sigma = RIB_SIGMA * s;
    let rib_gain = jit_scale(rng, RIB_GAIN);

    let mut data = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = base;
            for cx in lung_cx {
                let d2 = ((xf - cx) / lung_rx).powi(2) + ((yf - lung_cy) / lung_ry).powi(2);
                v -= lung_drop * smoothstep((1.0 - d2) / LUNG_EDGE);
            }
            for &ry in &rib_y {
                let d = (yf - ry) / rib_sigma;
                v += rib_gain * (-0.5 * d * d).exp();
            }
            let cd = (xf - col_x).abs();
            if cd < col_hw * 1.5 {
                v += col_gain * smoothstep((col_hw * 1.5 - cd) / col_hw);
            }
            data[y * IMAGE_SIDE + x] = v;
        }
    }
    // mild pixel noise, then clamp and map to [-1,1]
    for v in data.iter_mut() {
        let u1: f64 = loop {
            let u = rng.random::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        let u2: f64 = rng.random();
        let noise = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *v = (*v + constants::PIXEL_NOISE * noise).clamp(0.0, 1.0) * 2.0 - 1.0;
    }
    Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], data).unwrap()
}

/// Inject one seeded anomaly into a normal synthetic image. The modification
/// never leaves `meta.center ± meta.radius`, touches well under 10% of the
/// image, and moves at least 100 pixels by at least 0.1.
pub fn inject_anomaly(image: &Tensor, seed: u64) -> Result<(Tensor, AnomalyMeta)> {
    use constants::*;
    if image.shape() != [1, IMAGE_SIDE, IMAGE_SIDE] {
        return Err(SimsidError::shape("inject_anomaly", format!("{:?}", image.shape())));
    }
    let mut r = rng::rng(seed, rng::stream::DATA_GEN, 0x0a0a);
    let s = IMAGE_SIDE as f64;
    let mut out = image.clone();
    let kind = match r.random_range(0..3u32) {
        0 => AnomalyKind::Blob,
        1 => AnomalyKind::TextureShuffle,
        _ => AnomalyKind::BandWarp,
    };
    let lung = LUNG_CX[r.random_range(0..2usize)];
    let meta = match kind {
        AnomalyKind::Blob => {
            let radius = r.random_range(BLOB_R_MIN..=BLOB_R_MAX);
            let cx = (lung * s + r.random_range(-0.06..=0.06) * s).round() as i64;
            let cy = (LUNG_CY * s + r.random_range(-0.12..=0.12) * s).round() as i64;
            let gain = BLOB_GAIN * (1.0 + r.random_range(-0.1..=0.1));
            let d = out.data_mut();
            let rr = radius.ceil() as i64;
            for dy in -rr..=rr {
                for dx in -rr..=rr {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= IMAGE_SIDE as i64 || y >= IMAGE_SIDE as i64 {
                        continue;
                    }
                    let dist = ((dx * dx + dy * dy) as f64).sqrt();
                    if dist < radius {
                        let w = (std::f64::consts::FRAC_PI_2 * dist / radius).cos();
                        let idx = y as usize * IMAGE_SIDE + x as usize;
                        d[idx] = (d[idx] + 2.0 * gain * w).min(1.0);
                    }
                }
            }
            AnomalyMeta { kind, center: (cy as usize, cx as usize), radius: radius.ceil() as usize }
        }
        AnomalyKind::TextureShuffle => {
            // anchor the region on the lung boundary where structure is dense
            let side_pick = if r.random_range(0..2u32) == 0 { -1.0 } else { 1.0 };
            let cx = (lung * s + side_pick * LUNG_RX * s * 0.9) as i64;
            let cy = (LUNG_CY * s + r.random_range(-0.10..=0.10) * s) as i64;
            let half = (SHUFFLE_SIZE / 2) as i64;
            let x0 = (cx - half).clamp(0, (IMAGE_SIDE - SHUFFLE_SIZE) as i64) as usize;
            let y0 = (cy - half).clamp(0, (IMAGE_SIDE - SHUFFLE_SIZE) as i64) as usize;
            let tiles_per_side = SHUFFLE_SIZE / SHUFFLE_TILE;
            let mut perm: Vec<usize> = (0..tiles_per_side * tiles_per_side).collect();
            perm.shuffle(&mut r);
            let offsets: Vec<f64> = (0..perm.len())
                .map(|_| {
                    let m = r.random_range(SHUFFLE_OFFSET.0..=SHUFFLE_OFFSET.1);
                    if r.random_range(0..2u32) == 0 {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let src = image.data();
            let d = out.data_mut();
            for (t, &from) in perm.iter().enumerate() {
                let (ty, tx) = (t / tiles_per_side, t % tiles_per_side);
                let (fy, fx) = (from / tiles_per_side, from % tiles_per_side);
                for y in 0..SHUFFLE_TILE {
                    for x in 0..SHUFFLE_TILE {
                        let dst_idx = (y0 + ty * SHUFFLE_TILE + y) * IMAGE_SIDE + x0 + tx * SHUFFLE_TILE + x;
                        let src_idx = (y0 + fy * SHUFFLE_TILE + y) * IMAGE_SIDE + x0 + fx * SHUFFLE_TILE + x;
                        d[dst_idx] = (src[src_idx] + 2.0 * offsets[t]).clamp(-1.0, 1.0);
                    }
                }
            }
            let c = (y0 + SHUFFLE_SIZE / 2, x0 + SHUFFLE_SIZE / 2);
            let radius = ((SHUFFLE_SIZE as f64) * std::f64::consts::SQRT_2 / 2.0).ceil() as usize;
            AnomalyMeta { kind, center: c, radius }
        }
        AnomalyKind::BandWarp => {
            let cx = (lung * s + r.random_range(-0.05..=0.05) * s) as i64;
            let cy = (LUNG_CY * s + r.random_range(-0.10..=0.10) * s) as i64;
            let half = (WARP_SIZE / 2) as i64;
            let x0 = (cx - half).clamp(0, (IMAGE_SIDE - WARP_SIZE) as i64) as usize;
            let y0 = (cy - half).clamp(0, (IMAGE_SIDE - WARP_SIZE) as i64) as usize;
            let amp = WARP_AMP * (0.8 + 0.4 * r.random::<f64>());
            let phase = r.random::<f64>() * std::f64::consts::TAU;
            let src = image.data();
            let d = out.data_mut();
            let w = WARP_SIZE as f64;
            for y in 0..WARP_SIZE {
                for x in 0..WARP_SIZE {
                    let wx = (std::f64::consts::PI * x as f64 / (w - 1.0)).sin();
                    let wy = (std::f64::consts::PI * y as f64 / (w - 1.0)).sin();
                    let shift = amp * wx * wy * (std::f64::consts::TAU * x as f64 / w + phase).sin();
                    let sy = (y0 + y) as f64 + shift;
                    let sy0 = sy.floor().clamp(0.0, (IMAGE_SIDE - 1) as f64) as usize;
                    let sy1 = (sy0 + 1).min(IMAGE_SIDE - 1);
                    let frac = (sy - sy0 as f64).clamp(0.0, 1.0);
                    let col = x0 + x;
                    let v = src[sy0 * IMAGE_SIDE + col] * (1.0 - frac) + src[sy1 * IMAGE_SIDE + col] * frac;
                    d[(y0 + y) * IMAGE_SIDE + col] = v;
                }
            }
            let c = (y0 + WARP_SIZE / 2, x0 + WARP_SIZE / 2);
            let radius = ((WARP_SIZE as f64) * std::f64::consts::SQRT_2 / 2.0).ceil() as usize + WARP_AMP.ceil() as usize;
            AnomalyMeta { kind, center: c, radius }
        }
    };
    Ok((out, meta))
}

/// Generate `n` synthetic samples, deterministically per `(seed, index)`.
pub fn gen_synthetic(n: usize, seed: u64, abnormal: bool) -> Result<Vec<ImageSample>> {
    if n == 0 {
        return Err(SimsidError::arg("gen_synthetic", "n must be at least 1"));
    }
    let tag = if abnormal { "a" } else { "n" };
    (0..n)
        .map(|i| {
            let mut r = rng::rng(seed, rng::stream::DATA_GEN, i as u64);
            let normal = compose_normal(&mut r);
            let source_id = format!("synth-{seed}-{i:05}-{tag}");
            if abnormal {
                let (pixels, meta) = inject_anomaly(&normal, rng::derive_seed(seed, rng::stream::DATA_GEN, 1_000_000 + i as u64))?;
                Ok(ImageSample { pixels, label: Label::Abnormal, source_id, anomaly: Some(meta) })
            } else {
                Ok(ImageSample { pixels: normal, label: Label::Normal, source_id, anomaly: None })
            }
        })
        .collect()
}

/// Standard benchmark corpus: normal-only train, balanced validation/test.
/// `n_val` and `n_test` are totals (half normal, half abnormal).
pub fn gen_benchmark_split(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<DatasetSplit> {
    let train = gen_synthetic(n_train, rng::derive_seed(seed, 0x7261, 0), false)?;
    let mut validation = gen_synthetic(n_val.div_ceil(2), rng::derive_seed(seed, 0x7661, 0), false)?;
    validation.extend(gen_synthetic(n_val / 2, rng::derive_seed(seed, 0x7662, 0), true)?);
    let mut test = gen_synthetic(n_test.div_ceil(2), rng::derive_seed(seed, 0x7465, 0), false)?;
    test.extend(gen_synthetic(n_test / 2, rng::derive_seed(seed, 0x7466, 0), true)?);
    Ok(DatasetSplit { train, validation, test, contamination_ratio: 0.0 })
}

/// Replace a seeded-random subset of training normals with samples from the
/// abnormal pool until the abnormal fraction reaches `ratio` (within one
/// sample). Validation and test are untouched.
pub fn contaminate_training_set(
    split: &mut DatasetSplit,
    pool: &[ImageSample],
    ratio: f64,
    seed: u64,
) -> Result<()> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(SimsidError::arg("contaminate", format!("ratio {ratio} outside [0, 0.5]")));
    }
    let target = (ratio * split.train.len() as f64).round() as usize;
    let already = split.train.iter().filter(|s| s.label.is_abnormal()).count();
    if target <= already {
        split.contamination_ratio = already as f64 / split.train.len().max(1) as f64;
        return Ok(());
    }
    let need = target - already;
    if pool.len() < need {
        return Err(SimsidError::Data(format!(
            "abnormal pool has {} samples, contamination needs {need}",
            pool.len()
        )));
    }
    let mut normal_idx: Vec<usize> = split
        .train
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.label.is_abnormal())
        .map(|(i, _)| i)
        .collect();
    let mut r = rng::rng(seed, rng::stream::CONTAMINATE, 0);
    normal_idx.shuffle(&mut r);
    for (k, &i) in normal_idx.iter().take(need).enumerate() {
        split.train[i] = pool[k].clone();
    }
    split.contamination_ratio = target as f64 / split.train.len() as f64;
    Ok(())
}

/// Stack samples into a `[b, 1, side, side]` batch tensor.
pub fn stack_images(samples: &[&ImageSample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(SimsidError::Data("empty batch".into()));
    }
    let side = samples[0].pixels.shape()[1];
    let mut data = Vec::with_capacity(samples.len() * side * side);
    for s in samples {
        if s.pixels.shape() != [1, side, side] {
            return Err(SimsidError::shape("stack_images", format!("{:?}", s.pixels.shape())));
        }
        data.extend_from_slice(s.pixels.data());
    }
    Tensor::new(vec![samples.len(), 1, side, side], data)
}

// ── PNG import/export ───────────────────────────────────────────────

fn to_png_bytes(pixels: &Tensor) -> Vec<u8> {
    pixels
        .data()
        .iter()
        .map(|v| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Write a split to `root/{train,val,test}/{normal,abnormal}/<source-id>.png`.
pub fn export_split_png(split: &DatasetSplit, root: &Path) -> Result<()> {
    for (sub, list) in [("train", &split.train), ("val", &split.validation), ("test", &split.test)] {
        for sample in list {
            let dir = root.join(sub).join(sample.label.dir_name());
            std::fs::create_dir_all(&dir)?;
            let side = sample.pixels.shape()[1] as u32;
            let img = image::GrayImage::from_raw(side, side, to_png_bytes(&sample.pixels))
                .ok_or_else(|| SimsidError::Data("png buffer size mismatch".into()))?;
            img.save(dir.join(format!("{}.png", sample.source_id)))
                .map_err(|e| SimsidError::Data(format!("png write: {e}")))?;
        }
    }
    Ok(())
}

fn load_one_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| SimsidError::Data(format!("{}: {e}", path.display())))?;
    // luminance conversion (0.299 R + 0.587 G + 0.114 B), then bilinear resize
    let gray = img.into_luma8();
    let resized = image::imageops::resize(
        &gray,
        IMAGE_SIDE as u32,
        IMAGE_SIDE as u32,
        image::imageops::FilterType::Triangle,
    );
    let data: Vec<f64> = resized.into_raw().iter().map(|&v| v as f64 / 255.0 * 2.0 - 1.0).collect();
    Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], data)
}

pub struct LoadedData {
    pub split: DatasetSplit,
    /// Abnormal samples found under `train/abnormal`, usable as a
    /// contamination pool; never part of the training set itself.
    pub abnormal_pool: Vec<ImageSample>,
    pub skipped: usize,
}

/// Ingest `root/{train,val,test}/{normal,abnormal}/*.{png,jpg,jpeg}` in
/// deterministic lexicographic order. Unreadable files are skipped with a
/// warning; empty class directories in val/test are rejected.
pub fn load_image_dir(root: &Path) -> Result<LoadedData> {
    let mut skipped = 0usize;
    let mut load_class = |sub: &str, label: Label| -> Result<Vec<ImageSample>> {
        let dir = root.join(sub).join(label.dir_name());
        let mut out = Vec::new();
        if !dir.is_dir() {
            return Ok(out);
        }
        let mut paths: Vec<_> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        for p in paths {
            match load_one_image(&p) {
                Ok(pixels) => out.push(ImageSample {
                    pixels,
                    label,
                    source_id: format!("{sub}/{}/{}", label.dir_name(), p.file_name().unwrap().to_string_lossy()),
                    anomaly: None,
                }),
                Err(e) => {
                    eprintln!("warning: skipping {}: {e}", p.display());
                    skipped += 1;
                }
            }
        }
        Ok(out)
    };

    let train = load_class("train", Label::Normal)?;
    let abnormal_pool = load_class("train", Label::Abnormal)?;
    let mut validation = load_class("val", Label::Normal)?;
    let val_ab = load_class("val", Label::Abnormal)?;
    let mut test = load_class("test", Label::Normal)?;
    let test_ab = load_class("test", Label::Abnormal)?;

    if train.is_empty() {
        return Err(SimsidError::Data(format!("{}/train/normal has no readable images", root.display())));
    }
    for (name, normals, abnormals) in [("val", &validation, &val_ab), ("test", &test, &test_ab)] {
        if normals.is_empty() || abnormals.is_empty() {
            return Err(SimsidError::Data(format!(
                "{name} split needs both classes: {} normal, {} abnormal",
                normals.len(),
                abnormals.len()
            )));
        }
    }
    validation.extend(val_ab);
    test.extend(test_ab);
    let contamination_ratio = 0.0;
    Ok(LoadedData {
        split: DatasetSplit { train, validation, test, contamination_ratio },
        abnormal_pool,
        skipped,
    })
}

//! Anomaly scoring: raw discriminator-derived scores, training-set
//! calibration, and the sigmoid-normalized anomaly score.
//!
//! The raw score is the fake-ness of the student reconstruction,
//! `1 - D(Gs(E(I)))`, so larger means more anomalous. Calibration computes
//! the mean and population standard deviation of raw scores over the
//! training set; the final score squashes the z-normalized raw score through
//! a sigmoid. Both transforms are strictly monotone, so ranking metrics are
//! identical on raw and calibrated scores.

use crate::autodiff::{stable_sigmoid, Graph};
use crate::data::{stack_images, ImageSample};
use crate::error::{Result, SimsidError};
use crate::networks::SimSIDModel;
use crate::tensor::Tensor;

pub const SCORE_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationStats {
    pub mu: f64,
    pub sigma: f64,
    pub count: usize,
}

/// Raw scores for a `[b,1,s,s]` batch in eval mode (no noise, running-stat
/// batch norm). One value in (0,1) per image, batching-transparent.
pub fn raw_score_batch(model: &SimSIDModel, images: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (logit, _) = model.eval_forward(&mut g, images)?;
    let t = g.value(logit);
    t.assert_finite("raw_score")?;
    Ok(t.data().iter().map(|&l| stable_sigmoid(-l)).collect())
}

pub fn raw_score(model: &SimSIDModel, image: &Tensor) -> Result<f64> {
    let side = model.config.image_side;
    let batch = if image.shape() == [1, side, side] {
        image.clone().reshaped(&[1, 1, side, side])?
    } else {
        image.clone()
    };
    Ok(raw_score_batch(model, &batch)?[0])
}

/// Raw scores over a sample list, evaluated in fixed-size batches.
pub fn raw_scores_for(model: &SimSIDModel, samples: &[ImageSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let batch = stack_images(&refs)?;
        out.extend(raw_score_batch(model, &batch)?);
    }
    Ok(out)
}

/// Mean and population standard deviation of raw scores over a sample set.
pub fn calibrate_from_scores(scores: &[f64]) -> Result<CalibrationStats> {
    if scores.len() < 2 {
        return Err(SimsidError::arg("calibrate", "need at least 2 samples"));
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(SimsidError::arg(
            "calibrate",
            "zero score variance: the model scores every sample identically",
        ));
    }
    Ok(CalibrationStats { mu, sigma, count: scores.len() })
}

pub fn calibrate(model: &SimSIDModel, training_set: &[ImageSample]) -> Result<CalibrationStats> {
    calibrate_from_scores(&raw_scores_for(model, training_set)?)
}

/// Sigmoid of the z-normalized raw score; strictly increasing in `raw`.
pub fn anomaly_score(raw: f64, stats: &CalibrationStats) -> f64 {
    stable_sigmoid((raw - stats.mu) / stats.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::networks::ModelConfig;

    fn tiny_model() -> SimSIDModel {
        SimSIDModel::new(ModelConfig {
            image_side: 32,
            grid: (2, 2),
            base_width: 4,
            disc_width: 4,
            items_per_block: 6,
            top_k: 2,
            temperature: 1.0,
            seed: 3,
        })
        .unwrap()
    }

    fn tiny_images(n: usize, seed: u64) -> Vec<ImageSample> {
        // synthetic generator is fixed at 128; build small random samples here
        (0..n)
            .map(|i| {
                let mut r = crate::rng::rng(seed, crate::rng::stream::DATA_GEN, i as u64);
                let mut t = Tensor::randn(&[1, 32, 32], 0.4, &mut r);
                for v in t.data_mut() {
                    *v = v.clamp(-1.0, 1.0);
                }
                data::ImageSample {
                    pixels: t,
                    label: data::Label::Normal,
                    source_id: format!("t{i}"),
                    anomaly: None,
                }
            })
            .collect()
    }

    #[test]
    fn scores_deterministic_in_unit_interval_and_batch_transparent() {
        let model = tiny_model();
        let samples = tiny_images(5, 1);
        let a = raw_scores_for(&model, &samples).unwrap();
        let b = raw_scores_for(&model, &samples).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        // single-image scoring equals its batched value
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(raw_score(&model, &s.pixels).unwrap(), a[i]);
        }
    }

    #[test]
    fn calibration_hand_case_and_order_invariance() {
        let stats = calibrate_from_scores(&[0.2, 0.4]).unwrap();
        assert!((stats.mu - 0.3).abs() < 1e-15);
        assert!((stats.sigma - 0.1).abs() < 1e-12, "population std expected");
        let swapped = calibrate_from_scores(&[0.4, 0.2]).unwrap();
        assert_eq!(stats, swapped);
        assert!(calibrate_from_scores(&[0.3, 0.3, 0.3]).is_err(), "sigma = 0 must error");
        assert!(calibrate_from_scores(&[0.3]).is_err());
    }

    #[test]
    fn anomaly_score_fixed_points_and_monotonicity() {
        let stats = CalibrationStats { mu: 0.4, sigma: 0.05, count: 10 };
        assert!((anomaly_score(0.4, &stats) - 0.5).abs() < 1e-15);
        assert!((anomaly_score(0.45, &stats) - 0.7310585786300049).abs() < 1e-12);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..50 {
            let a = anomaly_score(i as f64 * 0.01, &stats);
            assert!(a > prev);
            prev = a;
        }
    }

    #[test]
    fn evaluation_does_not_mutate_the_model() {
        let model = tiny_model();
        let before = (model.params.checksum(), model.bufs.checksum());
        let _ = raw_scores_for(&model, &tiny_images(3, 2)).unwrap();
        let _ = calibrate(&model, &tiny_images(4, 3)).unwrap();
        assert_eq!((model.params.checksum(), model.bufs.checksum()), before);
    }
}

//! Ranking and threshold metrics: AUC, ROC/PR curves, accuracy, F1.

use crate::error::{Result, SimsidError};
use crate::plot;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    BestF1,
}

fn check_two_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SimsidError::arg(
            "metrics",
            format!("both classes required, got {pos} positive / {neg} negative"),
        ));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counted half (the rank-sum / Mann-Whitney estimator).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SimsidError::shape("roc_auc", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = check_two_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tie groups, accumulate the positive rank sum
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC curve from (0,0) to (1,1), thresholds descending.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_two_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut out = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(out)
}

/// Trapezoidal area under a ROC curve; the dual route to [`roc_auc`].
pub fn auc_trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Precision-recall points at every distinct threshold, descending.
pub fn pr_points(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    let (pos, _) = check_two_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(PrPoint {
            threshold: t,
            recall: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(out)
}

fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fal_n) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fal_n += 1,
        }
    }
    (tp, fp, tn, fal_n)
}

fn f1_of(tp: usize, fp: usize, fal_n: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fal_n) as f64
    }
}

/// Accuracy and F1 under the given threshold policy. `BestF1` sweeps every
/// distinct score as a candidate threshold (prediction: score >= threshold is
/// abnormal) and keeps the maximizer, ties resolved toward the lower
/// threshold (higher recall).
pub fn threshold_metrics(scores: &[f64], labels: &[bool], policy: ThresholdPolicy) -> Result<(f64, f64, f64)> {
    check_two_classes(labels)?;
    let threshold = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::BestF1 => {
            let mut candidates: Vec<f64> = scores.to_vec();
            candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
            candidates.dedup();
            let mut best = (f64::NEG_INFINITY, candidates[0]);
            for &t in &candidates {
                let (tp, fp, _, fal_n) = confusion(scores, labels, t);
                let f1 = f1_of(tp, fp, fal_n);
                if f1 > best.0 || (f1 == best.0 && t < best.1) {
                    best = (f1, t);
                }
            }
            best.1
        }
    };
    let (tp, fp, tn, fal_n) = confusion(scores, labels, threshold);
    let acc = (tp + tn) as f64 / scores.len() as f64;
    Ok((acc, f1_of(tp, fp, fal_n), threshold))
}

/// Per-sample scores with all derived metrics and curve points.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub labels: Vec<bool>,
    pub raw: Vec<f64>,
    pub calibrated: Vec<f64>,
    pub auc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub threshold: f64,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

impl EvalReport {
    pub fn build(
        ids: Vec<String>,
        labels: Vec<bool>,
        raw: Vec<f64>,
        calibrated: Vec<f64>,
        policy: ThresholdPolicy,
    ) -> Result<Self> {
        let auc = roc_auc(&calibrated, &labels)?;
        let roc = roc_points(&calibrated, &labels)?;
        let pr = pr_points(&calibrated, &labels)?;
        let (accuracy, f1, threshold) = threshold_metrics(&calibrated, &labels, policy)?;
        Ok(EvalReport { ids, labels, raw, calibrated, auc, accuracy, f1, threshold, roc, pr })
    }

    /// Write scores.csv, metrics.txt, roc/pr CSVs and SVG curves into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("scores.csv"))?;
        writeln!(f, "path,label,raw,A")?;
        for i in 0..self.ids.len() {
            writeln!(
                f,
                "{},{},{},{}",
                self.ids[i],
                if self.labels[i] { 1 } else { 0 },
                self.raw[i],
                self.calibrated[i]
            )?;
        }
        let mut f = std::fs::File::create(dir.join("metrics.txt"))?;
        writeln!(f, "auc={}", self.auc)?;
        writeln!(f, "acc={}", self.accuracy)?;
        writeln!(f, "f1={}", self.f1)?;
        writeln!(f, "threshold={}", self.threshold)?;
        writeln!(f, "samples={}", self.ids.len())?;

        let mut f = std::fs::File::create(dir.join("roc.csv"))?;
        writeln!(f, "threshold,fpr,tpr")?;
        for p in &self.roc {
            writeln!(f, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        let mut f = std::fs::File::create(dir.join("pr.csv"))?;
        writeln!(f, "threshold,recall,precision")?;
        for p in &self.pr {
            writeln!(f, "{},{},{}", p.threshold, p.recall, p.precision)?;
        }

        let roc_xy: Vec<(f64, f64)> = self.roc.iter().map(|p| (p.fpr, p.tpr)).collect();
        std::fs::write(
            dir.join("roc.svg"),
            plot::line_chart_svg("ROC", "FPR", "TPR", &[("model", &roc_xy)]),
        )?;
        let pr_xy: Vec<(f64, f64)> = self.pr.iter().map(|p| (p.recall, p.precision)).collect();
        std::fs::write(
            dir.join("pr.svg"),
            plot::line_chart_svg("Precision-Recall", "Recall", "Precision", &[("model", &pr_xy)]),
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Brute-force pairwise concordance oracle.
    fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            if !li {
                continue;
            }
            let _ = i;
            for (&sj, &lj) in scores.iter().zip(labels) {
                if lj {
                    continue;
                }
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn worked_four_sample_case() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.75);
        assert_eq!(auc_oracle(&scores, &labels), 0.75);
        // best-F1 policy picks the threshold at 0.35: acc 3/4, F1 0.8
        let (acc, f1, thr) = threshold_metrics(&scores, &labels, ThresholdPolicy::BestF1).unwrap();
        assert_eq!(thr, 0.35);
        assert!((acc - 0.75).abs() < 1e-12);
        assert!((f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_and_all_ties() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
        let (acc, f1, _) = threshold_metrics(&[0.1, 0.2, 0.8, 0.9], &labels, ThresholdPolicy::BestF1).unwrap();
        assert_eq!((acc, f1), (1.0, 1.0));
    }

    #[test]
    fn single_class_rejected() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn rank_estimator_vs_oracle_and_trapezoid_on_random_instances() {
        let mut r = crate::rng::rng(0, 0x4d31, 0);
        for case in 0..200 {
            let n = 2 + case % 60;
            let mut scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 8.0).round() / 8.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
            labels[0] = true;
            labels[1] = false;
            scores[0] = 0.99; // keep valid after rounding collisions
            let auc = roc_auc(&scores, &labels).unwrap();
            let oracle = auc_oracle(&scores, &labels);
            assert!((auc - oracle).abs() < 1e-12, "case {case}: {auc} vs {oracle}");
            let trap = auc_trapezoid(&roc_points(&scores, &labels).unwrap());
            assert!((auc - trap).abs() < 1e-12, "case {case}: {auc} vs trapezoid {trap}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut r = crate::rng::rng(0, 0x4d32, 0);
        let scores: Vec<f64> = (0..50).map(|_| r.random::<f64>()).collect();
        let labels: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-4.0 * (s - 0.3)).exp())).collect();
        let b = roc_auc(&squashed, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn roc_endpoints_and_boundary_threshold() {
        let scores = [0.2, 0.6, 0.4, 0.9];
        let labels = [false, true, false, true];
        let pts = roc_points(&scores, &labels).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        // predict-everything-abnormal: recall 1, precision = prevalence
        let pr = pr_points(&scores, &labels).unwrap();
        let last = pr.last().unwrap();
        assert_eq!(last.recall, 1.0);
        assert_eq!(last.precision, 0.5);
    }

    #[test]
    fn report_files_written(){
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport::build(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![false, false, true, true],
            vec![0.1, 0.4, 0.35, 0.8],
            vec![0.1, 0.4, 0.35, 0.8],
            ThresholdPolicy::BestF1,
        )
        .unwrap();
        report.write_files(dir.path()).unwrap();
        for name in ["scores.csv", "metrics.txt", "roc.csv", "pr.csv", "roc.svg", "pr.svg"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
        for key in ["auc=", "acc=", "f1="] {
            assert!(metrics.contains(key), "{key} missing in metrics.txt");
        }
        let svg = std::fs::read_to_string(dir.path().join("roc.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}

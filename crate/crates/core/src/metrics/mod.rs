//! Segmentation quality metrics and cohort aggregation.

mod skeleton;

use std::collections::BTreeMap;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::inference::{binarize, EvalMode, PredictionVolume};
use crate::volume::SubjectRecord;
use crate::{Error, Result};

pub use skeleton::{is_simple, skeletonize3d};

/// Threshold used for the binary vessel and brain masks behind clDice and brain DSC.
pub const BINARY_THRESHOLD: f64 = 0.5;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(b, a));
    }
    Ok(())
}

/// Dice similarity of two binary masks (non-zero is foreground); 1 when both are empty.
pub fn dsc(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let (mut np, mut ng, mut inter) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        np += u64::from(p);
        ng += u64::from(g);
        inter += u64::from(p && g);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok((2 * inter) as f64 / (np + ng) as f64)
}

/// Cumulative (threshold, tp, fp) after each group of equal probabilities, in
/// descending threshold order, plus the positive count.
fn threshold_groups(prob: &[f32], gt: &[u8]) -> Result<(Vec<(f32, u64, u64)>, u64)> {
    check_len(prob.len(), gt.len())?;
    if let Some(p) = prob.iter().find(|p| p.is_nan()) {
        return Err(Error::Numerical(format!("probability grid contains {p}")));
    }
    let positives = gt.iter().filter(|&&g| g != 0).count() as u64;
    if positives == 0 {
        return Err(Error::Empty("ground truth has no positive voxels".into()));
    }
    let mut order: Vec<usize> = (0..prob.len()).collect();
    order.sort_unstable_by(|&a, &b| prob[b].total_cmp(&prob[a]));
    let mut groups = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = prob[order[i]];
        while i < order.len() && prob[order[i]] == t {
            if gt[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        groups.push((t, tp, fp));
    }
    Ok((groups, positives))
}

/// Area under the precision-recall curve over every distinct probability threshold.
pub fn average_precision(prob: &[f32], gt: &[u8]) -> Result<f64> {
    let (groups, positives) = threshold_groups(prob, gt)?;
    let mut ap = 0.0;
    let mut prev_tp = 0u64;
    for (_, tp, fp) in groups {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += precision * ((tp - prev_tp) as f64 / positives as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// Best F1 over all distinct thresholds (foreground is `prob >= threshold`).
/// Ties resolve to the smallest threshold.
pub fn max_f1(prob: &[f32], gt: &[u8]) -> Result<(f64, f32)> {
    let (groups, positives) = threshold_groups(prob, gt)?;
    let mut best = (-1.0, f32::INFINITY);
    for (t, tp, fp) in groups {
        let fn_ = positives - tp;
        let f1 = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

fn count(m: &Array3<u8>) -> usize {
    m.iter().filter(|&&v| v != 0).count()
}

fn overlap(a: &Array3<u8>, b: &Array3<u8>) -> usize {
    a.iter().zip(b.iter()).filter(|(&x, &y)| x != 0 && y != 0).count()
}

/// Centreline Dice. 1 when both masks are empty, 0 when exactly one skeleton is empty.
pub fn cl_dice(pred: &Array3<u8>, gt: &Array3<u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(gt.dim(), pred.dim()));
    }
    if count(pred) == 0 && count(gt) == 0 {
        return Ok(1.0);
    }
    let (sp, sg) = (skeletonize3d(pred), skeletonize3d(gt));
    let (np, ng) = (count(&sp), count(&sg));
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let tprec = overlap(&sp, gt) as f64 / np as f64;
    let tsens = overlap(&sg, pred) as f64 / ng as f64;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// Metrics for one subject under one evaluation mode. Fields are `None` when the
/// model lacks the corresponding head or the ground truth makes the metric undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub fold: usize,
    pub mode: EvalMode,
    pub vessel_ap: Option<f64>,
    pub vessel_f1: Option<f64>,
    pub vessel_f1_threshold: Option<f32>,
    pub vessel_cldice: Option<f64>,
    pub brain_dsc: Option<f64>,
}

pub fn evaluate_subject(pred: &PredictionVolume, rec: &SubjectRecord, fold: usize, mode: EvalMode) -> Result<SubjectMetrics> {
    let mut m = SubjectMetrics {
        id: rec.id.clone(),
        fold,
        mode,
        vessel_ap: None,
        vessel_f1: None,
        vessel_f1_threshold: None,
        vessel_cldice: None,
        brain_dsc: None,
    };
    if let Some(v) = &pred.vessel {
        if !v.same_geometry(&rec.vessel) {
            return Err(Error::shape(rec.vessel.shape(), v.shape()));
        }
        if rec.vessel.count() == 0 {
            log::warn!("{}: empty vessel ground truth, skipping AP and F1", rec.id);
        } else {
            m.vessel_ap = Some(average_precision(v.as_slice(), rec.vessel.as_slice())?);
            let (f1, t) = max_f1(v.as_slice(), rec.vessel.as_slice())?;
            m.vessel_f1 = Some(f1);
            m.vessel_f1_threshold = Some(t);
        }
        m.vessel_cldice = Some(cl_dice(binarize(v, BINARY_THRESHOLD).data(), rec.vessel.data())?);
    }
    if let Some(b) = &pred.brain {
        if !b.same_geometry(&rec.brain) {
            return Err(Error::shape(rec.brain.shape(), b.shape()));
        }
        m.brain_dsc = Some(dsc(binarize(b, BINARY_THRESHOLD).as_slice(), rec.brain.as_slice())?);
    }
    Ok(m)
}

/// Mean and sample standard deviation across folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n_folds: usize,
}

/// Averages within each fold, then reports mean and sample std of the fold means
/// (std is 0 for a single fold). `None` for no values.
pub fn fold_mean_std(values: impl IntoIterator<Item = (usize, f64)>) -> Option<MeanStd> {
    let mut per_fold: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (fold, v) in values {
        let e = per_fold.entry(fold).or_default();
        e.0 += v;
        e.1 += 1;
    }
    if per_fold.is_empty() {
        return None;
    }
    let means: Vec<f64> = per_fold.values().map(|(s, n)| s / *n as f64).collect();
    let n = means.len();
    let mean = means.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n_folds: n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: EvalMode,
    pub n_subjects: usize,
    pub vessel_map: Option<MeanStd>,
    pub vessel_f1: Option<MeanStd>,
    pub vessel_cldice: Option<MeanStd>,
    pub brain_dsc: Option<MeanStd>,
}

/// Per-subject metrics and their per-mode summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subjects: Vec<SubjectMetrics>,
    pub summary: Vec<ModeSummary>,
}

impl MetricsReport {
    pub fn from_subjects(mut subjects: Vec<SubjectMetrics>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Empty("no subjects to summarise".into()));
        }
        subjects.sort_by(|a, b| (a.mode, a.fold, &a.id).cmp(&(b.mode, b.fold, &b.id)));
        let mut modes: Vec<EvalMode> = subjects.iter().map(|s| s.mode).collect();
        modes.dedup();
        let summary = modes
            .into_iter()
            .map(|mode| {
                let rows: Vec<&SubjectMetrics> = subjects.iter().filter(|s| s.mode == mode).collect();
                let agg = |f: fn(&SubjectMetrics) -> Option<f64>| fold_mean_std(rows.iter().filter_map(|s| f(s).map(|v| (s.fold, v))));
                ModeSummary {
                    mode,
                    n_subjects: rows.len(),
                    vessel_map: agg(|s| s.vessel_ap),
                    vessel_f1: agg(|s| s.vessel_f1),
                    vessel_cldice: agg(|s| s.vessel_cldice),
                    brain_dsc: agg(|s| s.brain_dsc),
                }
            })
            .collect();
        Ok(Self { subjects, summary })
    }

    /// Combines reports (for example one per fold or per mode).
    pub fn merge(reports: impl IntoIterator<Item = MetricsReport>) -> Result<Self> {
        Self::from_subjects(reports.into_iter().flat_map(|r| r.subjects).collect())
    }

    pub fn mode(&self, mode: EvalMode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    /// Markdown table with mAP, F1 and clDice for BM then NBM, followed by brain DSC.
    pub fn to_markdown(&self, label: &str) -> String {
        let cell = |m: Option<MeanStd>| match m {
            Some(m) => format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std),
            None => "n/a".to_string(),
        };
        let mut out = String::from(
            "| Model | BM mAP (%) | BM F1 (%) | BM clDice (%) | NBM mAP (%) | NBM F1 (%) | NBM clDice (%) | Brain DSC (%) |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        out.push_str(&format!("| {label} "));
        for mode in [EvalMode::BM, EvalMode::NBM] {
            let s = self.mode(mode);
            for f in [
                |s: &ModeSummary| s.vessel_map,
                |s: &ModeSummary| s.vessel_f1,
                |s: &ModeSummary| s.vessel_cldice,
            ] {
                out.push_str(&format!("| {} ", cell(s.and_then(f))));
            }
        }
        let brain = self.mode(EvalMode::NBM).or_else(|| self.summary.first()).and_then(|s| s.brain_dsc);
        out.push_str(&format!("| {} |\n", cell(brain)));
        out
    }
}

/// A prediction paired with its ground truth and the fold it was held out in.
pub struct CohortItem<'a> {
    pub fold: usize,
    pub prediction: &'a PredictionVolume,
    pub record: &'a SubjectRecord,
}

/// Evaluates every subject (in parallel) and aggregates per fold, then across folds.
pub fn evaluate_cohort(items: &[CohortItem<'_>], mode: EvalMode) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Empty("no predictions to evaluate".into()));
    }
    let subjects = items
        .par_iter()
        .map(|it| evaluate_subject(it.prediction, it.record, it.fold, mode))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_subjects(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsc_closed_forms() {
        assert_eq!(dsc(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(dsc(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(dsc(&[1, 1, 0, 0], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(dsc(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(dsc(&[0], &[0, 0]).is_err());
    }

    #[test]
    fn ap_and_f1_worked_example() {
        let gt = [1, 0, 1, 0];
        let p = [0.9, 0.8, 0.7, 0.1];
        assert!((average_precision(&p, &gt).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(max_f1(&p, &gt).unwrap(), (0.8, 0.7));
    }

    #[test]
    fn perfect_separation_scores_one() {
        let gt = [0, 1, 0, 1, 1];
        let p = [0.1, 0.8, 0.2, 0.9, 0.7];
        assert_eq!(average_precision(&p, &gt).unwrap(), 1.0);
        assert_eq!(max_f1(&p, &gt).unwrap(), (1.0, 0.7));
    }

    #[test]
    fn ties_form_one_threshold() {
        // One group holding both classes: precision 0.5 at recall 1.
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(max_f1(&[0.5, 0.5], &[1, 0]).unwrap(), (2.0 / 3.0, 0.5));
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        assert!(matches!(average_precision(&[0.2], &[0]), Err(Error::Empty(_))));
        assert!(matches!(max_f1(&[0.2], &[0]), Err(Error::Empty(_))));
    }

    #[test]
    fn fold_aggregation_uses_sample_std() {
        let m = fold_mean_std([(0, 0.7), (0, 0.8), (1, 0.85)]).unwrap();
        assert!((m.mean - 0.8).abs() < 1e-12);
        assert!((m.std - 0.1f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(fold_mean_std([(3, 0.5)]).unwrap().std, 0.0);
        assert!(fold_mean_std(std::iter::empty()).is_none());
    }

    #[test]
    fn cl_dice_conventions() {
        let empty = Array3::<u8>::zeros((3, 3, 3));
        let mut dot = empty.clone();
        dot[[1, 1, 1]] = 1;
        assert_eq!(cl_dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(cl_dice(&dot, &empty).unwrap(), 0.0);
        assert_eq!(cl_dice(&dot, &dot).unwrap(), 1.0);
    }

    #[test]
    fn cl_dice_half_covered_centreline() {
        // gt: a line of 8 voxels; pred covers its first 4. skel(pred) lies in gt,
        // half of skel(gt) lies in pred.
        let mut gt = Array3::<u8>::zeros((10, 3, 3));
        for i in 1..9 {
            gt[[i, 1, 1]] = 1;
        }
        let mut pred = Array3::<u8>::zeros((10, 3, 3));
        for i in 1..5 {
            pred[[i, 1, 1]] = 1;
        }
        assert!((cl_dice(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((cl_dice(&gt, &pred).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn markdown_has_both_modes() {
        let row = |mode, fold, ap| SubjectMetrics {
            id: format!("s{fold}"),
            fold,
            mode,
            vessel_ap: Some(ap),
            vessel_f1: Some(ap),
            vessel_f1_threshold: Some(0.5),
            vessel_cldice: Some(ap),
            brain_dsc: Some(0.9),
        };
        let r = MetricsReport::from_subjects(vec![
            row(EvalMode::NBM, 0, 0.75),
            row(EvalMode::NBM, 1, 0.85),
            row(EvalMode::BM, 0, 0.8),
        ])
        .unwrap();
        let nbm = r.mode(EvalMode::NBM).unwrap().vessel_map.unwrap();
        assert!((nbm.mean - 0.8).abs() < 1e-12 && (nbm.std - 0.0707).abs() < 1e-4);
        let md = r.to_markdown("joint");
        assert!(md.contains("80.00 ± 7.07") && md.contains("BM clDice"));
    }
}

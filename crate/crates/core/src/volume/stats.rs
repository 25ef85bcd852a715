//! Cohort-level preprocessing statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normalize::mean_std;
use super::SubjectRecord;
use crate::error::{Error, Result};

/// Statistics of a training cohort used to preprocess every subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub median_spacing: [f64; 3],
    /// 0.5th percentile of z-scored intensities at vessel voxels.
    pub vessel_clip_lo: f64,
    /// 99.5th percentile of z-scored intensities at vessel voxels.
    pub vessel_clip_hi: f64,
    /// Mean and standard deviation of all z-scored, clipped intensities.
    pub global_mean: f64,
    pub global_std: f64,
}

/// Percentile `q` in [0, 100] of ascending `sorted` with linear interpolation between ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let w = pos - i as f64;
    sorted[i] * (1.0 - w) + sorted[j] * w
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    percentile(&v, 50.0)
}

/// Z-scored image intensities of one subject, in voxel order.
fn zscored(rec: &SubjectRecord) -> Result<Vec<f64>> {
    let img = rec.image.as_slice();
    let (m, s) = mean_std(img.iter().map(|&v| v as f64));
    if !(s > 0.0) {
        return Err(Error::InvalidVolume(format!("{}: constant image", rec.id)));
    }
    // Round through f32 so statistics see exactly the values `normalize` produces.
    Ok(img.iter().map(|&v| ((v as f64 - m) / s) as f32 as f64).collect())
}

/// Median spacing, pooled vessel-voxel clip percentiles and global intensity statistics.
pub fn compute_cohort_stats(train: &[SubjectRecord]) -> Result<CohortStats> {
    if train.is_empty() {
        return Err(Error::Empty("training cohort has no subjects".into()));
    }
    let median_spacing = std::array::from_fn(|a| median(train.iter().map(|r| r.image.spacing()[a]).collect()));

    let z: Vec<Vec<f64>> = train.par_iter().map(zscored).collect::<Result<_>>()?;
    let mut pooled: Vec<f64> = train
        .iter()
        .zip(&z)
        .flat_map(|(rec, zs)| {
            rec.vessel
                .as_slice()
                .iter()
                .zip(zs)
                .filter(|(&l, _)| l != 0)
                .map(|(_, &v)| v)
        })
        .collect();
    if pooled.is_empty() {
        return Err(Error::Empty("training cohort has no vessel voxels".into()));
    }
    pooled.sort_by(f64::total_cmp);
    let lo = percentile(&pooled, 0.5);
    let hi = percentile(&pooled, 99.5);
    if !(lo < hi) {
        return Err(Error::Numerical(format!("degenerate vessel intensity range [{lo}, {hi}]")));
    }

    let clipped = z.iter().flatten().map(|&v| (v as f32).clamp(lo as f32, hi as f32) as f64);
    let (global_mean, global_std) = mean_std(clipped);
    if !(global_std > 0.0) {
        return Err(Error::Numerical("zero global intensity spread".into()));
    }
    Ok(CohortStats {
        median_spacing,
        vessel_clip_lo: lo,
        vessel_clip_hi: hi,
        global_mean,
        global_std,
    })
}

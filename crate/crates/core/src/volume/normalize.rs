//! Intensity normalization: per-image z-score, vessel-percentile clipping, cohort z-score.

use ndarray::Array3;

use super::{resample_label, resample_to_spacing, CohortStats, SubjectRecord, Volume};
use crate::error::{Error, Result};

/// Point in the normalization pipeline at which to stop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeStage {
    ZScore,
    Clip,
    Global,
}

/// Mean and population standard deviation, accumulated in double precision.
pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0f64), |(n, s), v| (n + 1, s + v));
    let mean = sum / n.max(1) as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
    (mean, var.sqrt())
}

fn zscore_array(data: &Array3<f32>) -> Result<Array3<f32>> {
    let (mean, std) = mean_std(data.iter().map(|&v| v as f64));
    if !(std > 0.0) {
        return Err(Error::InvalidVolume("constant image cannot be z-scored".into()));
    }
    Ok(data.mapv(|v| ((v as f64 - mean) / std) as f32))
}

/// Per-image z-score.
pub fn zscore(vol: &Volume) -> Result<Volume> {
    Volume::like(zscore_array(vol.data())?, vol)
}

/// Runs the normalization pipeline up to and including `stage`.
pub fn normalize_to(vol: &Volume, stats: &CohortStats, stage: NormalizeStage) -> Result<Volume> {
    let mut data = zscore_array(vol.data())?;
    if stage != NormalizeStage::ZScore {
        let (lo, hi) = (stats.vessel_clip_lo as f32, stats.vessel_clip_hi as f32);
        data.mapv_inplace(|v| v.clamp(lo, hi));
    }
    if stage == NormalizeStage::Global {
        let (m, s) = (stats.global_mean, stats.global_std);
        data.mapv_inplace(|v| ((v as f64 - m) / s) as f32);
    }
    Volume::like(data, vol)
}

/// Z-score, clip to the cohort vessel percentiles, then standardize with cohort statistics.
pub fn normalize(vol: &Volume, stats: &CohortStats) -> Result<Volume> {
    normalize_to(vol, stats, NormalizeStage::Global)
}

/// Resamples a subject to the cohort median spacing and normalizes its image.
pub fn preprocess(rec: &SubjectRecord, stats: &CohortStats) -> Result<SubjectRecord> {
    let image = normalize(&resample_to_spacing(&rec.image, stats.median_spacing)?, stats)?;
    let brain = resample_label(&rec.brain, stats.median_spacing)?;
    let vessel = resample_label(&rec.vessel, stats.median_spacing)?;
    SubjectRecord::new(rec.id.clone(), image, brain, vessel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Volume {
        let data = Array3::from_shape_fn((n, n + 1, n + 2), |(i, j, k)| (i * 7 + j * 3 + k) as f32 * 0.25 + 10.0);
        Volume::new(data, [1.0; 3], [0.0; 3]).unwrap()
    }

    fn stats() -> CohortStats {
        CohortStats {
            median_spacing: [1.0; 3],
            vessel_clip_lo: -1.0,
            vessel_clip_hi: 1.5,
            global_mean: 0.2,
            global_std: 0.8,
        }
    }

    #[test]
    fn zscore_has_zero_mean_unit_std() {
        let z = zscore(&ramp(6)).unwrap();
        let (m, s) = mean_std(z.data().iter().map(|&v| v as f64));
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6, "{m} {s}");
    }

    #[test]
    fn clip_bounds_values_before_global_step() {
        let v = ramp(5);
        let z = normalize_to(&v, &stats(), NormalizeStage::ZScore).unwrap();
        let c = normalize_to(&v, &stats(), NormalizeStage::Clip).unwrap();
        for (a, b) in z.data().iter().zip(c.data()) {
            if *a > 1.5 {
                assert_eq!(*b, 1.5);
            } else if *a < -1.0 {
                assert_eq!(*b, -1.0);
            } else {
                assert_eq!(a, b);
            }
        }
        let g = normalize(&v, &stats()).unwrap();
        for (a, b) in c.data().iter().zip(g.data()) {
            assert!((b - (a - 0.2) / 0.8).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_is_rejected() {
        let v = Volume::new(Array3::from_elem((3, 3, 3), 4.0), [1.0; 3], [0.0; 3]).unwrap();
        assert!(zscore(&v).is_err());
        assert!(normalize(&v, &stats()).is_err());
    }

    #[test]
    fn normalize_is_deterministic() {
        let v = ramp(4);
        assert_eq!(normalize(&v, &stats()).unwrap(), normalize(&v, &stats()).unwrap());
    }
}

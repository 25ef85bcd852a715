//! Whole-volume prediction by Gaussian-weighted sliding windows, and the
//! brain-masked (BM) / unmasked (NBM) evaluation pathways.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, softmax, ModelParams};
use crate::nn::Tensor;
use crate::volume::{normalize, resample_onto, resample_to_spacing, CohortStats, LabelVolume, SubjectRecord, Volume};

/// Default fractional overlap between neighbouring tiles.
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Foreground probabilities per head, on the grid of the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVolume {
    pub vessel: Option<Volume>,
    pub brain: Option<Volume>,
}

/// Foreground probabilities of one patch, flattened `[x, y, z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProbs {
    pub vessel: Option<Vec<f32>>,
    pub brain: Option<Vec<f32>>,
}

/// Tile origins along one axis of length `n` for windows of length `p`.
/// The last tile is clamped to the boundary so every voxel is covered.
pub fn tile_starts(n: usize, p: usize, overlap: f64) -> Vec<usize> {
    if n <= p {
        return vec![0];
    }
    let stride = ((p as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + p < n).collect();
    starts.push(n - p);
    starts.dedup();
    starts
}

/// Separable Gaussian blending weights with sigma = patch / 8, peak 1.
pub fn gaussian_window(patch: [usize; 3]) -> Vec<f64> {
    let axis = |p: usize| -> Vec<f64> {
        let sigma = p as f64 / 8.0;
        let c = (p as f64 - 1.0) / 2.0;
        (0..p).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (a, b, c) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut w = Vec::with_capacity(patch.iter().product());
    for x in &a {
        for y in &b {
            for z in &c {
                w.push(x * y * z);
            }
        }
    }
    // Truncate the far tail so corners keep a usable weight.
    let floor = w.iter().cloned().fold(f64::INFINITY, f64::min).max(1e-6);
    w.iter_mut().for_each(|v| *v = v.max(floor));
    w
}

fn extract(img: &Array3<f32>, start: [usize; 3], patch: [usize; 3], pad: [usize; 3]) -> Tensor {
    let shape = img.dim();
    let shape = [shape.0, shape.1, shape.2];
    let mut data = Vec::with_capacity(patch.iter().product());
    for i in 0..patch[0] {
        for j in 0..patch[1] {
            for k in 0..patch[2] {
                let pos = [start[0] + i, start[1] + j, start[2] + k];
                let src: [usize; 3] =
                    std::array::from_fn(|a| (pos[a] as isize - pad[a] as isize).clamp(0, shape[a] as isize - 1) as usize);
                data.push(img[src]);
            }
        }
    }
    Tensor::from_vec([1, patch[0], patch[1], patch[2]], data)
}

/// Sliding-window aggregation of any patch predictor.
///
/// Volumes smaller than the patch are edge-padded, predicted and cropped.
/// Weighted sums are accumulated in `f64` in a fixed tile order.
pub fn sliding_window<F>(vol: &Volume, patch: [usize; 3], overlap: f64, predict: F) -> Result<PredictionVolume>
where
    F: Fn(&Tensor) -> Result<PatchProbs> + Sync,
{
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must be in [0, 1), got {overlap}")));
    }
    let shape = vol.shape();
    let padded: [usize; 3] = std::array::from_fn(|a| shape[a].max(patch[a]));
    let pad: [usize; 3] = std::array::from_fn(|a| (padded[a] - shape[a]) / 2);
    let starts: Vec<[usize; 3]> = {
        let s: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(padded[a], patch[a], overlap));
        let mut v = Vec::new();
        for &x in &s[0] {
            for &y in &s[1] {
                for &z in &s[2] {
                    v.push([x, y, z]);
                }
            }
        }
        v
    };
    let window = gaussian_window(patch);
    let preds: Vec<PatchProbs> = starts
        .par_iter()
        .map(|&st| predict(&extract(vol.data(), st, patch, pad)))
        .collect::<Result<_>>()?;

    let n: usize = padded.iter().product();
    let mut weight = vec![0.0f64; n];
    let mut vessel: Option<Vec<f64>> = None;
    let mut brain: Option<Vec<f64>> = None;
    for (st, p) in starts.iter().zip(&preds) {
        let mut idx = 0;
        for i in 0..patch[0] {
            for j in 0..patch[1] {
                let row = ((st[0] + i) * padded[1] + st[1] + j) * padded[2] + st[2];
                for k in 0..patch[2] {
                    let w = window[idx];
                    weight[row + k] += w;
                    if let Some(v) = &p.vessel {
                        vessel.get_or_insert_with(|| vec![0.0; n])[row + k] += w * v[idx] as f64;
                    }
                    if let Some(b) = &p.brain {
                        brain.get_or_insert_with(|| vec![0.0; n])[row + k] += w * b[idx] as f64;
                    }
                    idx += 1;
                }
            }
        }
    }
    let finish = |acc: Vec<f64>| -> Result<Volume> {
        let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
            let at = ((i + pad[0]) * padded[1] + j + pad[1]) * padded[2] + k + pad[2];
            (acc[at] / weight[at]).clamp(0.0, 1.0) as f32
        });
        Volume::like(data, vol)
    };
    Ok(PredictionVolume {
        vessel: vessel.map(finish).transpose()?,
        brain: brain.map(finish).transpose()?,
    })
}

/// Foreground probabilities of `model` on one patch.
pub fn predict_patch(model: &ModelParams, patch: &Tensor) -> Result<PatchProbs> {
    let pred = forward(model, patch)?;
    let fg = |t: Option<Tensor>| -> Result<Option<Vec<f32>>> {
        t.map(|l| softmax(&l).map(|p| p.channel(1).to_vec())).transpose()
    };
    Ok(PatchProbs {
        vessel: fg(pred.vessel_logits)?,
        brain: fg(pred.brain_logits)?,
    })
}

pub fn sliding_window_predict(model: &ModelParams, vol: &Volume, overlap: f64) -> Result<PredictionVolume> {
    sliding_window(vol, model.config.patch_size, overlap, |p| predict_patch(model, p))
}

/// Predicts a raw image: resamples and normalises it with `stats` (when given),
/// runs the sliding window, and maps the probabilities back onto the input grid.
pub fn predict_image(model: &ModelParams, stats: Option<&CohortStats>, image: &Volume, overlap: f64) -> Result<PredictionVolume> {
    let Some(stats) = stats else {
        return sliding_window_predict(model, image, overlap);
    };
    let prepared = normalize(&resample_to_spacing(image, stats.median_spacing)?, stats)?;
    let pred = sliding_window_predict(model, &prepared, overlap)?;
    let back = |v: Option<Volume>| v.map(|v| resample_onto(&v, image)).transpose();
    Ok(PredictionVolume {
        vessel: back(pred.vessel)?,
        brain: back(pred.brain)?,
    })
}

/// Voxels with probability `>= threshold` become foreground.
pub fn binarize(prob: &Volume, threshold: f64) -> LabelVolume {
    let t = threshold as f32;
    LabelVolume::like(prob.data().mapv(|p| u8::from(p >= t)), prob).expect("geometry already validated")
}

/// Zeroes vessel probabilities outside `mask`; brain probabilities are untouched.
pub fn apply_brain_mask(pred: &PredictionVolume, mask: &LabelVolume) -> Result<PredictionVolume> {
    let vessel = match &pred.vessel {
        Some(v) => {
            if v.shape() != mask.shape() {
                return Err(Error::shape(v.shape(), mask.shape()));
            }
            let mut data = v.data().clone();
            data.zip_mut_with(mask.data(), |p, &m| {
                if m == 0 {
                    *p = 0.0;
                }
            });
            Some(Volume::like(data, v)?)
        }
        None => None,
    };
    Ok(PredictionVolume {
        vessel,
        brain: pred.brain.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalMode {
    /// Vessel predictions restricted to a brain mask.
    BM,
    /// Raw whole-volume vessel predictions.
    NBM,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BM" => Ok(EvalMode::BM),
            "NBM" => Ok(EvalMode::NBM),
            _ => Err(Error::Config(format!("unknown evaluation mode {s:?} (expected BM or NBM)"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::BM => "BM",
            EvalMode::NBM => "NBM",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Predicted,
    GroundTruth,
}

#[derive(Clone, Debug)]
pub struct ModePredictions {
    pub nbm: PredictionVolume,
    pub bm: PredictionVolume,
    /// Brain mask applied to obtain `bm`.
    pub mask: LabelVolume,
    pub mask_source: MaskSource,
}

/// NBM prediction plus its BM counterpart, masked by the model's own brain
/// prediction when it has a brain head and by the ground-truth brain otherwise.
pub fn evaluate_modes(model: &ModelParams, stats: Option<&CohortStats>, rec: &SubjectRecord, overlap: f64) -> Result<ModePredictions> {
    let nbm = predict_image(model, stats, &rec.image, overlap)?;
    masked_modes(nbm, rec)
}

/// Whether `bm` is exactly zero outside `mask` and bit-identical to `nbm` inside it.
pub fn masking_invariant_holds(nbm: &PredictionVolume, bm: &PredictionVolume, mask: &LabelVolume) -> bool {
    match (&nbm.vessel, &bm.vessel) {
        (Some(n), Some(b)) => {
            n.shape() == mask.shape()
                && b.shape() == mask.shape()
                && n.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .zip(mask.as_slice())
                    .all(|((&n, &b), &m)| if m == 0 { b == 0.0 } else { b.to_bits() == n.to_bits() })
        }
        (None, None) => true,
        _ => false,
    }
}

/// BM/NBM pair from an existing NBM prediction.
pub fn masked_modes(nbm: PredictionVolume, rec: &SubjectRecord) -> Result<ModePredictions> {
    let (mask, mask_source) = match &nbm.brain {
        Some(b) => (binarize(b, 0.5), MaskSource::Predicted),
        None => {
            log::warn!("{}: model has no brain head; BM uses the ground-truth brain mask", rec.id);
            (rec.brain.clone(), MaskSource::GroundTruth)
        }
    };
    let bm = apply_brain_mask(&nbm, &mask)?;
    Ok(ModePredictions {
        nbm,
        bm,
        mask,
        mask_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 3]) -> Volume {
        let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| (i + j + k) as f32);
        Volume::new(data, [1.0; 3], [0.0; 3]).unwrap()
    }

    fn constant(p: f32) -> impl Fn(&Tensor) -> Result<PatchProbs> + Sync {
        move |t: &Tensor| {
            Ok(PatchProbs {
                vessel: Some(vec![p; t.voxels()]),
                brain: None,
            })
        }
    }

    #[test]
    fn tile_origins() {
        assert_eq!(tile_starts(96, 64, 0.5), vec![0, 32]);
        assert_eq!(tile_starts(64, 64, 0.5), vec![0]);
        assert_eq!(tile_starts(10, 64, 0.5), vec![0]);
        assert_eq!(tile_starts(100, 64, 0.5), vec![0, 32, 36]);
        assert_eq!(tile_starts(70, 8, 0.0), (0..8).map(|i| i * 8).chain([62]).collect::<Vec<_>>());
    }

    #[test]
    fn constant_predictor_gives_constant_volume() {
        for overlap in [0.0, 0.25, 0.5, 0.75] {
            for shape in [[9, 13, 5], [3, 3, 3], [16, 8, 12]] {
                let out = sliding_window(&vol(shape), [8, 8, 4], overlap, constant(0.3)).unwrap();
                let v = out.vessel.unwrap();
                assert_eq!(v.shape(), shape);
                assert!(v.data().iter().all(|&x| (x - 0.3).abs() < 1e-6));
                assert!(out.brain.is_none());
            }
        }
    }

    #[test]
    fn identity_predictor_reproduces_the_input_everywhere() {
        // Predicting each voxel's own value checks that tiles land where they were cut.
        let v = vol([11, 7, 9]);
        let scale = 1.0 / 30.0;
        let out = sliding_window(&v, [4, 4, 4], 0.5, |t| {
            Ok(PatchProbs {
                vessel: Some(t.data().iter().map(|x| x * scale).collect()),
                brain: None,
            })
        })
        .unwrap();
        for (a, b) in out.vessel.unwrap().data().iter().zip(v.data()) {
            assert!((a - b * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn binarize_tie_rule() {
        let p = Volume::new(Array3::from_elem((2, 2, 2), 0.4), [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(binarize(&p, 0.5).count(), 0);
        let p = Volume::new(Array3::from_elem((2, 2, 2), 0.5), [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(binarize(&p, 0.5).count(), 8);
        let b = binarize(&p, 0.5);
        let as_prob = Volume::like(b.data().mapv(f32::from), &b).unwrap();
        assert_eq!(binarize(&as_prob, 0.5), b);
    }

    #[test]
    fn masking_contract() {
        let v = Volume::new(Array3::from_shape_fn((3, 3, 3), |(i, _, _)| 0.2 * i as f32 + 0.1), [1.0; 3], [0.0; 3]).unwrap();
        let pred = PredictionVolume {
            vessel: Some(v.clone()),
            brain: Some(v.clone()),
        };
        let ones = LabelVolume::new(Array3::from_elem((3, 3, 3), 1), [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(apply_brain_mask(&pred, &ones).unwrap(), pred);
        let zeros = LabelVolume::new(Array3::zeros((3, 3, 3)), [1.0; 3], [0.0; 3]).unwrap();
        let m = apply_brain_mask(&pred, &zeros).unwrap();
        assert!(m.vessel.unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(m.brain, pred.brain);
        let bad = LabelVolume::new(Array3::zeros((3, 3, 2)), [1.0; 3], [0.0; 3]).unwrap();
        assert!(apply_brain_mask(&pred, &bad).is_err());
    }

    #[test]
    fn window_is_positive_and_peaks_in_the_centre() {
        let w = gaussian_window([8, 8, 8]);
        assert!(w.iter().all(|&x| x > 0.0));
        let max = w.iter().cloned().fold(0.0, f64::max);
        assert!((w[(3 * 8 + 3) * 8 + 3] - max).abs() < 1e-12);
    }
}

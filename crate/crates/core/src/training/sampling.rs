//! Foreground-biased patch sampling and data augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::volume::SubjectRecord;

/// An image patch with its two label patches, all `[x, y, z]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTriple {
    pub image: Tensor,
    pub brain: Vec<u8>,
    pub vessel: Vec<u8>,
}

impl PatchTriple {
    pub fn shape(&self) -> [usize; 3] {
        self.image.spatial()
    }
}

/// Coordinates of every vessel voxel of `rec`.
pub fn vessel_voxels(rec: &SubjectRecord) -> Vec<[usize; 3]> {
    rec.vessel
        .data()
        .indexed_iter()
        .filter(|(_, &v)| v != 0)
        .map(|((i, j, k), _)| [i, j, k])
        .collect()
}

/// Start of the patch along one axis for a centre `c`, in coordinates of the
/// edge-padded axis of length `max(n, p)`.
pub fn patch_start(c: usize, n: usize, p: usize) -> usize {
    let m = n.max(p);
    let c = c + (m - n) / 2;
    c.saturating_sub(p / 2).min(m - p)
}

/// Crops the patch whose centre is `centre`. Images are edge-padded and labels
/// zero-padded where the volume is smaller than the patch.
pub fn crop(rec: &SubjectRecord, centre: [usize; 3], patch: [usize; 3]) -> PatchTriple {
    let shape = rec.image.shape();
    let start: [usize; 3] = std::array::from_fn(|a| patch_start(centre[a], shape[a], patch[a]));
    let pad: [usize; 3] = std::array::from_fn(|a| (shape[a].max(patch[a]) - shape[a]) / 2);
    let n = patch.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut brain = Vec::with_capacity(n);
    let mut vessel = Vec::with_capacity(n);
    let (img, b, v) = (rec.image.data(), rec.brain.data(), rec.vessel.data());
    for i in 0..patch[0] {
        for j in 0..patch[1] {
            for k in 0..patch[2] {
                let pos = [start[0] + i, start[1] + j, start[2] + k];
                let raw: [isize; 3] = std::array::from_fn(|a| pos[a] as isize - pad[a] as isize);
                let inside = (0..3).all(|a| raw[a] >= 0 && (raw[a] as usize) < shape[a]);
                let src: [usize; 3] = std::array::from_fn(|a| raw[a].clamp(0, shape[a] as isize - 1) as usize);
                image.push(img[src]);
                brain.push(if inside { b[src] } else { 0 });
                vessel.push(if inside { v[src] } else { 0 });
            }
        }
    }
    PatchTriple {
        image: Tensor::from_vec([1, patch[0], patch[1], patch[2]], image),
        brain,
        vessel,
    }
}

/// With probability `fg_bias` centres the patch on a uniformly drawn vessel voxel,
/// otherwise on a uniformly drawn voxel of the volume.
pub fn sample_patch<R: Rng>(rec: &SubjectRecord, patch: [usize; 3], fg_bias: f64, rng: &mut R) -> PatchTriple {
    sample_patch_from(rec, &vessel_voxels(rec), patch, fg_bias, rng)
}

/// [`sample_patch`] with a precomputed vessel voxel list.
pub fn sample_patch_from<R: Rng>(
    rec: &SubjectRecord,
    vessels: &[[usize; 3]],
    patch: [usize; 3],
    fg_bias: f64,
    rng: &mut R,
) -> PatchTriple {
    let shape = rec.image.shape();
    let centre = if !vessels.is_empty() && rng.random_bool(fg_bias.clamp(0.0, 1.0)) {
        vessels[rng.random_range(0..vessels.len())]
    } else {
        std::array::from_fn(|a| rng.random_range(0..shape[a]))
    };
    crop(rec, centre, patch)
}

/// Probabilities and ranges of the random augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Per-axis flip probability.
    pub p_flip: f64,
    /// Probability of a 90-degree multiple rotation in the axial (x, y) plane.
    pub p_rotate: f64,
    pub p_scale: f64,
    pub scale_range: [f64; 2],
    pub p_gamma: f64,
    pub gamma_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_rotate: 0.5,
            p_scale: 1.0,
            scale_range: [0.9, 1.1],
            p_gamma: 1.0,
            gamma_range: [0.8, 1.2],
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            p_flip: 0.0,
            p_rotate: 0.0,
            p_scale: 0.0,
            p_gamma: 0.0,
            ..Self::default()
        }
    }
}

fn remap<T: Copy>(src: &[T], shape: [usize; 3], out_shape: [usize; 3], map: impl Fn([usize; 3]) -> [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            for k in 0..out_shape[2] {
                let s = map([i, j, k]);
                out.push(src[(s[0] * shape[1] + s[1]) * shape[2] + s[2]]);
            }
        }
    }
    out
}

fn spatial(t: &mut PatchTriple, out_shape: [usize; 3], map: impl Fn([usize; 3]) -> [usize; 3] + Copy) {
    let shape = t.shape();
    let image = remap(t.image.data(), shape, out_shape, map);
    t.image = Tensor::from_vec([1, out_shape[0], out_shape[1], out_shape[2]], image);
    t.brain = remap(&t.brain, shape, out_shape, map);
    t.vessel = remap(&t.vessel, shape, out_shape, map);
}

/// Flips the patch along `axis`.
pub fn flip(t: &mut PatchTriple, axis: usize) {
    let n = t.shape();
    spatial(t, n, |mut p| {
        p[axis] = n[axis] - 1 - p[axis];
        p
    });
}

/// Rotates the patch by 90 degrees in the (x, y) plane. Requires equal x and y extents.
pub fn rotate90(t: &mut PatchTriple) {
    let n = t.shape();
    assert_eq!(n[0], n[1], "axial rotation needs a square axial extent");
    spatial(t, n, |[i, j, k]| [j, n[0] - 1 - i, k]);
}

/// Random flips, axial rotation, intensity scaling and gamma; labels only follow spatial ops.
pub fn augment<R: Rng>(mut t: PatchTriple, cfg: &AugmentConfig, rng: &mut R) -> PatchTriple {
    for axis in 0..3 {
        if rng.random_bool(cfg.p_flip) {
            flip(&mut t, axis);
        }
    }
    if rng.random_bool(cfg.p_rotate) {
        let n = t.shape();
        if n[0] == n[1] {
            for _ in 0..rng.random_range(1..4) {
                rotate90(&mut t);
            }
        } else {
            // Only the half turn keeps a non-square axial extent.
            flip(&mut t, 0);
            flip(&mut t, 1);
        }
    }
    if rng.random_bool(cfg.p_scale) {
        let s = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]) as f32;
        t.image.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    if rng.random_bool(cfg.p_gamma) {
        let g = rng.random_range(cfg.gamma_range[0]..=cfg.gamma_range[1]);
        let data = t.image.data_mut();
        let lo = data.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let range = hi - lo;
        if range > 0.0 {
            // Gamma acts on the patch rescaled to [0, 1], then the range is restored.
            data.iter_mut()
                .for_each(|v| *v = (lo + range * ((*v as f64 - lo) / range).powf(g)) as f32);
        }
    }
    t
}

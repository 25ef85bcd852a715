//! Resampling to a target voxel spacing.

use ndarray::{Array3, Axis};

use super::{Grid, LabelVolume, Volume};
use crate::error::{Error, Result};

fn out_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> Result<[usize; 3]> {
    if target.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
        return Err(Error::InvalidVolume(format!("target spacing must be positive, got {target:?}")));
    }
    Ok(std::array::from_fn(|a| ((shape[a] as f64 * spacing[a] / target[a]).round() as usize).max(1)))
}

/// Source coordinate of output sample `o` when `n_in` samples are stretched to `n_out`
/// (voxel centres aligned, edges preserved).
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    let x = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    x.clamp(0.0, (n_in - 1) as f64)
}

/// Linear interpolation along one axis.
fn linear_axis(data: &Array3<f32>, axis: usize, n_out: usize) -> Array3<f32> {
    let n_in = data.len_of(Axis(axis));
    if n_in == n_out {
        return data.clone();
    }
    let mut dim = data.raw_dim();
    dim[axis] = n_out;
    let mut out = Array3::<f32>::zeros(dim);
    let taps: Vec<(usize, usize, f64)> = (0..n_out)
        .map(|o| {
            let x = source_coord(o, n_in, n_out);
            let i = x.floor() as usize;
            let j = (i + 1).min(n_in - 1);
            (i, j, x - i as f64)
        })
        .collect();
    for (src, mut dst) in data.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        for (d, &(i, j, w)) in dst.iter_mut().zip(&taps) {
            *d = ((1.0 - w) * src[i] as f64 + w * src[j] as f64) as f32;
        }
    }
    out
}

fn nearest_axis(data: &Array3<u8>, axis: usize, n_out: usize) -> Array3<u8> {
    let n_in = data.len_of(Axis(axis));
    if n_in == n_out {
        return data.clone();
    }
    let idx: Vec<usize> = (0..n_out)
        .map(|o| (source_coord(o, n_in, n_out) + 0.5).floor().min((n_in - 1) as f64) as usize)
        .collect();
    data.select(Axis(axis), &idx)
}

fn resample_with<T: Clone>(
    grid: &Grid<T>,
    target: [f64; 3],
    axis_op: impl Fn(&Array3<T>, usize, usize) -> Array3<T>,
) -> Result<(Array3<T>, [f64; 3])> {
    let shape = out_shape(grid.shape(), grid.spacing(), target)?;
    let mut data = grid.data().clone();
    for (axis, &n) in shape.iter().enumerate() {
        data = axis_op(&data, axis, n);
    }
    Ok((data, target))
}

/// Trilinear resampling of an image; output shape per axis is `round(n * s / t)`, at least 1.
pub fn resample_to_spacing(vol: &Volume, target: [f64; 3]) -> Result<Volume> {
    let (data, spacing) = resample_with(vol, target, linear_axis)?;
    Volume::new(data, spacing, vol.origin())
}

/// Trilinear resampling of `vol` onto the shape and spacing of `like`, used to map
/// predictions made on a resampled grid back to the original one.
pub fn resample_onto<U>(vol: &Volume, like: &Grid<U>) -> Result<Volume> {
    let mut data = vol.data().clone();
    for (axis, &n) in like.shape().iter().enumerate() {
        data = linear_axis(&data, axis, n);
    }
    Volume::like(data, like)
}

/// Nearest-neighbour resampling of a label mask.
pub fn resample_label(label: &LabelVolume, target: [f64; 3]) -> Result<LabelVolume> {
    let (data, spacing) = resample_with(label, target, nearest_axis)?;
    LabelVolume::new(data, spacing, label.origin())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 3], spacing: [f64; 3]) -> Volume {
        let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| (i + 2 * j + 3 * k) as f32);
        Volume::new(data, spacing, [0.0; 3]).unwrap()
    }

    #[test]
    fn shape_follows_rounding_rule() {
        let r = resample_to_spacing(&vol([10, 10, 3], [0.6, 0.6, 1.0]), [0.3, 0.6, 5.0]).unwrap();
        assert_eq!(r.shape(), [20, 10, 1]);
        assert_eq!(r.spacing(), [0.3, 0.6, 5.0]);
    }

    #[test]
    fn identity_when_spacing_matches() {
        let v = vol([5, 6, 7], [0.3, 0.3, 0.6]);
        assert_eq!(resample_to_spacing(&v, [0.3, 0.3, 0.6]).unwrap(), v);
    }

    #[test]
    fn constant_stays_constant() {
        let v = Volume::new(Array3::from_elem((7, 4, 5), 2.5), [0.7, 1.1, 0.4], [0.0; 3]).unwrap();
        let r = resample_to_spacing(&v, [0.3, 0.5, 0.9]).unwrap();
        assert!(r.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn linear_ramp_is_reproduced_in_the_interior() {
        // Upsampling x2 of f(i) = i maps output o to (o + 0.5) / 2 - 0.5.
        let v = vol([8, 1, 1], [1.0; 3]);
        let r = resample_to_spacing(&v, [0.5, 1.0, 1.0]).unwrap();
        for o in 1..15 {
            let expect = (o as f64 + 0.5) / 2.0 - 0.5;
            assert!((r.data()[[o, 0, 0]] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn labels_stay_binary() {
        let data = Array3::from_shape_fn((9, 5, 4), |(i, j, k)| ((i + j * k) % 3 == 0) as u8);
        let l = LabelVolume::new(data, [0.5, 0.9, 1.3], [0.0; 3]).unwrap();
        let r = resample_label(&l, [0.35, 0.4, 1.0]).unwrap();
        assert!(r.data().iter().all(|&v| v <= 1));
        assert!(r.count() > 0);
    }

    #[test]
    fn non_positive_target_is_rejected() {
        assert!(resample_to_spacing(&vol([2, 2, 2], [1.0; 3]), [1.0, 0.0, 1.0]).is_err());
    }
}

//! Elementwise, normalization and resampling kernels with their adjoints.

use super::Tensor;

pub const LEAKY_SLOPE: f32 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn leaky_relu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { LEAKY_SLOPE * g })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Saved statistics of an instance normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-channel normalization over the spatial extent followed by an affine map.
pub fn instance_norm(x: &Tensor, gamma: &[f32], beta: &[f32]) -> (Tensor, NormCache) {
    let n = x.voxels();
    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.channels());
    for c in 0..x.channels() {
        let src = x.channel(c);
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = src
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        let (g, b) = (gamma[c], beta[c]);
        let xhat = normalized.channel_mut(c);
        for (h, &v) in xhat.iter_mut().zip(src) {
            *h = ((v as f64 - mean) * is) as f32;
        }
        for (o, &h) in y.channel_mut(c).iter_mut().zip(normalized.channel(c)) {
            *o = g * h + b;
        }
    }
    (y, NormCache { normalized, inv_std })
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f32],
    grad: &Tensor,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let n = grad.voxels() as f64;
    let mut gx = Tensor::zeros(grad.shape());
    let mut g_gamma = Vec::with_capacity(grad.channels());
    let mut g_beta = Vec::with_capacity(grad.channels());
    for c in 0..grad.channels() {
        let dy = grad.channel(c);
        let xhat = cache.normalized.channel(c);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for (&d, &h) in dy.iter().zip(xhat) {
            sum_dy += d as f64;
            sum_dy_xhat += d as f64 * h as f64;
        }
        g_gamma.push(sum_dy_xhat as f32);
        g_beta.push(sum_dy as f32);
        let g = gamma[c] as f64;
        let scale = g * cache.inv_std[c] / n;
        for ((o, &d), &h) in gx.channel_mut(c).iter_mut().zip(dy).zip(xhat) {
            *o = (scale * (n * d as f64 - sum_dy - h as f64 * sum_dy_xhat)) as f32;
        }
    }
    (gx, g_gamma, g_beta)
}

/// Linear interpolation taps `(lo, hi, w_hi)` for upsampling an axis of length `n`
/// by an integer `factor` with half-pixel alignment.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let w = (src - lo as f64) as f32;
            (lo, hi, if hi == lo { 0.0 } else { w })
        })
        .collect()
}

/// Resamples `x` along tensor axis `axis` (1..=3) with the given taps.
fn resample_axis(x: &Tensor, axis: usize, taps: &[(usize, usize, f32)]) -> Tensor {
    let shape = x.shape();
    let n_in = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape;
    out_shape[axis] = taps.len();
    let mut y = Tensor::zeros(out_shape);
    let src = x.data();
    let dst = y.data_mut();
    for o in 0..outer {
        let sbase = o * n_in * inner;
        let dbase = o * taps.len() * inner;
        for (t, &(lo, hi, w)) in taps.iter().enumerate() {
            let a = &src[sbase + lo * inner..sbase + (lo + 1) * inner];
            let b = &src[sbase + hi * inner..sbase + (hi + 1) * inner];
            let d = &mut dst[dbase + t * inner..dbase + (t + 1) * inner];
            for ((d, &a), &b) in d.iter_mut().zip(a).zip(b) {
                *d = (1.0 - w) * a + w * b;
            }
        }
    }
    y
}

fn resample_axis_adjoint(grad: &Tensor, axis: usize, n_in: usize, taps: &[(usize, usize, f32)]) -> Tensor {
    let shape = grad.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut in_shape = shape;
    in_shape[axis] = n_in;
    let mut gx = Tensor::zeros(in_shape);
    let src = grad.data();
    let dst = gx.data_mut();
    for o in 0..outer {
        let sbase = o * taps.len() * inner;
        let dbase = o * n_in * inner;
        for (t, &(lo, hi, w)) in taps.iter().enumerate() {
            let g = &src[sbase + t * inner..sbase + (t + 1) * inner];
            for (i, &gv) in g.iter().enumerate() {
                dst[dbase + lo * inner + i] += (1.0 - w) * gv;
                dst[dbase + hi * inner + i] += w * gv;
            }
        }
    }
    gx
}

/// Separable trilinear upsampling by an integer factor.
pub fn upsample(x: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return x.clone();
    }
    let mut y = x.clone();
    for axis in 1..=3 {
        let taps = upsample_taps(y.shape()[axis], factor);
        y = resample_axis(&y, axis, &taps);
    }
    y
}

pub fn upsample_backward(grad: &Tensor, input_shape: [usize; 4], factor: usize) -> Tensor {
    if factor == 1 {
        return grad.clone();
    }
    let mut g = grad.clone();
    for axis in (1..=3).rev() {
        let n_in = input_shape[axis];
        let taps = upsample_taps(n_in, factor);
        g = resample_axis_adjoint(&g, axis, n_in, &taps);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37) % 11) as f32 * 0.1 - 0.4).collect())
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::filled([2, 3, 4, 2], 1.25);
        let y = upsample(&x, 4);
        assert_eq!(y.shape(), [2, 12, 16, 8]);
        assert!(y.data().iter().all(|&v| (v - 1.25).abs() < 1e-6));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = ramp([2, 3, 4, 5]);
        let y = upsample(&x, 2);
        let g = ramp(y.shape());
        let gx = upsample_backward(&g, x.shape(), 2);
        assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-3);
    }

    #[test]
    fn instance_norm_outputs_zero_mean_unit_variance() {
        let x = ramp([3, 4, 4, 4]);
        let (y, _) = instance_norm(&x, &[1.0; 3], &[0.0; 3]);
        for c in 0..3 {
            let ch = y.channel(c);
            let mean: f64 = ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64;
            let var: f64 = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / ch.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn instance_norm_gradient_matches_finite_differences() {
        let x = ramp([2, 2, 3, 2]);
        let gamma = [1.3f32, 0.7];
        let beta = [0.1f32, -0.2];
        let probe = ramp([2, 2, 3, 2]);
        let loss = |x: &Tensor| {
            let (y, _) = instance_norm(x, &gamma, &beta);
            dot(&y, &probe)
        };
        let (_, cache) = instance_norm(&x, &gamma, &beta);
        let (gx, _, _) = instance_norm_backward(&cache, &gamma, &probe);
        let h = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            assert!((fd - gx.data()[i] as f64).abs() < 2e-2, "{i}: {fd} vs {}", gx.data()[i]);
        }
    }
}

//! Dense 3D convolution via im2col and single-precision GEMM.

use std::ops::Range;

use super::Tensor;

/// Cubic kernel convolution geometry shared by every spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME3: ConvGeom = ConvGeom {
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    pub const DOWN3: ConvGeom = ConvGeom {
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    pub const POINT: ConvGeom = ConvGeom {
        kernel: 1,
        stride: 1,
        pad: 0,
    };

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        [self.out_len(s[0]), self.out_len(s[1]), self.out_len(s[2])]
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `[c_out, c_in, k, k, k]` shape of a convolution weight.
pub fn weight_shape(c_in: usize, c_out: usize, geom: ConvGeom) -> [usize; 5] {
    [c_out, c_in, geom.kernel, geom.kernel, geom.kernel]
}

/// For one kernel offset along an axis, the `(out_start, out_end, in_start)`
/// span of output positions whose source index is in bounds.
fn axis_span(n_in: usize, n_out: usize, offset: usize, geom: ConvGeom) -> (usize, usize, isize) {
    let first_in = offset as isize - geom.pad as isize;
    let s = geom.stride as isize;
    let mut lo = 0usize;
    while lo < n_out && first_in + (lo as isize) * s < 0 {
        lo += 1;
    }
    let mut hi = n_out;
    while hi > lo && first_in + ((hi - 1) as isize) * s >= n_in as isize {
        hi -= 1;
    }
    (lo, hi, first_in)
}

/// Unfolds output planes `planes` (a range along the first spatial axis) of `input`
/// into a `(c_in * k^3) x chunk` row-major matrix.
fn im2col(input: &Tensor, geom: ConvGeom, out: [usize; 3], planes: Range<usize>, col: &mut [f32]) {
    let [c_in, n0, n1, n2] = input.shape();
    let plane = out[1] * out[2];
    let chunk = planes.len() * plane;
    let k = geom.kernel;
    let s = geom.stride;
    col[..c_in * geom.taps() * chunk].iter_mut().for_each(|v| *v = 0.0);
    for c in 0..c_in {
        let src = input.channel(c);
        for k0 in 0..k {
            let (lo0, hi0, f0) = axis_span(n0, out[0], k0, geom);
            let (lo0, hi0) = (lo0.max(planes.start), hi0.min(planes.end));
            for k1 in 0..k {
                let (lo1, hi1, f1) = axis_span(n1, out[1], k1, geom);
                for k2 in 0..k {
                    let (lo2, hi2, f2) = axis_span(n2, out[2], k2, geom);
                    let row = ((c * k + k0) * k + k1) * k + k2;
                    let dst = &mut col[row * chunk..(row + 1) * chunk];
                    for o0 in lo0..hi0 {
                        let i0 = (f0 + (o0 * s) as isize) as usize;
                        for o1 in lo1..hi1 {
                            let i1 = (f1 + (o1 * s) as isize) as usize;
                            let src_row = &src[(i0 * n1 + i1) * n2..(i0 * n1 + i1 + 1) * n2];
                            let dst_row = &mut dst[((o0 - planes.start) * out[1] + o1) * out[2]..];
                            if s == 1 {
                                let i2 = (f2 + lo2 as isize) as usize;
                                dst_row[lo2..hi2].copy_from_slice(&src_row[i2..i2 + (hi2 - lo2)]);
                            } else {
                                for o2 in lo2..hi2 {
                                    dst_row[o2] = src_row[(f2 + (o2 * s) as isize) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column chunk back into an input-shaped tensor.
fn col2im(col: &[f32], geom: ConvGeom, out: [usize; 3], planes: Range<usize>, grad_in: &mut Tensor) {
    let [c_in, n0, n1, n2] = grad_in.shape();
    let plane = out[1] * out[2];
    let chunk = planes.len() * plane;
    let k = geom.kernel;
    let s = geom.stride;
    for c in 0..c_in {
        let dst = grad_in.channel_mut(c);
        for k0 in 0..k {
            let (lo0, hi0, f0) = axis_span(n0, out[0], k0, geom);
            let (lo0, hi0) = (lo0.max(planes.start), hi0.min(planes.end));
            for k1 in 0..k {
                let (lo1, hi1, f1) = axis_span(n1, out[1], k1, geom);
                for k2 in 0..k {
                    let (lo2, hi2, f2) = axis_span(n2, out[2], k2, geom);
                    let row = ((c * k + k0) * k + k1) * k + k2;
                    let src = &col[row * chunk..(row + 1) * chunk];
                    for o0 in lo0..hi0 {
                        let i0 = (f0 + (o0 * s) as isize) as usize;
                        for o1 in lo1..hi1 {
                            let i1 = (f1 + (o1 * s) as isize) as usize;
                            let dst_row = &mut dst[(i0 * n1 + i1) * n2..(i0 * n1 + i1 + 1) * n2];
                            let src_row = &src[((o0 - planes.start) * out[1] + o1) * out[2]..];
                            if s == 1 {
                                let i2 = (f2 + lo2 as isize) as usize;
                                for (d, v) in dst_row[i2..i2 + (hi2 - lo2)].iter_mut().zip(&src_row[lo2..hi2]) {
                                    *d += v;
                                }
                            } else {
                                for o2 in lo2..hi2 {
                                    dst_row[(f2 + (o2 * s) as isize) as usize] += src_row[o2];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strided matrix view.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f32],
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    fn rows(data: &'a [f32], ld: usize) -> Self {
        Self { data, rs: ld as isize, cs: 1 }
    }

    fn transposed(data: &'a [f32], ld: usize) -> Self {
        Self { data, rs: 1, cs: ld as isize }
    }
}

/// `c[m x n] (row stride ldc) = a * b (+ c if accumulate)`.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f32], ldc: usize, accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n);
    // SAFETY: every caller passes operands covering the strided m x k and k x n extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Target number of output voxels per unfolded chunk; keeps the column buffer cache-resident.
const CHUNK_VOXELS: usize = 1024;

fn plane_chunks(out: [usize; 3]) -> impl Iterator<Item = Range<usize>> {
    let plane = out[1] * out[2];
    let step = (CHUNK_VOXELS / plane.max(1)).max(1);
    (0..out[0]).step_by(step).map(move |a| a..(a + step).min(out[0]))
}

/// Forward convolution. `weight` is `[c_out, c_in, k, k, k]` flattened, `bias` is per output channel.
pub fn conv3d_forward(
    input: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    c_out: usize,
    geom: ConvGeom,
) -> Tensor {
    let c_in = input.channels();
    let out = geom.out_spatial(input.spatial());
    let n_out = out[0] * out[1] * out[2];
    let kk = c_in * geom.taps();
    debug_assert_eq!(weight.len(), c_out * kk);
    let mut y = Tensor::zeros([c_out, out[0], out[1], out[2]]);
    if geom.is_pointwise() {
        gemm(c_out, kk, n_out, Mat::rows(weight, kk), Mat::rows(input.data(), n_out), y.data_mut(), n_out, false);
    } else {
        let plane = out[1] * out[2];
        let mut col = Vec::new();
        for planes in plane_chunks(out) {
            let chunk = planes.len() * plane;
            col.resize(kk * chunk, 0.0);
            im2col(input, geom, out, planes.clone(), &mut col);
            let dst = &mut y.data_mut()[planes.start * plane..];
            gemm(c_out, kk, chunk, Mat::rows(weight, kk), Mat::rows(&col, chunk), dst, n_out, false);
        }
    }
    if let Some(b) = bias {
        for (c, &bc) in b.iter().enumerate() {
            y.channel_mut(c).iter_mut().for_each(|v| *v += bc);
        }
    }
    y
}

/// Gradients of a convolution with respect to its weight, bias and (optionally) input.
pub struct ConvGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub input: Option<Tensor>,
}

pub fn conv3d_backward(
    input: &Tensor,
    weight: &[f32],
    grad_out: &Tensor,
    geom: ConvGeom,
    need_input_grad: bool,
) -> ConvGrads {
    let c_in = input.channels();
    let c_out = grad_out.channels();
    let out = grad_out.spatial();
    let n_out = grad_out.voxels();
    let kk = c_in * geom.taps();

    let bias: Vec<f32> = (0..c_out)
        .map(|c| grad_out.channel(c).iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();

    let mut grad_w = vec![0.0f32; c_out * kk];
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let dy = grad_out.data();
    if geom.is_pointwise() {
        // dW (c_out x kk) = dY (c_out x n) * X^T (n x kk)
        gemm(c_out, n_out, kk, Mat::rows(dy, n_out), Mat::transposed(input.data(), n_out), &mut grad_w, kk, false);
        if let Some(gi) = grad_in.as_mut() {
            // dX (kk x n) = W^T (kk x c_out) * dY (c_out x n)
            gemm(kk, c_out, n_out, Mat::transposed(weight, kk), Mat::rows(dy, n_out), gi.data_mut(), n_out, false);
        }
    } else {
        let plane = out[1] * out[2];
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for planes in plane_chunks(out) {
            let chunk = planes.len() * plane;
            let dy_chunk = &dy[planes.start * plane..];
            col.resize(kk * chunk, 0.0);
            im2col(input, geom, out, planes.clone(), &mut col);
            gemm(c_out, chunk, kk, Mat::rows(dy_chunk, n_out), Mat::transposed(&col, chunk), &mut grad_w, kk, true);
            if let Some(gi) = grad_in.as_mut() {
                dcol.resize(kk * chunk, 0.0);
                gemm(kk, c_out, chunk, Mat::transposed(weight, kk), Mat::rows(dy_chunk, n_out), &mut dcol, chunk, false);
                col2im(&dcol, geom, out, planes, gi);
            }
        }
    }

    ConvGrads {
        weight: grad_w,
        bias,
        input: grad_in,
    }
}

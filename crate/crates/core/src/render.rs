//! Maximum-intensity projections with an optional mask overlay, written as PNG.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

/// Overlay colour and opacity for mask voxels.
const OVERLAY: [f32; 3] = [255.0, 40.0, 40.0];
const OVERLAY_ALPHA: f32 = 0.6;

/// Per-ray maximum of `vol` along `axis`.
pub fn mip(vol: &Volume, axis: usize) -> Array2<f32> {
    vol.data().map_axis(Axis(axis), |ray| ray.iter().copied().fold(f32::NEG_INFINITY, f32::max))
}

fn mask_mip(mask: &LabelVolume, axis: usize) -> Array2<bool> {
    mask.data().map_axis(Axis(axis), |ray| ray.iter().any(|&v| v != 0))
}

/// Grey-scale projection rescaled to the full 8-bit range, with `mask` blended on top.
pub fn render_projection(vol: &Volume, mask: Option<&LabelVolume>, axis: usize) -> Result<RgbImage> {
    if axis > 2 {
        return Err(Error::Config(format!("projection axis must be 0, 1 or 2, got {axis}")));
    }
    if let Some(m) = mask {
        if m.shape() != vol.shape() {
            return Err(Error::shape(vol.shape(), m.shape()));
        }
    }
    let proj = mip(vol, axis);
    let overlay = mask.map(|m| mask_mip(m, axis));
    let (lo, hi) = proj
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = proj.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((r, c), &v) in proj.indexed_iter() {
        let g = if v.is_finite() { ((v - lo) / range).clamp(0.0, 1.0) * 255.0 } else { 0.0 };
        let mut px = [g; 3];
        if overlay.as_ref().is_some_and(|o| o[[r, c]]) {
            for (p, o) in px.iter_mut().zip(OVERLAY) {
                *p = (1.0 - OVERLAY_ALPHA) * *p + OVERLAY_ALPHA * o;
            }
        }
        img.put_pixel(c as u32, r as u32, Rgb(px.map(|p| p.round() as u8)));
    }
    Ok(img)
}

/// Writes one projection per axis to `<out>_axis{0,1,2}.png` (a trailing `.png`
/// on `out` is dropped) and returns the written paths.
pub fn render_mips(vol: &Volume, mask: Option<&LabelVolume>, out: &Path) -> Result<Vec<PathBuf>> {
    let stem = out.to_string_lossy();
    let stem = stem.strip_suffix(".png").unwrap_or(&stem);
    if let Some(dir) = Path::new(stem).parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    (0..3)
        .map(|axis| {
            let path = PathBuf::from(format!("{stem}_axis{axis}.png"));
            render_projection(vol, mask, axis)?
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn projection_takes_ray_maxima() {
        let mut data = Array3::<f32>::zeros((3, 2, 4));
        data[[2, 1, 3]] = 5.0;
        data[[0, 0, 0]] = -1.0;
        let v = Volume::new(data, [1.0; 3], [0.0; 3]).unwrap();
        let p = mip(&v, 0);
        assert_eq!(p.dim(), (2, 4));
        assert_eq!(p[[1, 3]], 5.0);
        assert_eq!(p[[0, 0]], 0.0);
    }

    #[test]
    fn overlay_marks_masked_rays() {
        let v = Volume::new(Array3::zeros((4, 4, 4)), [1.0; 3], [0.0; 3]).unwrap();
        let mut m = Array3::<u8>::zeros((4, 4, 4));
        m[[1, 2, 3]] = 1;
        let m = LabelVolume::like(m, &v).unwrap();
        let img = render_projection(&v, Some(&m), 0).unwrap();
        assert_eq!(img.get_pixel(3, 2)[0], 153);
        assert_eq!(img.get_pixel(0, 0)[0], 0);
    }

    #[test]
    fn writes_three_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(Array3::from_shape_fn((5, 6, 7), |(i, j, k)| (i + j + k) as f32), [1.0; 3], [0.0; 3]).unwrap();
        let paths = render_mips(&v, None, &dir.path().join("sub/mip.png")).unwrap();
        assert_eq!(paths.len(), 3);
        let first = image::open(&paths[0]).unwrap();
        assert_eq!((first.width(), first.height()), (7, 6));
    }
}

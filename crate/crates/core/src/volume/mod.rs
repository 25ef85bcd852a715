//! Volumes, label masks, subject records and the preprocessing pipeline.

mod io;
mod normalize;
mod resample;
mod stats;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_label, load_volume, save_volume, VolumeFormat};
pub use normalize::{normalize, normalize_to, preprocess, zscore, NormalizeStage};
pub use resample::{resample_label, resample_onto, resample_to_spacing};
pub use stats::{compute_cohort_stats, percentile, CohortStats};

/// A 3D grid indexed `[x, y, z]` with physical voxel spacing and origin in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    data: Array3<T>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

/// Scalar intensity image.
pub type Volume = Grid<f32>;

/// Binary mask with values in {0, 1}.
pub type LabelVolume = Grid<u8>;

fn check_geometry(dims: &[usize], spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidVolume(format!("empty axis in shape {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
    }
    if origin.iter().any(|o| !o.is_finite()) {
        return Err(Error::InvalidVolume(format!("non-finite origin {origin:?}")));
    }
    Ok(())
}

impl<T> Grid<T> {
    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    /// Contiguous `[x, y, z]` standard-layout view of the voxels.
    pub fn as_slice(&self) -> &[T] {
        self.data.as_slice().expect("grids are stored in standard layout")
    }

    pub fn same_geometry<U>(&self, other: &Grid<U>) -> bool {
        self.shape() == other.shape() && self.spacing == other.spacing
    }
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_geometry(data.shape(), spacing, origin)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite intensity".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            origin,
        })
    }

    /// Copies spacing and origin from `like`.
    pub fn like<U>(data: Array3<f32>, like: &Grid<U>) -> Result<Self> {
        Self::new(data, like.spacing, like.origin)
    }
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_geometry(data.shape(), spacing, origin)?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidVolume("label values must be 0 or 1".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            origin,
        })
    }

    pub fn like<U>(data: Array3<u8>, like: &Grid<U>) -> Result<Self> {
        Self::new(data, like.spacing, like.origin)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// One annotated subject: image plus brain and vessel ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub image: Volume,
    pub brain: LabelVolume,
    pub vessel: LabelVolume,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, image: Volume, brain: LabelVolume, vessel: LabelVolume) -> Result<Self> {
        let id = id.into();
        for (name, label) in [("brain", &brain), ("vessel", &vessel)] {
            if !image.same_geometry(label) {
                return Err(Error::InvalidVolume(format!(
                    "{id}: {name} mask geometry {:?}/{:?} differs from image {:?}/{:?}",
                    label.shape(),
                    label.spacing(),
                    image.shape(),
                    image.spacing()
                )));
            }
        }
        Ok(Self {
            id,
            image,
            brain,
            vessel,
        })
    }
}

/// Geometry echoed into sidecars and manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

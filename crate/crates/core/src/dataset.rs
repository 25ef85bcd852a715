//! On-disk cohort layout: a `cohort.json` manifest next to one image, brain
//! mask and vessel mask file per subject.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{load_label, load_volume, save_volume, SubjectRecord};

pub const MANIFEST: &str = "cohort.json";

/// File names of one subject, relative to the cohort directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectFiles {
    pub id: String,
    pub image: String,
    pub brain: String,
    pub vessel: String,
}

impl SubjectFiles {
    pub fn standard(id: &str) -> Self {
        Self {
            id: id.to_string(),
            image: format!("{id}_image.nii.gz"),
            brain: format!("{id}_brain.nii.gz"),
            vessel: format!("{id}_vessel.nii.gz"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<SubjectFiles>,
    /// Free-form provenance, e.g. the generator configuration.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub source: serde_json::Value,
}

impl Manifest {
    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
        path: path.clone(),
        reason: format!("at {}: {}", e.path(), e.inner()),
    })?;
    if m.subjects.is_empty() {
        return Err(Error::Empty(format!("{} lists no subjects", path.display())));
    }
    Ok(m)
}

/// Writes every record in the standard layout plus the manifest.
pub fn write_cohort(dir: &Path, records: &[SubjectRecord], source: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let subjects: Vec<SubjectFiles> = records.iter().map(|r| SubjectFiles::standard(&r.id)).collect();
    records.par_iter().zip(&subjects).try_for_each(|(r, f)| {
        save_volume(&r.image, dir.join(&f.image))?;
        save_volume(&r.brain, dir.join(&f.brain))?;
        save_volume(&r.vessel, dir.join(&f.vessel))
    })?;
    let manifest = Manifest { subjects, source };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn load_subject(dir: &Path, f: &SubjectFiles) -> Result<SubjectRecord> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    SubjectRecord::new(
        f.id.clone(),
        load_volume(p(&f.image))?,
        load_label(p(&f.brain))?,
        load_label(p(&f.vessel))?,
    )
}

/// Loads the subjects named in `ids` (all of them when `None`), in manifest order.
pub fn read_cohort(dir: &Path, ids: Option<&[String]>) -> Result<Vec<SubjectRecord>> {
    let manifest = read_manifest(dir)?;
    if let Some(ids) = ids {
        if let Some(missing) = ids.iter().find(|id| !manifest.subjects.iter().any(|s| &s.id == *id)) {
            return Err(Error::Config(format!("subject {missing:?} is not in {}", dir.join(MANIFEST).display())));
        }
    }
    manifest
        .subjects
        .par_iter()
        .filter(|s| ids.is_none_or(|ids| ids.contains(&s.id)))
        .map(|s| load_subject(dir, s))
        .collect()
}

//! Python bindings for the `jobvs` segmentation toolkit.
//!
//! Arrays cross the boundary as flat C-order lists plus a shape tuple; wrap
//! them with `numpy.asarray(v.tolist()).reshape(v.shape)` on the Python side.

use std::path::PathBuf;

use jobvs::checkpoint::Checkpoint;
use jobvs::inference::{evaluate_modes, predict_image, EvalMode, PredictionVolume};
use jobvs::metrics::{self, evaluate_subject};
use jobvs::model::{build_model, LatticeConfig, ModelParams, TaskMode};
use jobvs::objective::{joint_loss_with_grad, LossWeights};
use jobvs::phantom::PhantomConfig;
use jobvs::training::{make_folds, TrainConfig};
use jobvs::volume::{self, CohortStats, LabelVolume, SubjectRecord, Volume};
use jobvs::{dataset, render, Error};
use ndarray::Array3;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn array<T>(data: Vec<T>, shape: (usize, usize, usize)) -> PyResult<Array3<T>> {
    Array3::from_shape_vec(shape, data).map_err(|e| PyValueError::new_err(format!("data does not fit shape {shape:?}: {e}")))
}

fn triple<T: Copy>(a: [T; 3]) -> (T, T, T) {
    (a[0], a[1], a[2])
}

/// Intensity or probability volume (float32) with voxel spacing and origin in mm.
#[pyclass(name = "Volume", module = "jobvs_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, shape, spacing = (1.0, 1.0, 1.0), origin = (0.0, 0.0, 0.0)))]
    fn new(data: Vec<f32>, shape: (usize, usize, usize), spacing: (f64, f64, f64), origin: (f64, f64, f64)) -> PyResult<Self> {
        let inner = Volume::new(array(data, shape)?, spacing.into(), origin.into()).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads a `.nii`, `.nii.gz` or raw volume.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: volume::load_volume(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_volume(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        triple(self.inner.shape())
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        triple(self.inner.spacing())
    }

    #[getter]
    fn origin(&self) -> (f64, f64, f64) {
        triple(self.inner.origin())
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.as_slice().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Zero mean, unit variance over all voxels.
    fn zscore(&self) -> PyResult<Self> {
        Ok(Self {
            inner: volume::zscore(&self.inner).map_err(to_py)?,
        })
    }

    /// Trilinear resampling to the given voxel spacing.
    fn resample(&self, spacing: (f64, f64, f64)) -> PyResult<Self> {
        Ok(Self {
            inner: volume::resample_to_spacing(&self.inner, spacing.into()).map_err(to_py)?,
        })
    }

    /// Voxels at or above `threshold` become 1.
    #[pyo3(signature = (threshold = 0.5))]
    fn binarize(&self, threshold: f64) -> PyLabels {
        PyLabels {
            inner: jobvs::inference::binarize(&self.inner, threshold),
        }
    }

    /// Writes one maximum intensity projection PNG per axis and returns their paths.
    #[pyo3(signature = (out, mask = None))]
    fn render_mips(&self, out: PathBuf, mask: Option<PyRef<'_, PyLabels>>) -> PyResult<Vec<PathBuf>> {
        render::render_mips(&self.inner, mask.as_ref().map(|m| &m.inner), &out).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Volume(shape={:?}, spacing={:?})", self.inner.shape(), self.inner.spacing())
    }
}

/// Binary label volume (uint8, 0 or 1).
#[pyclass(name = "Labels", module = "jobvs_py", skip_from_py_object)]
#[derive(Clone)]
struct PyLabels {
    inner: LabelVolume,
}

#[pymethods]
impl PyLabels {
    #[new]
    #[pyo3(signature = (data, shape, spacing = (1.0, 1.0, 1.0), origin = (0.0, 0.0, 0.0)))]
    fn new(data: Vec<u8>, shape: (usize, usize, usize), spacing: (f64, f64, f64), origin: (f64, f64, f64)) -> PyResult<Self> {
        let inner = LabelVolume::new(array(data, shape)?, spacing.into(), origin.into()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: volume::load_label(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_volume(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        triple(self.inner.shape())
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        triple(self.inner.spacing())
    }

    fn tolist(&self) -> Vec<u8> {
        self.inner.as_slice().to_vec()
    }

    /// Number of foreground voxels.
    fn count(&self) -> usize {
        self.inner.count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Topology-preserving 3D thinning to a one-voxel-wide skeleton.
    fn skeletonize(&self) -> PyResult<Self> {
        let skel = metrics::skeletonize3d(self.inner.data());
        Ok(Self {
            inner: LabelVolume::like(skel, &self.inner).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Labels(shape={:?}, foreground={})", self.inner.shape(), self.inner.count())
    }
}

/// One subject: image plus brain and vessel annotations on a shared grid.
#[pyclass(name = "Subject", module = "jobvs_py", skip_from_py_object)]
#[derive(Clone)]
struct PySubject {
    inner: SubjectRecord,
}

#[pymethods]
impl PySubject {
    #[new]
    fn new(id: String, image: PyRef<'_, PyVolume>, brain: PyRef<'_, PyLabels>, vessel: PyRef<'_, PyLabels>) -> PyResult<Self> {
        let inner = SubjectRecord::new(id, image.inner.clone(), brain.inner.clone(), vessel.inner.clone()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn image(&self) -> PyVolume {
        PyVolume {
            inner: self.inner.image.clone(),
        }
    }

    #[getter]
    fn brain(&self) -> PyLabels {
        PyLabels {
            inner: self.inner.brain.clone(),
        }
    }

    #[getter]
    fn vessel(&self) -> PyLabels {
        PyLabels {
            inner: self.inner.vessel.clone(),
        }
    }

    fn __repr__(&self) -> String {
        format!("Subject({:?}, shape={:?})", self.inner.id, self.inner.image.shape())
    }
}

/// Lattice segmentation network, optionally carrying the cohort statistics it was trained with.
#[pyclass(name = "Model", module = "jobvs_py")]
struct PyModel {
    model: ModelParams,
    stats: Option<CohortStats>,
}

fn prediction_dict<'py>(py: Python<'py>, p: PredictionVolume) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("vessel", p.vessel.map(|inner| PyVolume { inner }))?;
    d.set_item("brain", p.brain.map(|inner| PyVolume { inner }))?;
    Ok(d)
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => PyList::new(py, a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any(),
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

#[pymethods]
impl PyModel {
    /// Randomly initialised network.
    #[new]
    #[pyo3(signature = (base_channels = 16, patch_size = 64, lattice_length = 2, task_mode = "joint", seed = 0))]
    fn new(base_channels: usize, patch_size: usize, lattice_length: usize, task_mode: &str, seed: u64) -> PyResult<Self> {
        let task_mode: TaskMode = serde_json::from_value(serde_json::Value::String(task_mode.into()))
            .map_err(|_| PyValueError::new_err(format!("unknown task mode {task_mode:?} (joint, vessel_only, brain_only)")))?;
        let cfg = LatticeConfig {
            base_channels,
            patch_size: [patch_size; 3],
            lattice_length,
            task_mode,
            ..Default::default()
        };
        Ok(Self {
            model: build_model(&cfg, seed).map_err(to_py)?,
            stats: None,
        })
    }

    /// Loads a checkpoint written by `jobvs train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(to_py)?;
        Ok(Self {
            model: ck.model,
            stats: ck.stats,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.model.clone(), self.stats.clone()).save(path).map_err(to_py)
    }

    fn checksum(&self) -> String {
        self.model.checksum()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.parameter_count()
    }

    #[getter]
    fn task_mode(&self) -> &'static str {
        self.model.config.task_mode.as_str()
    }

    /// Sliding-window probabilities on the input grid: `{"vessel": Volume | None, "brain": Volume | None}`.
    #[pyo3(signature = (image, overlap = 0.5))]
    fn predict<'py>(&self, py: Python<'py>, image: PyRef<'_, PyVolume>, overlap: f64) -> PyResult<Bound<'py, PyDict>> {
        let image = image.inner.clone();
        let p = py
            .detach(|| predict_image(&self.model, self.stats.as_ref(), &image, overlap))
            .map_err(to_py)?;
        prediction_dict(py, p)
    }

    /// Metrics for one labelled subject in both evaluation modes, keyed "NBM" and "BM".
    #[pyo3(signature = (subject, fold = 0, overlap = 0.5))]
    fn evaluate<'py>(&self, py: Python<'py>, subject: PyRef<'_, PySubject>, fold: usize, overlap: f64) -> PyResult<Bound<'py, PyDict>> {
        let rec = subject.inner.clone();
        let rows = py
            .detach(|| -> jobvs::Result<_> {
                let m = evaluate_modes(&self.model, self.stats.as_ref(), &rec, overlap)?;
                Ok([
                    evaluate_subject(&m.nbm, &rec, fold, EvalMode::NBM)?,
                    evaluate_subject(&m.bm, &rec, fold, EvalMode::BM)?,
                ])
            })
            .map_err(to_py)?;
        let d = PyDict::new(py);
        for row in rows {
            let v = serde_json::to_value(&row).map_err(|e| PyValueError::new_err(e.to_string()))?;
            d.set_item(row.mode.to_string(), json_to_py(py, &v)?)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(task_mode={:?}, parameters={}, normalised={})",
            self.model.config.task_mode.as_str(),
            self.model.parameter_count(),
            self.stats.is_some()
        )
    }
}

/// Synthetic subject `index` of the phantom generator; `config` is a JSON object of generator settings.
#[pyfunction]
#[pyo3(signature = (index, config = None))]
fn generate_phantom(index: usize, config: Option<&str>) -> PyResult<PySubject> {
    let cfg: PhantomConfig = parse_json(config)?;
    Ok(PySubject {
        inner: jobvs::phantom::generate_phantom(&cfg, index).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (n, config = None))]
fn generate_cohort(py: Python<'_>, n: usize, config: Option<&str>) -> PyResult<Vec<PySubject>> {
    let cfg: PhantomConfig = parse_json(config)?;
    let recs = py.detach(|| jobvs::phantom::generate_cohort(&cfg, n)).map_err(to_py)?;
    Ok(recs.into_iter().map(|inner| PySubject { inner }).collect())
}

/// Reads a cohort directory written by `jobvs phantom` or `write_cohort`.
#[pyfunction]
#[pyo3(signature = (path, ids = None))]
fn read_cohort(path: PathBuf, ids: Option<Vec<String>>) -> PyResult<Vec<PySubject>> {
    let recs = dataset::read_cohort(&path, ids.as_deref()).map_err(to_py)?;
    Ok(recs.into_iter().map(|inner| PySubject { inner }).collect())
}

#[pyfunction]
fn write_cohort(path: PathBuf, subjects: Vec<PyRef<'_, PySubject>>) -> PyResult<()> {
    let recs: Vec<SubjectRecord> = subjects.iter().map(|s| s.inner.clone()).collect();
    dataset::write_cohort(&path, &recs, serde_json::json!({ "writer": "python" })).map_err(to_py)?;
    Ok(())
}

/// Trains one cross-validation fold on a cohort directory and returns the selected model.
/// `config` is a JSON object of training settings; artifacts go to `out_dir` when given.
#[pyfunction]
#[pyo3(signature = (data_dir, config = None, fold = 0, out_dir = None))]
fn train(py: Python<'_>, data_dir: PathBuf, config: Option<&str>, fold: usize, out_dir: Option<PathBuf>) -> PyResult<PyModel> {
    let mut cfg: TrainConfig = parse_json(config)?;
    cfg.fold = fold;
    cfg.validate().map_err(to_py)?;
    let outcome = py
        .detach(|| -> jobvs::Result<_> {
            let cohort = dataset::read_cohort(&data_dir, None)?;
            let ids: Vec<String> = cohort.iter().map(|r| r.id.clone()).collect();
            let split = make_folds(&ids, cfg.n_folds, cfg.seed)?
                .into_iter()
                .find(|f| f.fold_id == fold)
                .ok_or_else(|| Error::Config(format!("fold {fold} out of range for {} folds", cfg.n_folds)))?;
            jobvs::training::train(&cfg, &cohort, &split, out_dir.as_deref())
        })
        .map_err(to_py)?;
    Ok(PyModel {
        model: outcome.best.model,
        stats: outcome.best.stats,
    })
}

/// Dice similarity of two binary masks given as flat lists; 1.0 when both are empty.
#[pyfunction]
fn dsc(pred: Vec<u8>, gt: Vec<u8>) -> PyResult<f64> {
    metrics::dsc(&pred, &gt).map_err(to_py)
}

/// Voxel-level average precision of a probability map.
#[pyfunction]
fn average_precision(prob: Vec<f32>, gt: Vec<u8>) -> PyResult<f64> {
    metrics::average_precision(&prob, &gt).map_err(to_py)
}

/// Best F1 over all thresholds, returned with the threshold that attains it.
#[pyfunction]
fn max_f1(prob: Vec<f32>, gt: Vec<u8>) -> PyResult<(f64, f32)> {
    metrics::max_f1(&prob, &gt).map_err(to_py)
}

#[pyfunction]
fn cl_dice(pred: PyRef<'_, PyLabels>, gt: PyRef<'_, PyLabels>) -> PyResult<f64> {
    metrics::cl_dice(pred.inner.data(), gt.inner.data()).map_err(to_py)
}

/// Joint Dice + cross-entropy loss of two heads and its gradient with respect to the logits.
/// Logits are channel-major `[background..., foreground...]`, twice the target length.
#[pyfunction]
#[pyo3(signature = (brain_logits, vessel_logits, brain_target, vessel_target, alpha = 1.0, beta = 1.0))]
fn joint_loss(
    brain_logits: Vec<f64>,
    vessel_logits: Vec<f64>,
    brain_target: Vec<u8>,
    vessel_target: Vec<u8>,
    alpha: f64,
    beta: f64,
) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    let g = joint_loss_with_grad(&brain_logits, &vessel_logits, &brain_target, &vessel_target, LossWeights { alpha, beta })
        .map_err(to_py)?;
    Ok((g.loss.total, g.brain.unwrap_or_default(), g.vessel.unwrap_or_default()))
}

#[pymodule]
fn jobvs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyLabels>()?;
    m.add_class::<PySubject>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(read_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(write_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(max_f1, m)?)?;
    m.add_function(wrap_pyfunction!(cl_dice, m)?)?;
    m.add_function(wrap_pyfunction!(joint_loss, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

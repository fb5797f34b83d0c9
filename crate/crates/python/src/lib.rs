//! Python module `faith`: load volumes, train from seeds, segment.
//!
//! ```python
//! import faith
//! ph = faith.Phantom(48)
//! model, report = faith.train(ph.volume, ph.plane_seeds(25), theta_g=150.0)
//! mask, stats = faith.segment(ph.volume, model)
//! ```

use std::path::PathBuf;

use faith_core::segmenter::SegmentError;
use faith_core::synthetic::{self, Label, PhantomSpec};
use faith_core::volume::{write_volume, Axis, Position, VolumeError};
use faith_core::{
    load_volume, mce, solve_faith, Dtype, FaithModel, SeedSet, SegmentOptions, SolverParams,
    ThresholdRule, TrainingConfig,
};
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn volume_err(e: VolumeError) -> PyErr {
    match e {
        VolumeError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn segment_err(e: SegmentError) -> PyErr {
    match e {
        SegmentError::Volume(v) => volume_err(v),
        SegmentError::Io(io) => PyOSError::new_err(io.to_string()),
        SegmentError::Solver(_) | SegmentError::Tuning(_) => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

/// Parses a JSON string with Python's `json` module.
fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A 3D `uint8` or `uint16` volume.
#[pyclass(name = "Volume", frozen)]
struct PyVolume {
    inner: faith_core::Volume,
}

#[pymethods]
impl PyVolume {
    /// Builds a volume from raw little-endian samples in x-fastest order.
    #[new]
    #[pyo3(signature = (dims, data, dtype = "uint8"))]
    fn new(dims: [usize; 3], data: &[u8], dtype: &str) -> PyResult<Self> {
        let dtype = Dtype::parse(dtype).map_err(volume_err)?;
        let meta = faith_core::VolumeMeta::new(dims, dtype).map_err(volume_err)?;
        let inner = faith_core::Volume::from_bytes(meta, data.to_vec()).map_err(volume_err)?;
        Ok(Self { inner })
    }

    /// Opens `path` (`name`, `name.raw` or `name.json`).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_volume(&path).map_err(volume_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_volume(&path, &self.inner).map_err(volume_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        self.inner.meta().dtype.name()
    }

    #[getter]
    fn max_value(&self) -> u32 {
        self.inner.meta().max_value()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<u16> {
        self.inner.try_get([x, y, z]).map_err(volume_err)
    }

    /// Raw sample bytes.
    fn tobytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.bytes())
    }

    /// Values of one slice, row-major, with its width and height.
    fn slice(&self, axis: &str, index: usize) -> PyResult<(usize, usize, Vec<u16>)> {
        let axis = Axis::parse(axis).ok_or_else(|| value_err(format!("unknown axis {axis:?}")))?;
        let (geom, values) = self.inner.slice_values(axis, index).map_err(volume_err)?;
        Ok((geom.width, geom.height, values))
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, dtype={})", self.inner.dims(), self.dtype())
    }
}

/// Trained threshold model.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: FaithModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FaithModel::from_json(text).map_err(value_err)?,
        })
    }

    /// Zero weights: plain global thresholding with the border policy of `env_size`.
    #[staticmethod]
    #[pyo3(signature = (theta_g, max_value, env_size = 5))]
    fn global_threshold(theta_g: f64, max_value: u32, env_size: usize) -> PyResult<Self> {
        let cfg = faith_core::FeatureConfig::geometric(env_size).map_err(value_err)?;
        Ok(Self {
            inner: FaithModel::global(theta_g, max_value, &cfg),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: FaithModel::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn theta_g(&self) -> f64 {
        self.inner.theta_g
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn env_size(&self) -> usize {
        self.inner.env_size
    }

    #[getter]
    fn features(&self) -> Vec<&'static str> {
        self.inner.features.iter().map(|f| f.name()).collect()
    }

    #[getter]
    fn lambda_(&self) -> Option<f64> {
        self.inner.lambda
    }

    #[getter]
    fn mu(&self) -> Option<f64> {
        self.inner.mu
    }

    /// Threshold at an interior voxel of `volume`.
    fn threshold_at(&self, volume: &PyVolume, position: Position) -> PyResult<f64> {
        let env = volume
            .inner
            .extract_environment(position, self.inner.env_size)
            .map_err(volume_err)?;
        faith_core::model::local_threshold(&self.inner, &env).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(theta_g={}, env_size={}, beta={:?})",
            self.inner.theta_g, self.inner.env_size, self.inner.beta
        )
    }
}

/// Synthetic cube with a bright sphere, a faint sheet and noisy background.
#[pyclass(name = "Phantom", frozen)]
struct PyPhantom {
    inner: synthetic::Phantom,
}

#[pymethods]
impl PyPhantom {
    #[new]
    #[pyo3(signature = (size, seed = 7))]
    fn new(size: usize, seed: u64) -> PyResult<Self> {
        let spec = PhantomSpec {
            seed,
            ..PhantomSpec::uint8(size)
        };
        Ok(Self {
            inner: synthetic::Phantom::generate(spec).map_err(value_err)?,
        })
    }

    #[getter]
    fn volume(&self) -> PyVolume {
        let v = &self.inner.volume;
        PyVolume {
            inner: faith_core::Volume::from_bytes(*v.meta(), v.bytes().to_vec())
                .expect("phantom volume is well formed"),
        }
    }

    #[getter]
    fn plane_z(&self) -> usize {
        self.inner.plane_z
    }

    /// Ground-truth labels: 0 background, 1 sphere, 2 sheet.
    fn labels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let labels: Vec<u8> = self.inner.labels.iter().map(|&l| l as u8).collect();
        PyBytes::new(py, &labels)
    }

    fn plane_seeds(&self, count: usize) -> Vec<Position> {
        self.inner.plane_seeds(count)
    }

    /// Sheet recall, sphere recall and background false-positive rate of a mask.
    fn score(&self, mask: &[u8]) -> PyResult<(f64, f64, f64)> {
        if mask.len() != self.inner.labels.len() {
            return Err(value_err(format!(
                "mask has {} voxels, phantom has {}",
                mask.len(),
                self.inner.labels.len()
            )));
        }
        let s = synthetic::score(&self.inner.labels, mask);
        Ok((s.plane_recall, s.blob_recall, s.background_fpr))
    }

    fn label(&self, position: Position) -> PyResult<u8> {
        if !self.inner.volume.meta().contains(position) {
            return Err(value_err(format!("{position:?} outside the phantom")));
        }
        Ok(match self.inner.label(position) {
            Label::Background => 0,
            Label::Blob => 1,
            Label::Plane => 2,
        })
    }
}

/// Trains a model from seed positions. Returns the model and the
/// cross-validation report as a dict (`None` when the weights are zero by
/// construction).
#[pyfunction]
#[pyo3(signature = (volume, seeds, theta_g, env_size = 5, features = None, k_max = 16, eps_path = 1e-3, folds = None, fold_seed = None, workers = 1))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    volume: &PyVolume,
    seeds: Vec<Position>,
    theta_g: f64,
    env_size: usize,
    features: Option<Vec<String>>,
    k_max: usize,
    eps_path: f64,
    folds: Option<usize>,
    fold_seed: Option<u64>,
    workers: usize,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let features = match features {
        None => faith_core::FeatureConfig::geometric(env_size),
        Some(names) => faith_core::FeatureConfig::parse(&names.join(","), env_size),
    }
    .map_err(value_err)?;
    let mut config = TrainingConfig::new(features, theta_g);
    config.grid = faith_core::HyperGrid::with_path(k_max, eps_path).map_err(value_err)?;
    config.cv.folds = folds;
    config.cv.workers = workers;
    if let Some(seed) = fold_seed {
        config.cv.seed = seed;
    }
    let seeds = SeedSet::new(seeds, env_size);
    let outcome = py
        .detach(|| faith_core::train_from_seeds(&volume.inner, &seeds, &config))
        .map_err(segment_err)?;
    let report = serde_json::to_string(&outcome.report).expect("report serializes");
    Ok((
        PyModel {
            inner: outcome.model,
        },
        json_to_py(py, &report)?,
    ))
}

/// Segments the whole volume. Returns the `{0, 1}` mask as bytes in volume
/// order and the statistics as a dict.
#[pyfunction]
#[pyo3(signature = (volume, model, slab = 16, workers = 1))]
fn segment<'py>(
    py: Python<'py>,
    volume: &PyVolume,
    model: &PyModel,
    slab: usize,
    workers: usize,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyAny>)> {
    let options = SegmentOptions {
        slab_thickness: slab,
        workers,
    };
    let (mask, stats) = py
        .detach(|| {
            faith_core::segment(
                &volume.inner,
                ThresholdRule::Adaptive(&model.inner),
                options,
                None,
            )
        })
        .map_err(segment_err)?;
    let stats = serde_json::to_string(&stats).expect("stats serialize");
    Ok((PyBytes::new(py, mask.bytes()), json_to_py(py, &stats)?))
}

/// Minimum cross entropy threshold of the `env_size` window around each position.
#[pyfunction]
#[pyo3(signature = (volume, positions, env_size = 5))]
fn local_mce(volume: &PyVolume, positions: Vec<Position>, env_size: usize) -> PyResult<Vec<f64>> {
    let envs = positions
        .iter()
        .map(|&p| volume.inner.extract_environment(p, env_size))
        .collect::<Result<Vec<_>, _>>()
        .map_err(volume_err)?;
    let thresholds = mce::local_thresholds(&envs).map_err(value_err)?;
    Ok(thresholds.iter().map(|t| t.threshold).collect())
}

/// Solves the constrained elastic net for fixed `lam` and `mu`; returns beta.
#[pyfunction]
#[pyo3(signature = (features, targets, theta_g, max_value, lam, mu))]
fn solve(
    py: Python<'_>,
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    theta_g: f64,
    max_value: f64,
    lam: f64,
    mu: f64,
) -> PyResult<Vec<f64>> {
    let rows = features.len();
    let cols = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != cols) {
        return Err(value_err("feature rows differ in length"));
    }
    let f = Array2::from_shape_vec((rows, cols), features.concat()).map_err(value_err)?;
    let t = Array1::from(targets);
    let params = SolverParams::new(lam, mu).map_err(value_err)?;
    let solution = py
        .detach(|| solve_faith(f.view(), t.view(), theta_g, max_value, &params))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(solution.beta.to_vec())
}

#[pymodule]
fn faith(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPhantom>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(local_mce, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    Ok(())
}

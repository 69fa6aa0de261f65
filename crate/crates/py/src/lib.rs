//! Python bindings for occflow: configs, grids, clips, the world model,
//! the pipeline commands and the representation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use occflow::likelihood::Divergence;
use occflow::metrics::{self, FeatureSet};
use occflow::numerics::rng::seeded;
use occflow::numerics::Tensor;
use occflow::occupancy::{self as occ, Domain, OccupancyGrid, SequenceClip};
use occflow::pipeline::{commands, Checkpoint, ExperimentConfig, Strategy, WorldModel};

fn py_err(e: occflow::Error) -> PyErr {
    match e {
        occflow::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for occflow::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).py()
}

fn domain(name: &str) -> PyResult<Domain> {
    name.parse().py()
}

/// Experiment configuration; `Config()` gives the desk defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ExperimentConfig::from_toml_str(t).py()?,
            None => ExperimentConfig::default(),
        };
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(path).py()?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().py()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn target(&self) -> &'static str {
        self.inner.target.name()
    }
}

/// Voxel grid of class ids; 0 is free space.
#[pyclass(name = "Grid", from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: OccupancyGrid,
}

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (dims, classes, n_classes, resolution=0.5))]
    fn new(dims: [usize; 3], classes: Vec<u8>, n_classes: u32, resolution: f32) -> PyResult<Self> {
        Ok(Self {
            inner: OccupancyGrid::new(dims, resolution, [0.0; 3], n_classes, classes).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: occ::load_grid(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        occ::save_grid(path, &self.inner).py()
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn n_classes(&self) -> u32 {
        self.inner.n_classes()
    }

    #[getter]
    fn resolution(&self) -> f32 {
        self.inner.resolution()
    }

    fn classes(&self) -> Vec<u8> {
        self.inner.classes().to_vec()
    }

    fn occupied_count(&self) -> usize {
        self.inner.occupied_count()
    }

    fn iou(&self, other: &PyGrid) -> PyResult<f64> {
        occ::iou(&self.inner, &other.inner).py()
    }

    /// `(per_class, mean)`; classes absent from both grids are `None`.
    fn miou(&self, other: &PyGrid) -> PyResult<(Vec<Option<f64>>, f64)> {
        let r = occ::miou(&self.inner, &other.inner, self.inner.n_classes() as usize).py()?;
        Ok((r.per_class, r.mean))
    }

    fn erase_labels(&self) -> Self {
        Self {
            inner: self.inner.erase_labels(),
        }
    }

    fn downsample(&self, factor: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.downsample(factor).py()?,
        })
    }

    fn __eq__(&self, other: &PyGrid) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Grid(dims={:?}, n_classes={}, occupied={})", self.inner.dims(), self.inner.n_classes(), self.inner.occupied_count())
    }
}

/// Sequence of frames with ego poses.
#[pyclass(name = "Clip", from_py_object)]
#[derive(Clone)]
struct PyClip {
    inner: SequenceClip,
}

#[pymethods]
impl PyClip {
    /// Synthetic clip of `domain` ("outdoor", "semantic", "high_res",
    /// "indoor") at the config's model resolution.
    #[staticmethod]
    #[pyo3(signature = (domain, seed, config=None))]
    fn synth(domain: &str, seed: u64, config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        Ok(Self {
            inner: occflow::pipeline::domain_clip(&cfg, self::domain(domain)?, seed).py()?,
        })
    }

    fn frames(&self) -> Vec<PyGrid> {
        self.inner.frames().iter().map(|g| PyGrid { inner: g.clone() }).collect()
    }

    /// `(dx, dy, dyaw)` per frame relative to the previous one.
    fn trajectory(&self) -> Vec<(f64, f64, f64)> {
        self.inner.trajectory().iter().map(|p| (p.x, p.y, p.yaw)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Compressor plus velocity network loaded from a checkpoint directory.
#[pyclass(name = "WorldModel")]
struct PyWorldModel {
    inner: WorldModel,
}

#[pymethods]
impl PyWorldModel {
    /// Loads a checkpoint; with `config`, its hash must match.
    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&PyConfig>) -> PyResult<Self> {
        let hash = config.map(|c| c.inner.hash());
        let ck = Checkpoint::load(path, hash.as_deref()).py()?;
        Ok(Self {
            inner: WorldModel::from_checkpoint(&ck).py()?,
        })
    }

    #[getter]
    fn domain(&self) -> &'static str {
        self.inner.domain.name()
    }

    #[getter]
    fn frame_len(&self) -> usize {
        self.inner.frame_len()
    }

    #[getter]
    fn latent_scale(&self) -> f64 {
        self.inner.flow_cfg.latent_scale
    }

    /// Forecast frames of `clip` from its history.
    #[pyo3(signature = (clip, nfe=10, cfg_scale=0.0, seed=0))]
    fn forecast(&self, clip: &PyClip, nfe: usize, cfg_scale: f64, seed: u64) -> PyResult<Vec<PyGrid>> {
        let f = commands::cmd_sample(&self.inner, &clip.inner, nfe, cfg_scale, seed).py()?;
        Ok(f.frames.into_iter().map(|g| PyGrid { inner: g }).collect())
    }

    /// Bits per dimension of the clip's future latents; `n_probes = 0` uses
    /// the exact divergence.
    #[pyo3(signature = (clip, n_probes=16, cfg_scale=0.0, seed=0))]
    fn bpd(&self, clip: &PyClip, n_probes: usize, cfg_scale: f64, seed: u64) -> PyResult<f64> {
        let div = match n_probes {
            0 => Divergence::Exact,
            n => Divergence::Hutchinson { n_probes: n },
        };
        let lp = self
            .inner
            .log_prob(&clip.inner, cfg_scale, &Default::default(), div, &mut seeded(seed))
            .py()?;
        Ok(lp.bpd())
    }

    /// Posterior means of a grid, flattened.
    fn encode(&self, grid: &PyGrid) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode_mu(&[&grid.inner]).py()?.into_data())
    }
}

/// Pretrains under `config` and writes the checkpoint to `out`.
#[pyfunction]
#[pyo3(signature = (config, out, seed=0))]
fn pretrain(py: Python<'_>, config: &PyConfig, out: PathBuf, seed: u64) -> PyResult<()> {
    let cfg = config.inner.clone();
    py.detach(move || commands::cmd_pretrain(&cfg, seed)?.save(out)).py()
}

/// Fine-tunes a pretrained checkpoint on the config's target domain.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, out, strategy="full", fraction=0.1, seed=0))]
fn finetune(py: Python<'_>, config: &PyConfig, checkpoint: PathBuf, out: PathBuf, strategy: &str, fraction: f64, seed: u64) -> PyResult<()> {
    let cfg = config.inner.clone();
    let strategy: Strategy = strategy.parse().py()?;
    py.detach(move || {
        let pre = Checkpoint::load(checkpoint, Some(&cfg.hash()))?;
        commands::cmd_finetune(&cfg, &pre, strategy, fraction, seed)?.save(out)
    })
    .py()
}

/// Forecast metrics of a model on its validation pool, as CSV text.
#[pyfunction]
#[pyo3(signature = (config, model, seeds=vec![0]))]
fn evaluate(config: &PyConfig, model: &PyWorldModel, seeds: Vec<u64>) -> PyResult<String> {
    let cfg = &config.inner;
    let val = occflow::pipeline::validation_pool(cfg, model.inner.domain).py()?;
    let clips: Vec<&SequenceClip> = val.iter().collect();
    let f = commands::ModelForecaster {
        model: &model.inner,
        nfe: model.inner.flow_cfg.nfe,
        cfg_scale: model.inner.flow_cfg.cfg_scale,
    };
    commands::cmd_evaluate(cfg, &f, &clips, &seeds).py()?.to_csv_string().py()
}

/// CKA with RBF kernels; `sigma=None` uses the median heuristic.
#[pyfunction]
#[pyo3(signature = (x, y, sigma=None))]
fn cka(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, sigma: Option<f64>) -> PyResult<f64> {
    metrics::cka(&matrix(x)?, &matrix(y)?, sigma).py()
}

#[pyfunction]
#[pyo3(signature = (x, y, k=10, sigma=None))]
fn cknna(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, k: usize, sigma: Option<f64>) -> PyResult<f64> {
    metrics::cknna(&matrix(x)?, &matrix(y)?, k, sigma).py()
}

#[pyfunction]
fn frechet_distance(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let (a, b) = (FeatureSet::new(matrix(x)?, "x").py()?, FeatureSet::new(matrix(y)?, "y").py()?);
    metrics::frechet_distance(&a, &b).py()
}

/// Unbiased KID; returns `(value, sigma)`.
#[pyfunction]
#[pyo3(signature = (x, y, sigma=None))]
fn kid(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, sigma: Option<f64>) -> PyResult<(f64, f64)> {
    let (a, b) = (FeatureSet::new(matrix(x)?, "x").py()?, FeatureSet::new(matrix(y)?, "y").py()?);
    metrics::kid(&a, &b, sigma).py()
}

#[pyfunction]
fn mean_cosine(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(metrics::mean_cosine(&matrix(x)?, &matrix(y)?).py()?.0)
}

#[pymodule]
fn occflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyClip>()?;
    m.add_class::<PyWorldModel>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cka, m)?)?;
    m.add_function(wrap_pyfunction!(cknna, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(kid, m)?)?;
    m.add_function(wrap_pyfunction!(mean_cosine, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

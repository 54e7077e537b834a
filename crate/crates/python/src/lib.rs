//! Python bindings: scene generation, inference, query aggregation,
//! bipartite matching and training.

use std::path::Path;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sacq::harness::data::{generate_scene as gen_scene, DataConfig, Split};
use sacq::harness::train::{train as run_training, ExperimentConfig};
use sacq::matching::hungarian_match;
use sacq::model::{checkpoint, Detector as CoreDetector, DetectorConfig, Predictions};
use sacq::qa::{qa_apply, QaConfig};
use sacq::{Precision, Tensor};

fn py_err(e: sacq::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(PyValueError::new_err(format!("split must be 'train' or 'val', got {other:?}"))),
    }
}

fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width.max(1)).map(<[f64]>::to_vec).collect()
}

type Scene = (Vec<f64>, (usize, usize, usize), Vec<(usize, [f64; 4])>);

/// Returns `(pixels, (3, h, w), [(class, [cx, cy, w, h]), ...])` with pixels
/// flattened channel-major.
#[pyfunction]
#[pyo3(signature = (seed, index, split = "train", image_size = 64))]
fn generate_scene(seed: u64, index: u64, split: &str, image_size: usize) -> PyResult<Scene> {
    let config = DataConfig {
        image_size,
        ..DataConfig::default()
    };
    config.validate().map_err(py_err)?;
    let scene = gen_scene(seed, parse_split(split)?, index, &config);
    let targets = scene.targets.iter().map(|t| (t.class, t.bbox)).collect();
    Ok((scene.image.data().to_vec(), (3, image_size, image_size), targets))
}

/// Groups of merged query indices plus the merged class rows and boxes.
#[pyfunction]
#[pyo3(signature = (probs, boxes, t_c = 3e-7, t_b = 0.9))]
fn merge(probs: Vec<Vec<f64>>, boxes: Vec<[f64; 4]>, t_c: f64, t_b: f64) -> PyResult<(Vec<Vec<usize>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let q = probs.len();
    let m = probs.first().map_or(0, Vec::len);
    if boxes.len() != q || probs.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("probs must be q × m and boxes must have q rows"));
    }
    let config = QaConfig {
        t_c,
        t_b,
        ..QaConfig::default()
    };
    config.validate().map_err(py_err)?;
    let pred = Predictions {
        q,
        m,
        logits: vec![0.0; q * m],
        probs: probs.concat(),
        boxes: boxes.concat(),
    };
    let plan = qa_apply(&pred, &config).map_err(py_err)?;
    Ok((plan.groups, rows(&plan.merged.probs, m), rows(&plan.merged.boxes, 4)))
}

/// Minimum-cost assignment of a `predictions × targets` cost matrix; returns
/// `(pairs, total_cost)` with pairs `(prediction, target)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let n_pred = cost.len();
    let n_tgt = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != n_tgt) {
        return Err(PyValueError::new_err("cost rows differ in length"));
    }
    let r = hungarian_match(&cost.concat(), n_pred, n_tgt).map_err(py_err)?;
    Ok((r.pairs, r.total_cost))
}

/// Trains from a JSON experiment config; returns the number of steps run.
#[pyfunction]
#[pyo3(signature = (config_json = None, out_dir = None, seed = None))]
fn train(py: Python<'_>, config_json: Option<&str>, out_dir: Option<&str>, seed: Option<u64>) -> PyResult<usize> {
    let mut config: ExperimentConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        config.train.seed = s;
    }
    let trainer = py
        .detach(|| run_training(config, out_dir.map(Path::new)))
        .map_err(py_err)?;
    Ok(trainer.step)
}

#[pyclass]
struct Detector {
    inner: CoreDetector,
}

#[pymethods]
impl Detector {
    /// A freshly initialized detector; `config_json` holds `DetectorConfig`
    /// fields, missing ones take their defaults.
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: DetectorConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => DetectorConfig::default(),
        };
        let inner = CoreDetector::new(config, seed, Precision::F32).map_err(py_err)?;
        Ok(Detector { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, _) = checkpoint::load(Path::new(path)).map_err(py_err)?;
        Ok(Detector { inner })
    }

    #[getter]
    fn num_queries(&self) -> usize {
        self.inner.config.q
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.m
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.numel()
    }

    /// Per decoder layer `(probs [q][m], boxes [q][4])` for a channel-major
    /// `3 × height × width` image.
    fn predict(&self, py: Python<'_>, pixels: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
        let image = Tensor::new(&[3, height, width], pixels).map_err(py_err)?;
        let layers = py.detach(|| self.inner.predict(&image)).map_err(py_err)?;
        Ok(layers
            .iter()
            .map(|p| (rows(&p.probs, p.m), rows(&p.boxes, 4)))
            .collect())
    }
}

#[pymodule]
fn sacq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Detector>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

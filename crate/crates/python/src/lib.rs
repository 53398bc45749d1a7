//! Python bindings. Images cross the boundary as nested sequences `[3][H][W]` of floats in
//! `[0, 1]`, masks as `[H][W]` of 0/1; numpy arrays work anywhere a sequence does.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use bitemporal_core::checkpoint::Checkpoint;
use bitemporal_core::config::{RunConfig, Split};
use bitemporal_core::csdw::compute_weights;
use bitemporal_core::data::{synth_sample, SynthConfig};
use bitemporal_core::infer::predict_mask;
use bitemporal_core::metrics::{self, BinaryMask, ConfusionCounts, MetricSet};
use bitemporal_core::optim::AdamW;
use bitemporal_core::similarity;
use bitemporal_core::train::{evaluate, train as train_run};
use bitemporal_core::{Error, Model, Scalar, Shape, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn planes_to_tensor<T: Scalar>(planes: Vec<Vec<Vec<T>>>) -> PyResult<Tensor<T>> {
    let c = planes.len();
    let h = planes.first().map_or(0, Vec::len);
    let w = planes.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if c == 0 || h == 0 || w == 0 {
        return Err(PyValueError::new_err("expected a non-empty [C][H][W] array"));
    }
    if planes.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("ragged [C][H][W] array"));
    }
    let data = planes.into_iter().flatten().flatten().collect();
    Tensor::new(Shape::new(1, c, h, w), data).map_err(to_py)
}

fn tensor_to_planes<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<Vec<T>>> {
    let [_, c, h, w] = t.shape().0;
    (0..c).map(|ch| (0..h).map(|y| (0..w).map(|x| t.at(0, ch, y, x)).collect()).collect()).collect()
}

fn rows_to_mask(rows: Vec<Vec<u8>>) -> PyResult<BinaryMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged mask"));
    }
    BinaryMask::new(h, w, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn mask_to_rows(m: &BinaryMask) -> Vec<Vec<u8>> {
    m.data().chunks(m.width().max(1)).map(<[u8]>::to_vec).collect()
}

fn metric_dict<'py>(py: Python<'py>, m: &MetricSet) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in [("oa", m.oa), ("iou", m.iou), ("f1", m.f1), ("rec", m.rec), ("prec", m.prec)] {
        d.set_item(k, v)?;
    }
    d.set_item("undefined", m.undefined.any())?;
    Ok(d)
}

fn parse_config(config: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = match config {
        Some(text) => RunConfig::from_toml(text).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Change detector with its run configuration.
#[pyclass(name = "ChangeDetector", module = "bitemporal")]
struct PyChangeDetector {
    model: Model<f32>,
    config: RunConfig,
}

#[pymethods]
impl PyChangeDetector {
    /// Freshly initialised model. `config` is TOML text; omitted keys take their defaults.
    #[new]
    #[pyo3(signature = (config=None, seed=None))]
    fn new(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let config = parse_config(config, seed)?;
        let model = Model::new(&config.model, config.seed).map_err(to_py)?;
        Ok(PyChangeDetector { model, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::<f32>::load(&path).map_err(to_py)?;
        Ok(PyChangeDetector { model: ck.model().map_err(to_py)?, config: ck.config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            config: self.config.clone(),
            epoch: 0,
            best_epoch: 0,
            best_val_iou: 0.0,
            params: self.model.params.clone(),
            optimizer: AdamW::new(self.config.optimizer.clone(), &self.model.params),
        };
        ck.save(&path).map_err(to_py)
    }

    /// The run configuration as TOML.
    #[getter]
    fn config(&self) -> String {
        self.config.to_toml()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params.num_scalars()
    }

    /// Class probabilities `[2][H][W]` from one forward pass; sides must be multiples of 32.
    fn probabilities(&self, img_a: Vec<Vec<Vec<f32>>>, img_b: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let (a, b) = (planes_to_tensor(img_a)?, planes_to_tensor(img_b)?);
        Ok(tensor_to_planes(&self.model.probabilities(&a, &b).map_err(to_py)?))
    }

    /// Binary change mask `[H][W]`, tiling images larger than the inference patch.
    #[pyo3(signature = (img_a, img_b, patch=None, stride=None))]
    fn predict(
        &self,
        img_a: Vec<Vec<Vec<f32>>>,
        img_b: Vec<Vec<Vec<f32>>>,
        patch: Option<usize>,
        stride: Option<usize>,
    ) -> PyResult<Vec<Vec<u8>>> {
        let (a, b) = (planes_to_tensor(img_a)?, planes_to_tensor(img_b)?);
        let patch = patch.unwrap_or(self.config.infer.patch);
        let stride = stride.unwrap_or_else(|| self.config.infer.effective_stride().min(patch));
        Ok(mask_to_rows(&predict_mask(&self.model, &a, &b, patch, stride).map_err(to_py)?))
    }

    /// Whole-image RGB cosine plus per-level channel-similarity maps and spatial-similarity vectors.
    fn similarity<'py>(
        &self,
        py: Python<'py>,
        img_a: Vec<Vec<Vec<f32>>>,
        img_b: Vec<Vec<Vec<f32>>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (a, b) = (planes_to_tensor(img_a)?, planes_to_tensor(img_b)?);
        let report = similarity::analyze_similarity(&self.model, &a, &b).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("rgb_cosine", report.rgb_cosine)?;
        let levels: Vec<(Vec<Vec<f32>>, Vec<f32>)> = report
            .levels
            .iter()
            .map(|l| (tensor_to_planes(&l.phi_c).swap_remove(0), l.phi_s.clone()))
            .collect();
        d.set_item("levels", levels)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("ChangeDetector({}, {} parameters)", self.config.variant_label(), self.model.params.num_scalars())
    }
}

/// Train on the splits named by `config` and return the best model and per-epoch history.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn train<'py>(
    py: Python<'py>,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(PyChangeDetector, Vec<Bound<'py, PyDict>>)> {
    let cfg = parse_config(config, seed)?;
    let train_set = cfg.data.load_split(Split::Train, cfg.seed).map_err(to_py)?;
    let val_set = cfg.data.load_split(Split::Val, cfg.seed).map_err(to_py)?;
    let out = train_run(&cfg, &train_set, &val_set, |_| {}).map_err(to_py)?;
    let history = out
        .history
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("mean_loss", e.mean_loss)?;
            d.set_item("val_iou", e.val.map(|m| m.iou))?;
            d.set_item("is_best", e.is_best)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    let model = out.best.model().map_err(to_py)?;
    Ok((PyChangeDetector { model, config: cfg }, history))
}

/// Micro-averaged metrics of `model` on a split (`"train"`, `"val"` or `"test"`).
#[pyfunction]
#[pyo3(signature = (model, split="test"))]
fn evaluate_split<'py>(py: Python<'py>, model: &PyChangeDetector, split: &str) -> PyResult<Bound<'py, PyDict>> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    };
    let cfg = &model.config;
    let samples = cfg.data.load_split(split, cfg.seed).map_err(to_py)?;
    let (counts, _) = evaluate(&model.model, &samples, &cfg.infer).map_err(to_py)?;
    metric_dict(py, &metrics::metrics(&counts).map_err(to_py)?)
}

/// Difference weights of a feature pair `[C][H][W]`: `phi_c` `[H][W]`, `phi_s` `[C]`, `w` `[C][H][W]`.
#[pyfunction]
fn change_weight<'py>(
    py: Python<'py>,
    fa: Vec<Vec<Vec<f64>>>,
    fb: Vec<Vec<Vec<f64>>>,
) -> PyResult<Bound<'py, PyDict>> {
    let w = compute_weights(&planes_to_tensor(fa)?, &planes_to_tensor(fb)?).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("phi_c", tensor_to_planes(&w.phi_c).swap_remove(0))?;
    d.set_item("phi_s", w.phi_s.data().to_vec())?;
    d.set_item("w", tensor_to_planes(&w.w))?;
    Ok(d)
}

#[pyfunction]
fn confusion<'py>(py: Python<'py>, pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<Bound<'py, PyDict>> {
    let c = metrics::confusion(&rows_to_mask(pred)?, &rows_to_mask(gt)?).map_err(to_py)?;
    let d = PyDict::new(py);
    for (k, v) in [("tp", c.tp), ("fp", c.fp), ("fn", c.fn_), ("tn", c.tn)] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pyfunction]
#[pyo3(name = "metrics")]
fn metrics_from_counts<'py>(py: Python<'py>, tp: u64, fp: u64, r#fn: u64, tn: u64) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::metrics(&ConfusionCounts { tp, fp, fn_: r#fn, tn }).map_err(to_py)?;
    metric_dict(py, &m)
}

/// One generated pair: `img_a`, `img_b` as `[3][H][W]` and `mask` as `[H][W]`.
#[pyfunction]
#[pyo3(signature = (seed, index, size=64))]
fn synth_pair<'py>(py: Python<'py>, seed: u64, index: usize, size: usize) -> PyResult<Bound<'py, PyDict>> {
    let s = synth_sample(&SynthConfig { size, ..SynthConfig::default() }, seed, index).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("id", &s.id)?;
    d.set_item("img_a", tensor_to_planes(&s.img_a))?;
    d.set_item("img_b", tensor_to_planes(&s.img_b))?;
    d.set_item("mask", mask_to_rows(&s.mask))?;
    Ok(d)
}

#[pymodule]
fn bitemporal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChangeDetector>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_split, m)?)?;
    m.add_function(wrap_pyfunction!(change_weight, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(synth_pair, m)?)?;
    Ok(())
}

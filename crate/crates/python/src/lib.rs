//! Python bindings: scans, taxonomies, embedding tables, models and
//! checkpoints, metrics, curve codes and the training entry point.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

use pptseg::data::Split;
use pptseg::data::{ClassTaxonomy, ConditionTag, PointScan, NUM_CLASSES};
use pptseg::metrics::{ConfusionMatrix, Summary};
use pptseg::network::{EmbeddingTable, ModelConfig, SegModel};
use pptseg::pipeline::{
    evaluate_with, load_checkpoint, predict_with, run_training, AnyCheckpoint, Checkpoint,
    CheckpointMeta, EvalReport, RunConfig,
};
use pptseg::serialization::{hilbert_decode, hilbert_encode, morton_decode, morton_encode};
use pptseg::synthetic::{synthetic_dataset, synthetic_run_config, write_dataset, SyntheticConfig};
use pptseg::Error;

create_exception!(pptseg, PptsegError, PyException);

/// Usage problems become `ValueError`, I/O `OSError`, the rest `PptsegError`.
fn to_py(e: Error) -> PyErr {
    match &e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ if e.is_usage() => PyValueError::new_err(e.to_string()),
        Error::UnknownCondition(_) | Error::Shape { .. } | Error::LabelMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PptsegError::new_err(e.to_string()),
    }
}

fn tag(name: &str) -> PyResult<ConditionTag> {
    ConditionTag::new(name).map_err(to_py)
}

#[pyclass(name = "PointScan", module = "pptseg", frozen, from_py_object)]
#[derive(Clone)]
struct PyPointScan {
    inner: PointScan,
}

#[pymethods]
impl PyPointScan {
    #[new]
    #[pyo3(signature = (coords, intensity, condition, labels=None))]
    fn new(
        coords: Vec<[f32; 3]>,
        intensity: Vec<f32>,
        condition: &str,
        labels: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let inner = PointScan::new(coords, intensity, labels, tag(condition)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn condition(&self) -> String {
        self.inner.condition().to_string()
    }

    #[getter]
    fn coords(&self) -> Vec<[f32; 3]> {
        self.inner.coords().to_vec()
    }

    #[getter]
    fn intensity(&self) -> Vec<f32> {
        self.inner.intensity().to_vec()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().map(<[usize]>::to_vec)
    }

    fn __repr__(&self) -> String {
        format!(
            "PointScan({} points, condition={:?})",
            self.inner.len(),
            self.inner.condition().as_str()
        )
    }
}

#[pyclass(name = "ClassTaxonomy", module = "pptseg", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTaxonomy {
    inner: ClassTaxonomy,
}

#[pymethods]
impl PyTaxonomy {
    /// Identity mapping over the seven superclass ids.
    #[staticmethod]
    fn direct() -> Self {
        Self {
            inner: ClassTaxonomy::direct(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ClassTaxonomy::load(path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ClassTaxonomy::parse(text).map_err(to_py)?,
        })
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.superclass_names().to_vec()
    }

    #[getter]
    fn ignore_index(&self) -> usize {
        self.inner.ignore_index()
    }

    fn lookup(&self, raw: u16) -> usize {
        self.inner.lookup(raw)
    }

    fn class_index(&self, name: &str) -> Option<usize> {
        self.inner.class_index(name)
    }
}

/// Read side of the `PPTE` class-embedding format.
#[pyclass(
    name = "EmbeddingTable",
    module = "pptseg",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyEmbeddingTable {
    inner: EmbeddingTable,
}

#[pymethods]
impl PyEmbeddingTable {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingTable::load(path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingTable::from_bytes(data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn orthonormal(dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingTable::orthonormal(dim).map_err(to_py)?,
        })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.rows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.row(i).to_vec())
    }

    /// Everything wrong with the table for `taxonomy`; empty when usable.
    fn problems(&self, taxonomy: &PyTaxonomy) -> Vec<String> {
        self.inner.problems(&taxonomy.inner)
    }

    fn validate(&self, taxonomy: &PyTaxonomy) -> PyResult<()> {
        self.inner.validate(&taxonomy.inner).map_err(to_py)
    }
}

fn summary_dict<'py>(
    py: Python<'py>,
    s: &Summary,
    names: &[String],
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("miou", s.miou)?;
    d.set_item("macc", s.macc)?;
    d.set_item("allacc", s.allacc)?;
    let iou = pyo3::types::PyDict::new(py);
    let acc = pyo3::types::PyDict::new(py);
    for (c, name) in names.iter().enumerate().take(NUM_CLASSES) {
        iou.set_item(name, s.per_class_iou[c])?;
        acc.set_item(name, s.per_class_acc[c])?;
    }
    d.set_item("iou", iou)?;
    d.set_item("acc", acc)?;
    Ok(d)
}

fn default_names() -> Vec<String> {
    ClassTaxonomy::direct().superclass_names().to_vec()
}

#[pyclass(name = "ConfusionMatrix", module = "pptseg", skip_from_py_object)]
#[derive(Clone, Default)]
struct PyConfusionMatrix {
    inner: ConfusionMatrix,
}

#[pymethods]
impl PyConfusionMatrix {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[pyo3(signature = (pred, gt, ignore_index=255))]
    fn update(&mut self, pred: Vec<usize>, gt: Vec<usize>, ignore_index: usize) -> PyResult<()> {
        self.inner.update(&pred, &gt, ignore_index).map_err(to_py)
    }

    fn merge(&mut self, other: &PyConfusionMatrix) {
        self.inner.merge(&other.inner);
    }

    #[getter]
    fn counts(&self) -> Vec<Vec<u64>> {
        self.inner.counts.iter().map(|r| r.to_vec()).collect()
    }

    /// Metrics as a dict; NaN marks classes absent from both sides.
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        summary_dict(py, &self.inner.summarize(), &default_names())
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let names = default_names();
    let d = pyo3::types::PyDict::new(py);
    for (c, m) in &r.platforms {
        d.set_item(c.as_str(), summary_dict(py, &m.summarize(), &names)?)?;
    }
    d.set_item("all", summary_dict(py, &r.merged.summarize(), &names)?)?;
    Ok(d)
}

/// A segmentation model in either precision, optionally carrying the
/// optimizer state it was loaded with.
#[pyclass(name = "Model", module = "pptseg")]
struct PyModel {
    inner: AnyCheckpoint,
}

#[pymethods]
impl PyModel {
    /// `config` is a TOML table of model settings; omitted keys take defaults.
    #[new]
    #[pyo3(signature = (config="", seed=0, embedding=None, precision="f32"))]
    fn new(
        config: &str,
        seed: u64,
        embedding: Option<&PyEmbeddingTable>,
        precision: &str,
    ) -> PyResult<Self> {
        let cfg: ModelConfig =
            toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let table = embedding.map(|t| t.inner.clone());
        let meta = CheckpointMeta::default();
        let inner = match precision {
            "f32" => AnyCheckpoint::F32(Checkpoint {
                model: SegModel::new(cfg, seed, table).map_err(to_py)?,
                optimizer: None,
                meta,
            }),
            "f64" => AnyCheckpoint::F64(Checkpoint {
                model: SegModel::new(cfg, seed, table).map_err(to_py)?,
                optimizer: None,
                meta,
            }),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown precision {other:?}"
                )))
            }
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        match &self.inner {
            AnyCheckpoint::F32(c) => c.save(path),
            AnyCheckpoint::F64(c) => c.save(path),
        }
        .map_err(to_py)
    }

    #[getter]
    fn precision(&self) -> String {
        self.inner.precision().to_string()
    }

    #[getter]
    fn alignment(&self) -> String {
        self.config().alignment.to_string()
    }

    #[getter]
    fn conditions(&self) -> Vec<String> {
        self.config()
            .conditions
            .iter()
            .map(|c| c.to_string())
            .collect()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        match &self.inner {
            AnyCheckpoint::F32(c) => c.model.params().num_values(),
            AnyCheckpoint::F64(c) => c.model.params().num_values(),
        }
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.meta().epoch
    }

    /// Per-point superclass ids.
    fn predict(&self, scan: &PyPointScan) -> PyResult<Vec<usize>> {
        predict_with(&self.inner, &scan.inner).map_err(to_py)
    }

    /// Per-platform and merged metrics over labelled scans.
    #[pyo3(signature = (scans, ignore_index=255))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        scans: Vec<PyPointScan>,
        ignore_index: usize,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let scans: Vec<PointScan> = scans.into_iter().map(|s| s.inner).collect();
        let report =
            evaluate_with(&scans, ignore_index, |s| predict_with(&self.inner, s)).map_err(to_py)?;
        report_dict(py, &report)
    }
}

impl PyModel {
    fn config(&self) -> &ModelConfig {
        match &self.inner {
            AnyCheckpoint::F32(c) => c.model.config(),
            AnyCheckpoint::F64(c) => c.model.config(),
        }
    }
}

/// Runs a training config to completion; returns the metric log lines and
/// the checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, epochs=None, seed=None))]
fn train(
    py: Python<'_>,
    config: PathBuf,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(Vec<String>, PathBuf)> {
    let mut cfg = RunConfig::load(&config).map_err(to_py)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = py.detach(|| run_training(&cfg)).map_err(to_py)?;
    Ok((
        out.records.iter().map(|r| r.log_line()).collect(),
        out.checkpoint,
    ))
}

/// Labelled scans from the built-in multi-platform generator.
#[pyfunction]
#[pyo3(signature = (seed=0, scans_per_platform=2, points_per_scan=500))]
fn synthetic_scans(
    seed: u64,
    scans_per_platform: usize,
    points_per_scan: usize,
) -> PyResult<Vec<PyPointScan>> {
    let cfg = SyntheticConfig {
        scans_per_platform,
        points_per_scan,
        ..SyntheticConfig::default()
    };
    let scans = synthetic_dataset(&cfg, seed).map_err(to_py)?;
    Ok(scans
        .into_iter()
        .map(|inner| PyPointScan { inner })
        .collect())
}

/// Writes train and val datasets, a taxonomy and `run.toml` under `out`;
/// returns the path of `run.toml`.
#[pyfunction]
#[pyo3(signature = (out, seed=0, scans_per_platform=2, points_per_scan=500))]
fn write_synthetic(
    out: PathBuf,
    seed: u64,
    scans_per_platform: usize,
    points_per_scan: usize,
) -> PyResult<PathBuf> {
    let cfg = SyntheticConfig {
        scans_per_platform,
        points_per_scan,
        ..SyntheticConfig::default()
    };
    let train = synthetic_dataset(&cfg, seed).map_err(to_py)?;
    let val = synthetic_dataset(&cfg, seed.wrapping_add(1)).map_err(to_py)?;
    write_dataset(&out, "train", Split::Train, &train, 0.0, seed).map_err(to_py)?;
    write_dataset(&out, "val", Split::Val, &val, 0.0, seed).map_err(to_py)?;
    let run = out.join("run.toml");
    let text = synthetic_run_config().to_toml().map_err(to_py)?;
    std::fs::write(&run, text).map_err(|e| to_py(Error::io(&run, e)))?;
    Ok(run)
}

#[pyfunction]
fn curve_encode(curve: &str, voxel: [u32; 3], bits: u32) -> PyResult<u64> {
    match curve {
        "hilbert" => hilbert_encode(voxel, bits),
        "morton" => morton_encode(voxel, bits),
        other => return Err(PyValueError::new_err(format!("unknown curve {other:?}"))),
    }
    .map_err(to_py)
}

#[pyfunction]
fn curve_decode(curve: &str, code: u64, bits: u32) -> PyResult<[u32; 3]> {
    match curve {
        "hilbert" => Ok(hilbert_decode(code, bits)),
        "morton" => Ok(morton_decode(code, bits)),
        other => Err(PyValueError::new_err(format!("unknown curve {other:?}"))),
    }
}

#[pymodule]
#[pyo3(name = "pptseg")]
fn pptseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PptsegError", m.py().get_type::<PptsegError>())?;
    m.add("NUM_CLASSES", NUM_CLASSES)?;
    m.add_class::<PyPointScan>()?;
    m.add_class::<PyTaxonomy>()?;
    m.add_class::<PyEmbeddingTable>()?;
    m.add_class::<PyConfusionMatrix>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_scans, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(curve_encode, m)?)?;
    m.add_function(wrap_pyfunction!(curve_decode, m)?)?;
    Ok(())
}

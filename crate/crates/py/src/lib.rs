//! Python bindings. Structured values cross the boundary as JSON-compatible
//! Python objects (dicts, lists, floats).

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use loba_core::corpus::{self, CorpusConfig, DatasetShard};
use loba_core::geometry::{self, BoundingBox, PixelMask};
use loba_core::harness::{self, AnswerMode};
use loba_core::metrics::{self, LabelLexicon};
use loba_core::model::{self, checkpoint, ModelParams};
use loba_core::self_prompting as sp;

fn err(e: loba_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes `value` and hands it to Python's `json.loads`.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(module = "loba", name = "Shard")]
struct PyShard {
    inner: DatasetShard,
}

#[pymethods]
impl PyShard {
    /// Generates a shard of synthetic scenes with their relations and QA items.
    #[staticmethod]
    #[pyo3(signature = (scenes, seed=0, delta=0.5))]
    fn build(scenes: usize, seed: u64, delta: f64) -> PyResult<Self> {
        let inner = corpus::build_shard(&CorpusConfig {
            scenes,
            seed,
            delta,
            ..CorpusConfig::default()
        })
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: corpus::read_shard(&path).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_shard(&self.inner, &path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.qa.len()
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.manifest)
    }

    fn qa<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.qa)
    }

    fn scene_ids(&self) -> Vec<String> {
        self.inner.scenes.iter().map(|s| s.scene_id.clone()).collect()
    }

    fn scene<'py>(&self, py: Python<'py>, scene_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let scene = self
            .inner
            .scene(scene_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown scene `{scene_id}`")))?;
        to_py(py, scene)
    }

    fn image(&self, scene_id: &str) -> PyResult<Vec<f64>> {
        self.inner
            .scene(scene_id)
            .map(|s| s.image.clone())
            .ok_or_else(|| PyValueError::new_err(format!("unknown scene `{scene_id}`")))
    }

    fn relations(&self, scene_id: &str) -> PyResult<Vec<(String, String)>> {
        self.inner
            .relations(scene_id)
            .map(|r| r.pairs.iter().cloned().collect())
            .ok_or_else(|| PyValueError::new_err(format!("unknown scene `{scene_id}`")))
    }

    /// Per-kind micro P/R/F1 of `predictions` (qa_id → answer text).
    fn evaluate<'py>(&self, py: Python<'py>, predictions: BTreeMap<String, String>) -> PyResult<Bound<'py, PyAny>> {
        let report = metrics::evaluate(&self.inner, &predictions, &LabelLexicon::default()).map_err(err)?;
        to_py(py, &report)
    }
}

#[pyclass(module = "loba", name = "Model")]
struct PyModel {
    inner: ModelParams,
}

fn mode(loba: bool, alpha: f64, beta: f64) -> AnswerMode {
    if loba {
        AnswerMode::loba(beta, alpha)
    } else {
        AnswerMode::Plain
    }
}

#[pymethods]
impl PyModel {
    /// A freshly initialised model sized for the default scene grid.
    #[new]
    #[pyo3(signature = (seed=0, d_model=32, n_heads=4, n_layers=2))]
    fn new(seed: u64, d_model: usize, n_heads: usize, n_layers: usize) -> PyResult<Self> {
        let mut cfg = harness::model_config_for(&corpus::SceneConfig::default()).map_err(err)?;
        cfg.d_model = d_model;
        cfg.n_heads = n_heads;
        cfg.n_layers = n_layers;
        cfg.d_ff = 2 * d_model;
        Ok(Self {
            inner: ModelParams::init(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.data.len()
    }

    /// Trains in place; returns the per-step total loss.
    #[pyo3(signature = (shard, epochs=1, lr=3e-3, seed=0, batch_size=8))]
    fn train(&mut self, shard: &PyShard, epochs: usize, lr: f64, seed: u64, batch_size: usize) -> PyResult<Vec<f64>> {
        let examples = model::train::build_examples(&shard.inner, &self.inner.tokenizer(), &self.inner).map_err(err)?;
        let cfg = model::TrainConfig {
            epochs,
            lr,
            seed,
            batch_size,
            ..model::TrainConfig::default()
        };
        let report = model::train(&mut self.inner, &examples, &cfg).map_err(err)?;
        Ok(report.curve.iter().map(|p| p.total).collect())
    }

    /// Answers one question about `image`; `loba=True` runs the two-pass
    /// localize-before-answer decoder.
    #[pyo3(signature = (question, image, loba=false, alpha=0.3, beta=2.0))]
    fn answer<'py>(
        &self,
        py: Python<'py>,
        question: &str,
        image: Vec<f64>,
        loba: bool,
        alpha: f64,
        beta: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let pred = harness::answer_one(&self.inner, "", question, &image, &mode(loba, alpha, beta)).map_err(err)?;
        to_py(py, &pred)
    }

    /// Answers every item of `shard`.
    #[pyo3(signature = (shard, loba=false, alpha=0.3, beta=2.0))]
    fn answer_shard<'py>(
        &self,
        py: Python<'py>,
        shard: &PyShard,
        loba: bool,
        alpha: f64,
        beta: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let preds = harness::answer_shard(&self.inner, &shard.inner, &mode(loba, alpha, beta)).map_err(err)?;
        to_py(py, &preds)
    }
}

/// Fraction of `bbox` (x0, y0, x1, y1) covered by the run-length mask.
#[pyfunction]
fn iou_over_disease(bbox: (usize, usize, usize, usize), runs: Vec<(usize, usize)>, width: usize, height: usize) -> PyResult<f64> {
    let (x0, y0, x1, y1) = bbox;
    let b = BoundingBox::new(x0, y0, x1, y1).map_err(err)?;
    let mask = PixelMask { width, height, runs };
    geometry::iou_over_disease(&b, &mask, width, height).map_err(err)
}

/// Softmax after adding `ln β` to the highlighted logits.
#[pyfunction]
fn reweight_attention(logits: Vec<f64>, highlighted: BTreeSet<usize>, beta: f64) -> Vec<f64> {
    sp::reweight_attention(&logits, &highlighted, beta)
}

/// `softmax((1+α)·log p_hl − α·log p_bh)`.
#[pyfunction]
fn contrastive_decode(logp_hl: Vec<f64>, logp_bh: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    sp::contrastive_decode(&logp_hl, &logp_bh, alpha).map_err(err)
}

#[pyfunction]
fn mask_to_patches(runs: Vec<(usize, usize)>, patch_grid: usize, patch_size: usize, coverage_threshold: f64) -> PyResult<BTreeSet<usize>> {
    let side = patch_grid * patch_size;
    let mask = PixelMask { width: side, height: side, runs };
    sp::mask_to_patches(&mask, patch_grid, patch_size, coverage_threshold).map_err(err)
}

/// Disease labels mentioned (and not negated) in free text.
#[pyfunction]
fn extract_labels(text: &str) -> BTreeSet<String> {
    metrics::extract_labels(text, &LabelLexicon::default())
}

/// Micro precision, recall and F1 over label sets.
#[pyfunction]
fn micro_prf<'py>(py: Python<'py>, predicted: Vec<BTreeSet<String>>, gold: Vec<BTreeSet<String>>) -> PyResult<Bound<'py, PyDict>> {
    let p = metrics::micro_prf(&predicted, &gold).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("precision", p.precision)?;
    d.set_item("recall", p.recall)?;
    d.set_item("f1", p.f1)?;
    d.set_item("tp", p.tp)?;
    d.set_item("fp", p.fp)?;
    d.set_item("fn", p.fn_)?;
    Ok(d)
}

/// Fraction of answers to perturbed true positives that are "no".
#[pyfunction]
fn flip_rate(after: Vec<String>) -> PyResult<f64> {
    let before = vec![metrics::YesNo::Yes; after.len()];
    let after: Vec<_> = after.iter().map(|a| metrics::normalize_yesno(a)).collect();
    metrics::flip_rate(&before, &after).map_err(err)
}

#[pymodule]
fn loba(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyShard>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou_over_disease, m)?)?;
    m.add_function(wrap_pyfunction!(reweight_attention, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_decode, m)?)?;
    m.add_function(wrap_pyfunction!(mask_to_patches, m)?)?;
    m.add_function(wrap_pyfunction!(extract_labels, m)?)?;
    m.add_function(wrap_pyfunction!(micro_prf, m)?)?;
    m.add_function(wrap_pyfunction!(flip_rate, m)?)?;
    Ok(())
}

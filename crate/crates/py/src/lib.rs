//! Python bindings: scenes, tokenizer, masks, losses, models, training and evaluation.
//!
//! Structured results cross the boundary as JSON and are decoded with the
//! standard `json` module, so Python sees plain dicts and lists.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use uno_core::evalsuite::{self, eval_compositional, eval_edit, Sampler};
use uno_core::model::{self, init_model, ModelConfig, ModelState};
use uno_core::objectives;
use uno_core::packing::{build_mask, mask_oracle, IntraRule, MaskToggles, SegmentKind, SegmentLayout};
use uno_core::trainer::{self, DataConfig, Stage, StageStream, TrainConfig};
use uno_core::worldgen::{self, caption_scene, decode_probe, render_scene, scene_latent, Scene};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_json<T: serde::de::DeserializeOwned>(text: Option<&str>) -> PyResult<T>
where
    T: Default,
{
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(value_err),
    }
}

/// A scene of up to three objects on a 3x3 grid.
#[pyclass(name = "Scene", module = "uno_lab", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyScene {
    inner: Scene,
}

#[pymethods]
impl PyScene {
    /// Deterministic scene with 1..=max_objects objects.
    #[staticmethod]
    #[pyo3(signature = (seed, max_objects = 3))]
    fn sample(seed: u64, max_objects: usize) -> PyResult<Self> {
        Ok(PyScene { inner: worldgen::sample_scene(seed, max_objects).map_err(value_err)? })
    }

    /// Objects as (shape, color, cell) tuples.
    fn objects(&self) -> Vec<(String, String, u8)> {
        self.inner.objects().iter().map(|o| (o.shape.word().to_string(), o.color.word().to_string(), o.cell)).collect()
    }

    #[pyo3(signature = (template = 0))]
    fn caption(&self, template: usize) -> PyResult<String> {
        let seq = caption_scene(&self.inner, template).map_err(value_err)?;
        worldgen::detokenize(&seq).map_err(value_err)
    }

    /// 16x16 RGB image as row-major bytes.
    fn render<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new(py, &render_scene(&self.inner).to_rgb8())
    }

    /// Latent of the rendered scene, channel-major, 256 floats.
    fn latent(&self) -> Vec<f64> {
        scene_latent(&self.inner).code
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Scene({:?})", self.objects())
    }

    fn __eq__(&self, other: &PyScene) -> bool {
        self.inner == other.inner
    }
}

#[pyfunction]
fn tokenize(text: &str) -> PyResult<Vec<u32>> {
    Ok(worldgen::tokenize(text).map_err(value_err)?.ids)
}

#[pyfunction]
fn detokenize(ids: Vec<u32>) -> PyResult<String> {
    worldgen::detokenize(&worldgen::TokenSeq { ids }).map_err(value_err)
}

fn parse_order(s: &str) -> PyResult<IntraRule> {
    match s {
        "causal" => Ok(IntraRule::Causal),
        "bidirectional" => Ok(IntraRule::Bidirectional),
        other => Err(value_err(format!("metaquery order must be causal or bidirectional, got {other}"))),
    }
}

/// Attention mask of a layout given as (segment kind, length) pairs;
/// `True` means the row may attend the column.
#[pyfunction]
#[pyo3(signature = (segments, mask_condition_prompt = true, metaquery_order = "causal", sup_blocks_see_source = false, oracle = false))]
fn attention_mask(
    segments: Vec<(String, usize)>,
    mask_condition_prompt: bool,
    metaquery_order: &str,
    sup_blocks_see_source: bool,
    oracle: bool,
) -> PyResult<Vec<Vec<bool>>> {
    let order = parse_order(metaquery_order)?;
    let parts = segments
        .iter()
        .map(|(k, n)| Ok((SegmentKind::parse(k).map_err(value_err)?, *n)))
        .collect::<PyResult<Vec<_>>>()?;
    let layout = SegmentLayout::from_lengths(&parts, order, 0.5).map_err(value_err)?;
    let toggles = MaskToggles { mask_condition_prompt, metaquery_order: order, sup_blocks_see_source };
    let mask = if oracle { mask_oracle(&layout, &toggles) } else { build_mask(&layout, &toggles) };
    Ok((0..mask.len()).map(|q| mask.row(q).to_vec()).collect())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(value_err("ragged matrix"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(value_err)
}

/// Negative mean cosine between rows of `states` (truncated to the target width) and `targets`.
#[pyfunction]
fn loss_vision(states: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<f64> {
    objectives::loss_vision(&matrix(states)?, &matrix(targets)?).map_err(value_err)
}

/// Mean next-token cross-entropy of `logits` rows against `targets`.
#[pyfunction]
fn loss_language(logits: Vec<Vec<f64>>, targets: Vec<u32>) -> PyResult<f64> {
    objectives::loss_language(&matrix(logits)?, &targets).map_err(value_err)
}

/// Model parameters, EMA shadow and configuration.
#[pyclass(name = "Model", module = "uno_lab")]
pub struct PyModel {
    state: ModelState,
}

#[pymethods]
impl PyModel {
    /// Fresh model; `config` is a JSON object of ModelConfig fields.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = from_json(config)?;
        Ok(PyModel { state: init_model(&cfg, seed).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { state: model::load_checkpoint(&path).map_err(|e| PyIOError::new_err(e.to_string()))? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.state, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.state.cfg)
    }

    #[getter]
    fn param_count(&self) -> usize {
        model::param_count(&self.state.cfg)
    }

    fn group_names(&self) -> Vec<String> {
        self.state.layout.groups.iter().map(|g| g.name.clone()).collect()
    }

    /// Runs `steps` optimizer steps in place and returns per-step metrics.
    /// `train` and `data` are JSON objects of TrainConfig / DataConfig fields.
    #[pyo3(signature = (train = None, data = None))]
    fn train(&mut self, py: Python<'_>, train: Option<&str>, data: Option<&str>) -> PyResult<Py<PyAny>> {
        let cfg: TrainConfig = from_json(train)?;
        let data: DataConfig = from_json(data)?;
        let stream = StageStream::for_config(&cfg, &self.state.cfg, &data).map_err(value_err)?;
        let state = &mut self.state;
        let log = py.detach(|| trainer::train(state, &cfg, &stream, None)).map_err(value_err)?;
        to_py(py, &log)
    }

    /// Caption cross-entropy on held-out scenes and whether it clears the gate.
    #[pyo3(signature = (scenes = 64, seed = 0, max_objects = 3))]
    fn sufficiency_gate(&self, py: Python<'_>, scenes: usize, seed: u64, max_objects: usize) -> PyResult<Py<PyAny>> {
        let r = trainer::sufficiency_gate(&self.state, scenes, seed, max_objects).map_err(value_err)?;
        to_py(py, &r)
    }

    /// Samples an image for `prompt` and returns the probe reading.
    #[pyo3(signature = (prompt, steps = 32, seed = 0, use_ema = true))]
    fn generate(&self, py: Python<'_>, prompt: &str, steps: usize, seed: u64, use_ema: bool) -> PyResult<Py<PyAny>> {
        let prompt = worldgen::tokenize(prompt).map_err(value_err)?;
        let latent = py.detach(|| evalsuite::generate(&self.state, &prompt, steps, seed, use_ema)).map_err(value_err)?;
        let reading = decode_probe(&latent);
        let out = serde_json::json!({
            "latent": latent.code.clone(),
            "cells": reading.cells.to_vec(),
            "unknown_cells": reading.unknown_cells(),
            "scene": reading.scene(),
        });
        to_py(py, &out)
    }

    #[pyo3(signature = (n = 100, seed = 0, steps = 32, max_objects = 3, use_ema = true))]
    fn eval_compositional(&self, py: Python<'_>, n: usize, seed: u64, steps: usize, max_objects: usize, use_ema: bool) -> PyResult<Py<PyAny>> {
        let sampler = Sampler { state: &self.state, steps, use_ema };
        let r = py.detach(|| eval_compositional(&sampler, n, seed, max_objects)).map_err(value_err)?;
        to_py(py, &r)
    }

    #[pyo3(signature = (n = 100, seed = 0, steps = 32, max_objects = 3, use_ema = true))]
    fn eval_edit(&self, py: Python<'_>, n: usize, seed: u64, steps: usize, max_objects: usize, use_ema: bool) -> PyResult<Py<PyAny>> {
        let sampler = Sampler { state: &self.state, steps, use_ema };
        let r = py.detach(|| eval_edit(&sampler, n, seed, max_objects)).map_err(value_err)?;
        to_py(py, &r)
    }

    fn __repr__(&self) -> String {
        let c = &self.state.cfg;
        format!("Model(d_model={}, n_layers={}, num_metaqueries={}, params={})", c.d_model, c.n_layers, c.num_metaqueries, self.param_count())
    }
}

/// Names of the training stages accepted in `TrainConfig.stage`.
#[pyfunction]
fn stages() -> Vec<&'static str> {
    [Stage::Pretrain, Stage::Uno, Stage::Sft].iter().map(|s| s.name()).collect()
}

#[pymodule]
fn uno_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(loss_vision, m)?)?;
    m.add_function(wrap_pyfunction!(loss_language, m)?)?;
    m.add_function(wrap_pyfunction!(stages, m)?)?;
    m.add("VOCAB_SIZE", worldgen::vocab::VOCAB_SIZE)?;
    m.add("GATE_THRESHOLD", trainer::GATE_THRESHOLD)?;
    Ok(())
}

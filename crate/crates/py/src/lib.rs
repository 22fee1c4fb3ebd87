//! Python bindings. Build with `cargo build --release -p fmadapt-py` and copy
//! the shared library next to a script as `fmadapt.so`.

use std::path::Path;

use fmadapt::adapters::{budget, AdapterSpec};
use fmadapt::experiment::{self, RunConfig};
use fmadapt::flow::{conditional_path, target_field, PathParams};
use fmadapt::numerics::Tensor;
use fmadapt::tasks::{self, TaskKind};
use fmadapt::transformer::{BackboneConfig, VectorFieldModel};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: fmadapt::Error) -> PyErr {
    match e {
        fmadapt::Error::Io(_) | fmadapt::Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn task_kind(name: &str) -> PyResult<TaskKind> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown task `{name}` (pause, emphasis, burst)")))
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, |r| r.len());
    Tensor::from_rows(&rows, cols).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Full run configuration (model, task, adapter, schedule, seeds).
#[pyclass(name = "RunConfig", module = "fmadapt", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Desk-scale defaults for `task`, optionally with the default adapter.
    #[staticmethod]
    #[pyo3(signature = (task, adapter = false))]
    fn desk(task: &str, adapter: bool) -> PyResult<Self> {
        let mut inner = RunConfig::desk(task_kind(task)?);
        if adapter {
            inner.adapter = Some(AdapterSpec::desk());
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.inner.task.task.name()
    }

    #[getter]
    fn has_adapter(&self) -> bool {
        self.inner.adapter.is_some()
    }

    /// Sets the three run seeds from one master seed.
    fn set_seed(&mut self, seed: u64) {
        self.inner.seeds = experiment::Seeds::from_master(seed);
    }

    /// Overrides schedule entries, e.g. `set_schedule(pretrain_steps=100)`.
    #[pyo3(signature = (**kwargs))]
    fn set_schedule(&mut self, kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<()> {
        let Some(kwargs) = kwargs else { return Ok(()) };
        let mut value = serde_json::to_value(&self.inner.schedule).map_err(json_err)?;
        for (k, v) in kwargs.iter() {
            let key: String = k.extract()?;
            let slot = value
                .get_mut(&key)
                .ok_or_else(|| PyValueError::new_err(format!("unknown schedule key `{key}`")))?;
            *slot = if let Ok(i) = v.extract::<u64>() {
                serde_json::json!(i)
            } else if let Ok(f) = v.extract::<f64>() {
                serde_json::json!(f)
            } else {
                serde_json::Value::String(v.extract::<String>()?)
            };
        }
        self.inner.schedule = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.validate().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(task={}, adapter={}, fingerprint={})",
            self.task(),
            self.inner
                .adapter
                .as_ref()
                .map_or("none".into(), |a| format!("{:?}", a.kind)),
            &self.inner.fingerprint()[..12]
        )
    }
}

/// Pre-trains into `out`; returns the summary as a JSON string.
#[pyfunction]
fn pretrain(config: &PyRunConfig, out: &str) -> PyResult<String> {
    let s = experiment::run_pretrain(&config.inner, Path::new(out)).map_err(err)?;
    serde_json::to_string(&s).map_err(json_err)
}

/// Fine-tunes from the base run `base` into `out`; returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (config, base, out, allow_fingerprint_mismatch = false))]
fn finetune(config: &PyRunConfig, base: &str, out: &str, allow_fingerprint_mismatch: bool) -> PyResult<String> {
    let s = experiment::run_finetune(
        &config.inner,
        Path::new(base),
        Path::new(out),
        allow_fingerprint_mismatch,
    )
    .map_err(err)?;
    serde_json::to_string(&s).map_err(json_err)
}

/// Writes held-out regeneration requests for the config's fine-tuning corpus.
#[pyfunction]
#[pyo3(signature = (config, path, seed = 0))]
fn write_heldout_requests(config: &PyRunConfig, path: &str, seed: u64) -> PyResult<usize> {
    let corpus = experiment::finetune_corpus(&config.inner).map_err(err)?;
    let reqs = experiment::heldout_requests(&corpus, seed);
    experiment::write_jsonl(Path::new(path), &reqs).map_err(err)?;
    Ok(reqs.len())
}

/// Generates every request in a JSON-lines file; returns (generated, rejected).
#[pyfunction]
fn generate(config: &PyRunConfig, run: &str, requests: &str, out: &str) -> PyResult<(usize, usize)> {
    let s = experiment::run_generate(
        &config.inner,
        Path::new(run),
        Path::new(requests),
        Path::new(out),
        false,
    )
    .map_err(err)?;
    Ok((s.generated, s.rejected))
}

/// Scores a generation directory; returns the micro-averaged F1.
#[pyfunction]
fn evaluate(config: &PyRunConfig, generated: &str, requests: &str, out: &str) -> PyResult<f64> {
    let records = experiment::run_evaluate(
        Path::new(generated),
        Path::new(requests),
        &config.inner.task,
        Path::new(out),
    )
    .map_err(err)?;
    experiment::summary_f1(&records).ok_or_else(|| PyRuntimeError::new_err("evaluation produced no summary"))
}

/// Synthetic corpus as a list of dicts with id, split, symbols, z_f,
/// durations and features.
#[pyfunction]
fn generate_corpus<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    count: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
    let corpus = tasks::generate_corpus(&config.inner.task, count, seed).map_err(err)?;
    let mut out = Vec::new();
    for (split, utts) in [("train", &corpus.train), ("heldout", &corpus.heldout)] {
        for u in utts {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("id", &u.id)?;
            d.set_item("split", split)?;
            d.set_item("symbols", &u.symbols)?;
            d.set_item("z_f", u.z_f())?;
            d.set_item("durations", u.aligned_durations())?;
            d.set_item("features", rows(&u.features))?;
            out.push(d);
        }
    }
    Ok(out)
}

/// Oracle detector: annotated symbol positions for the config's task.
#[pyfunction]
fn detect(config: &PyRunConfig, features: Vec<Vec<f64>>, durations: Vec<usize>) -> PyResult<Vec<usize>> {
    let found = tasks::detect_annotations(&tensor(features)?, &durations, &config.inner.task).map_err(err)?;
    Ok(found.into_iter().map(|a| a.position).collect())
}

#[pyfunction]
fn read_features(path: &str) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&tasks::read_features(path).map_err(err)?))
}

#[pyfunction]
fn write_features(path: &str, features: Vec<Vec<f64>>) -> PyResult<()> {
    tasks::write_features(path, &tensor(features)?).map_err(err)
}

/// Point on the conditional path between noise `x0` and data `x1`.
#[pyfunction]
#[pyo3(signature = (x0, x1, t, sigma_min = 1e-5))]
fn path_point(x0: Vec<Vec<f64>>, x1: Vec<Vec<f64>>, t: f64, sigma_min: f64) -> PyResult<Vec<Vec<f64>>> {
    let p = PathParams::new(sigma_min).map_err(err)?;
    Ok(rows(&conditional_path(&tensor(x0)?, &tensor(x1)?, t, p).map_err(err)?))
}

/// Regression target of the conditional path.
#[pyfunction]
#[pyo3(signature = (x0, x1, sigma_min = 1e-5))]
fn path_target(x0: Vec<Vec<f64>>, x1: Vec<Vec<f64>>, sigma_min: f64) -> PyResult<Vec<Vec<f64>>> {
    let p = PathParams::new(sigma_min).map_err(err)?;
    Ok(rows(&target_field(&tensor(x0)?, &tensor(x1)?, p).map_err(err)?))
}

/// `(name, adaptive params, backbone params)` for the five comparison
/// specs at the `desk` or `paper` preset.
#[pyfunction]
#[pyo3(signature = (preset = "desk"))]
fn adapter_budgets(preset: &str) -> PyResult<Vec<(String, usize, usize)>> {
    let (cfg, spec) = match preset {
        "desk" => (BackboneConfig::desk(), AdapterSpec::desk()),
        "paper" => (BackboneConfig::paper(), AdapterSpec::paper()),
        other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    };
    let backbone = VectorFieldModel::shapes_only(cfg.clone()).map_err(err)?.param_count();
    Ok(AdapterSpec::comparison_set(&spec)
        .into_iter()
        .map(|(name, s)| (name.to_string(), budget::adaptive_params(&cfg, &s), backbone))
        .collect())
}

/// Step, fingerprint, parameter count and adapter presence of a checkpoint.
#[pyfunction]
fn checkpoint_info(path: &str) -> PyResult<(u64, String, usize, bool)> {
    let ck = experiment::Checkpoint::load(path).map_err(err)?;
    let n = ck.params.total();
    Ok((ck.step, ck.fingerprint.clone(), n, ck.has_adapters()))
}

#[pymodule(name = "fmadapt")]
fn fmadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(write_heldout_requests, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(path_point, m)?)?;
    m.add_function(wrap_pyfunction!(path_target, m)?)?;
    m.add_function(wrap_pyfunction!(adapter_budgets, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    Ok(())
}

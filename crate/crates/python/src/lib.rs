//! Python bindings. Structured results cross the boundary as JSON strings so
//! the Python side sees exactly the files the CLI writes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use finetune_lab::harness::{self, report, Config as RsConfig, Lab as RsLab, TaskSpec};
use finetune_lab::model::{Model as RsModel, ModelConfig, Snapshot};
use finetune_lab::numerics::Tensor;
use finetune_lab::optim::{self, AdamWHyper, ClipPolicy, GradMap};
use finetune_lab::{schedule, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize + ?Sized>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn vector(v: Vec<f64>) -> PyResult<Tensor> {
    Tensor::vector(v).map_err(py_err)
}

#[pyfunction]
fn accuracy(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    harness::accuracy(&predictions, &labels).map_err(py_err)
}

#[pyfunction]
fn f1(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    harness::f1(&predictions, &labels).map_err(py_err)
}

#[pyfunction]
fn mcc(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    harness::mcc(&predictions, &labels).map_err(py_err)
}

#[pyfunction]
fn l2_norm(x: Vec<f64>) -> PyResult<f64> {
    finetune_lab::numerics::l2_norm_slice(&x).map_err(py_err)
}

#[pyfunction]
fn rmsd(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    finetune_lab::numerics::rmsd(&vector(a)?, &vector(b)?).map_err(py_err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    finetune_lab::numerics::cosine_similarity(&vector(a)?, &vector(b)?).map_err(py_err)
}

#[pyfunction]
fn lr_at(step: usize, total: usize, warmup: usize, base_lr: f64) -> PyResult<f64> {
    optim::lr_at(step, total, warmup, base_lr).map_err(py_err)
}

#[pyfunction]
fn gu_layers(num_layers: usize, k: usize) -> PyResult<Vec<usize>> {
    schedule::gu_layers(num_layers, k).map_err(py_err)
}

fn policy(kind: &str, tau: Option<f64>) -> PyResult<ClipPolicy> {
    let need = || tau.ok_or_else(|| PyValueError::new_err(format!("{kind} clipping needs tau")));
    let p = match kind {
        "none" => ClipPolicy::None,
        "global" => ClipPolicy::global(need()?),
        "component_wise" => ClipPolicy::component_wise(need()?),
        other => return Err(PyValueError::new_err(format!("unknown clip policy {other}"))),
    };
    p.validate().map_err(py_err)?;
    Ok(p)
}

fn grad_map(grads: BTreeMap<String, Vec<f64>>) -> PyResult<GradMap> {
    grads
        .into_iter()
        .map(|(k, v)| Ok((k.as_str().into(), vector(v)?)))
        .collect()
}

/// Clips `grads` (component name to flat gradient) and returns the clipped
/// gradients with the `(pre_norm, post_norm)` of each component.
#[pyfunction]
#[pyo3(signature = (grads, kind="component_wise", tau=None))]
#[allow(clippy::type_complexity)]
fn clip_gradients(
    grads: BTreeMap<String, Vec<f64>>,
    kind: &str,
    tau: Option<f64>,
) -> PyResult<(BTreeMap<String, Vec<f64>>, BTreeMap<String, (f64, f64)>)> {
    let (clipped, report) = optim::clip_gradients(&grad_map(grads)?, &policy(kind, tau)?).map_err(py_err)?;
    let clipped = clipped
        .into_iter()
        .map(|(k, t)| (k.to_string(), t.into_data()))
        .collect();
    let report = report
        .into_iter()
        .map(|(k, n)| (k.to_string(), (n.pre, n.post)))
        .collect();
    Ok((clipped, report))
}

/// AdamW over named flat parameter vectors. Names ending in `.bias` or
/// `.gain` are excluded from weight decay.
#[pyclass]
struct AdamW {
    inner: optim::AdamW,
}

#[pymethods]
impl AdamW {
    #[new]
    #[pyo3(signature = (lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01, bias_correction=true))]
    fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64, bias_correction: bool) -> PyResult<Self> {
        let hyper = AdamWHyper {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            bias_correction,
        };
        Ok(AdamW {
            inner: optim::AdamW::new(hyper).map_err(py_err)?,
        })
    }

    /// Returns the updated parameters.
    fn step(
        &mut self,
        params: BTreeMap<String, Vec<f64>>,
        grads: BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let mut p = grad_map(params)?;
        self.inner.step(&mut p, &grad_map(grads)?, lr).map_err(py_err)?;
        Ok(p.into_iter().map(|(k, t)| (k.to_string(), t.into_data())).collect())
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step_count()
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

/// The tiny transformer classifier.
#[pyclass]
struct Model {
    inner: RsModel,
}

#[pymethods]
impl Model {
    /// `config_json` holds the `model` section of a config file.
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = match config_json {
            Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::default(),
        };
        Ok(Model {
            inner: RsModel::new(cfg).map_err(py_err)?,
        })
    }

    fn component_ids(&self) -> Vec<String> {
        self.inner.component_ids().map(|c| c.to_string()).collect()
    }

    fn param(&self, id: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.param(id).map_err(py_err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn num_params(&self) -> usize {
        self.inner.params().values().map(Tensor::len).sum()
    }

    fn logits(&self, tokens: Vec<Vec<usize>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward_classify(&tokens).map_err(py_err)?.into_data())
    }

    fn predict(&self, tokens: Vec<Vec<usize>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&tokens).map_err(py_err)
    }

    /// Writes the parameters as a snapshot file.
    fn save(&self, path: PathBuf, label: &str) -> PyResult<()> {
        Snapshot::of(&self.inner, label).save(&path).map_err(py_err)
    }
}

/// A validated experiment config with its pretrained body.
#[pyclass]
struct Lab {
    inner: RsLab,
}

#[pymethods]
impl Lab {
    /// Pretrains unless a snapshot path from `pretrain` is given.
    #[new]
    #[pyo3(signature = (config_json=None, pretrained=None))]
    fn new(py: Python<'_>, config_json: Option<&str>, pretrained: Option<PathBuf>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(t) => RsConfig::from_json(t).map_err(py_err)?,
            None => RsConfig::default(),
        };
        let inner = py.detach(|| match pretrained {
            Some(p) => {
                let snap = Snapshot::load(&p)?;
                RsLab::with_pretrained(cfg, snap)
            }
            None => RsLab::new(cfg),
        });
        Ok(Lab {
            inner: inner.map_err(py_err)?,
        })
    }

    fn config_json(&self) -> PyResult<String> {
        self.inner.config().to_json().map_err(py_err)
    }

    fn save_pretrained(&self, path: PathBuf) -> PyResult<()> {
        self.inner.pretrained().save(&path).map_err(py_err)
    }

    /// `(tokens, label)` pairs of the train and validation splits.
    #[allow(clippy::type_complexity)]
    fn dataset(&self, task: &str) -> PyResult<(Vec<(Vec<usize>, usize)>, Vec<(Vec<usize>, usize)>)> {
        let spec: &TaskSpec = self.inner.config().task(task).map_err(py_err)?;
        let d = self.inner.dataset(spec).map_err(py_err)?;
        let pairs = |v: Vec<finetune_lab::data::Example>| v.into_iter().map(|e| (e.tokens, e.label)).collect();
        Ok((pairs(d.train), pairs(d.validation)))
    }

    /// One run; returns the RunResult as JSON.
    #[pyo3(signature = (approach, task, run_index=0))]
    fn finetune(&self, py: Python<'_>, approach: &str, task: &str, run_index: usize) -> PyResult<String> {
        let cfg = self.inner.config();
        let a = cfg.approach(approach).map_err(py_err)?;
        let t = cfg.task(task).map_err(py_err)?;
        let out = py.detach(|| {
            let data = self.inner.dataset(t)?;
            self.inner.finetune(a, t, &data, run_index, None)
        });
        json(&out.map_err(py_err)?.result)
    }

    /// Runs the benchmark, writes its files when `out` is given, and returns
    /// the per-cell aggregates as JSON.
    #[pyo3(signature = (parallel=1, out=None))]
    fn benchmark(&self, py: Python<'_>, parallel: usize, out: Option<PathBuf>) -> PyResult<String> {
        let rep = py.detach(|| self.inner.run_benchmark(parallel)).map_err(py_err)?;
        if let Some(dir) = out {
            report::write_benchmark(&dir, &rep).map_err(py_err)?;
        }
        json(&rep.aggregates())
    }

    #[pyo3(signature = (thresholds=None, parallel=1, out=None))]
    fn sweep(&self, py: Python<'_>, thresholds: Option<Vec<f64>>, parallel: usize, out: Option<PathBuf>) -> PyResult<String> {
        let grid = thresholds.unwrap_or_else(|| self.inner.config().sweep.thresholds.clone());
        let rep = py
            .detach(|| self.inner.run_threshold_sweep(&grid, parallel))
            .map_err(py_err)?;
        if let Some(dir) = out {
            report::write_sweep(&dir, &rep).map_err(py_err)?;
        }
        json(&rep.rows)
    }

    /// Returns the per-iteration trajectory as JSON.
    #[pyo3(signature = (parallel=1, out=None))]
    fn gu(&self, py: Python<'_>, parallel: usize, out: Option<PathBuf>) -> PyResult<String> {
        let rep = py.detach(|| self.inner.run_gu_experiment(parallel)).map_err(py_err)?;
        if let Some(dir) = out {
            report::write_gu(&dir, &rep).map_err(py_err)?;
        }
        json(&rep.trajectory)
    }
}

#[pyfunction]
fn default_config_json() -> PyResult<String> {
    RsConfig::default().to_json().map_err(py_err)
}

#[pymodule]
fn finetune_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(mcc, m)?)?;
    m.add_function(wrap_pyfunction!(l2_norm, m)?)?;
    m.add_function(wrap_pyfunction!(rmsd, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(gu_layers, m)?)?;
    m.add_function(wrap_pyfunction!(clip_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_json, m)?)?;
    m.add_class::<AdamW>()?;
    m.add_class::<Model>()?;
    m.add_class::<Lab>()?;
    Ok(())
}

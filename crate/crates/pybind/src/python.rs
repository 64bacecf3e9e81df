// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python module `pathpatch_py`. Calls block; no state is shared between
//! objects beyond immutable graphs.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use pathpatch::graph::Graph;
use pathpatch::intervene::{Dissimilarity, Hypothesis, Positions};
use pathpatch::models::{InputMode, OutputMode, TransformerConfig, WeightBundle};
use pathpatch::Error;

use crate::{ErrorClass, Experiment};

create_exception!(pathpatch_py, PathPatchError, PyException);
create_exception!(pathpatch_py, ArgumentError, PathPatchError);
create_exception!(pathpatch_py, ShapeError, PathPatchError);
create_exception!(pathpatch_py, StructuralError, PathPatchError);
create_exception!(pathpatch_py, BindingError, PathPatchError);
create_exception!(pathpatch_py, NonFiniteError, PathPatchError);
create_exception!(pathpatch_py, CapacityError, PathPatchError);
create_exception!(pathpatch_py, PatternSyntaxError, PathPatchError);
create_exception!(pathpatch_py, FormatError, PathPatchError);
create_exception!(pathpatch_py, RewriteVerificationError, PathPatchError);
create_exception!(pathpatch_py, UndefinedMetricError, PathPatchError);
create_exception!(pathpatch_py, ConfigError, PathPatchError);
create_exception!(pathpatch_py, MissingFileError, PathPatchError);
create_exception!(pathpatch_py, IoError, PathPatchError);

/// Raise the exception matching the core error class, with the CLI's text.
fn raise(err: Error) -> PyErr {
    let msg = err.to_string();
    match ErrorClass::of(&err) {
        ErrorClass::Argument => ArgumentError::new_err(msg),
        ErrorClass::Shape => ShapeError::new_err(msg),
        ErrorClass::Structural => StructuralError::new_err(msg),
        ErrorClass::Binding => BindingError::new_err(msg),
        ErrorClass::NonFinite => NonFiniteError::new_err(msg),
        ErrorClass::Capacity => CapacityError::new_err(msg),
        ErrorClass::Syntax => PatternSyntaxError::new_err(msg),
        ErrorClass::Format => FormatError::new_err(msg),
        ErrorClass::RewriteVerification => RewriteVerificationError::new_err(msg),
        ErrorClass::UndefinedMetric => UndefinedMetricError::new_err(msg),
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::FileNotFound => MissingFileError::new_err(msg),
        ErrorClass::Io => IoError::new_err(msg),
    }
}

fn metric(kind: &str) -> PyResult<Dissimilarity> {
    match kind {
        "absolute_difference" => Ok(Dissimilarity::AbsoluteDifference),
        "loss_absolute_difference" => Ok(Dissimilarity::LossAbsoluteDifference {
            positions: Positions::Last,
        }),
        "kl" => Ok(Dissimilarity::Kl {
            positions: Positions::Last,
        }),
        other => Err(ArgumentError::new_err(format!("unknown metric `{other}`"))),
    }
}

#[pyclass(name = "Graph", frozen)]
struct PyGraph(Arc<Graph>);

#[pymethods]
impl PyGraph {
    fn node_names(&self) -> Vec<String> {
        self.0.ids().map(|i| self.0.name(i).to_owned()).collect()
    }

    fn output(&self) -> String {
        self.0.name(self.0.output()).to_owned()
    }
}

#[pyclass(name = "Weights", frozen)]
struct PyWeights(TransformerConfig, WeightBundle);

#[pyclass(name = "Hypothesis", frozen)]
struct PyHypothesis(Hypothesis);

#[pyfunction]
#[pyo3(signature = (path, weights = None))]
fn load_graph(path: PathBuf, weights: Option<PathBuf>) -> PyResult<PyGraph> {
    let params = match weights {
        Some(w) => {
            let (_, bundle) = crate::load_weights(&w).map_err(raise)?;
            Some(bundle.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect())
        }
        None => None,
    };
    Ok(PyGraph(Arc::new(crate::load_graph(&path, params.as_ref()).map_err(raise)?)))
}

#[pyfunction]
fn load_weights(path: PathBuf) -> PyResult<PyWeights> {
    let (c, w) = crate::load_weights(&path).map_err(raise)?;
    Ok(PyWeights(c, w))
}

#[pyfunction]
#[pyo3(signature = (weights, input = "tokens", output = "loss"))]
fn build_transformer(weights: &PyWeights, input: &str, output: &str) -> PyResult<PyGraph> {
    let input = match input {
        "tokens" => InputMode::Tokens,
        "embeddings" => InputMode::Embeddings,
        other => return Err(ArgumentError::new_err(format!("unknown input mode `{other}`"))),
    };
    let output = match output {
        "loss" => OutputMode::Loss,
        "logits" => OutputMode::Logits,
        other => return Err(ArgumentError::new_err(format!("unknown output mode `{other}`"))),
    };
    let g = crate::build_transformer(&weights.0, &weights.1, input, output).map_err(raise)?;
    Ok(PyGraph(Arc::new(g)))
}

#[pyfunction]
#[pyo3(signature = (graph, patterns, metric_kind = "absolute_difference"))]
fn hypothesis(graph: &PyGraph, patterns: Vec<String>, metric_kind: &str) -> PyResult<PyHypothesis> {
    let h = crate::hypothesis(graph.0.clone(), &patterns, metric(metric_kind)?).map_err(raise)?;
    Ok(PyHypothesis(h))
}

/// Returns `(shape, flat data)` for inputs given as `{leaf: flat values}`.
#[pyfunction]
fn run_patched(
    h: &PyHypothesis,
    x_r: Vec<(String, Vec<f64>)>,
    x_c: Vec<(String, Vec<f64>)>,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let g = h.0.graph.as_ref();
    let r = crate::binding(g, &x_r).map_err(raise)?;
    let c = crate::binding(g, &x_c).map_err(raise)?;
    let out = crate::run_patched(&h.0, &r, &c).map_err(raise)?;
    Ok((out.shape, out.data))
}

/// `(aue, ate, proportion_explained)` for a config, as `pathpatch patch` reports.
#[pyfunction]
#[pyo3(signature = (config, seed = None))]
fn scores(py: Python<'_>, config: PathBuf, seed: Option<u64>) -> PyResult<(f64, f64, Option<f64>)> {
    let s = py
        .allow_threads(|| Experiment::open(&config, seed)?.scores())
        .map_err(raise)?;
    Ok((s.aue, s.ate, s.proportion_explained))
}

/// Per-position attribution, shape `(tokens,)`.
#[pyfunction]
#[pyo3(signature = (config, seed = None))]
fn attribution(py: Python<'_>, config: PathBuf, seed: Option<u64>) -> PyResult<Vec<f64>> {
    py.allow_threads(|| Experiment::open(&config, seed)?.attribution())
        .map_err(raise)
}

#[pymodule]
fn pathpatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", crate::VERSION)?;
    m.add("PathPatchError", py.get_type::<PathPatchError>())?;
    m.add("ArgumentError", py.get_type::<ArgumentError>())?;
    m.add("ShapeError", py.get_type::<ShapeError>())?;
    m.add("StructuralError", py.get_type::<StructuralError>())?;
    m.add("BindingError", py.get_type::<BindingError>())?;
    m.add("NonFiniteError", py.get_type::<NonFiniteError>())?;
    m.add("CapacityError", py.get_type::<CapacityError>())?;
    m.add("PatternSyntaxError", py.get_type::<PatternSyntaxError>())?;
    m.add("FormatError", py.get_type::<FormatError>())?;
    m.add("RewriteVerificationError", py.get_type::<RewriteVerificationError>())?;
    m.add("UndefinedMetricError", py.get_type::<UndefinedMetricError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("MissingFileError", py.get_type::<MissingFileError>())?;
    m.add("IoError", py.get_type::<IoError>())?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyWeights>()?;
    m.add_class::<PyHypothesis>()?;
    m.add_function(wrap_pyfunction!(load_graph, m)?)?;
    m.add_function(wrap_pyfunction!(load_weights, m)?)?;
    m.add_function(wrap_pyfunction!(build_transformer, m)?)?;
    m.add_function(wrap_pyfunction!(hypothesis, m)?)?;
    m.add_function(wrap_pyfunction!(run_patched, m)?)?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(attribution, m)?)?;
    Ok(())
}

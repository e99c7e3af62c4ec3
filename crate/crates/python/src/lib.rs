//! Python bindings: visualizations, quality measures, the preference model and the experiment harness.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use vizpref_core::coxpref::{self, geometric_lambdas, path_for_problem, PreparedProblem};
use vizpref_core::data::{load_preference_log, load_visualization, load_visualization_dir, VisualizationFile};
use vizpref_core::harness::{render_tables, run_experiment as run_core_experiment};
use vizpref_core::measures::{self as core_measures, AucWeighting, DscDenominator};
use vizpref_core::{ExperimentConfig, FitConfig, MeasureId};

fn err(e: vizpref_core::Error) -> PyErr {
    match e {
        vizpref_core::Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Visualization", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVisualization(vizpref_core::Visualization);

#[pymethods]
impl PyVisualization {
    #[new]
    #[pyo3(signature = (id, points, labels, highdim=None))]
    fn new(id: String, points: Vec<[f64; 2]>, labels: Vec<u32>, highdim: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        vizpref_core::Visualization::new(id, points, labels, highdim).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        load_visualization(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let file: VisualizationFile = serde_json::from_str(text).map_err(json_err)?;
        vizpref_core::Visualization::from_file(file, None).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.to_file()).map_err(json_err)
    }

    #[getter]
    fn id(&self) -> &str {
        self.0.id()
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.0.n_points()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.0.n_classes()
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 2]> {
        self.0.points().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.0.labels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Visualization(id={:?}, n_points={}, n_classes={})", self.0.id(), self.0.n_points(), self.0.n_classes())
    }
}

/// Misassigned fraction; `per_classes` divides the count by the number of classes instead of points.
#[pyfunction]
#[pyo3(signature = (vis, per_classes=false))]
fn dsc(vis: &PyVisualization, per_classes: bool) -> f64 {
    let denominator = if per_classes { DscDenominator::PerClass } else { DscDenominator::PerPoint };
    core_measures::dsc(&vis.0, denominator)
}

#[pyfunction]
fn hypothesis_margin(vis: &PyVisualization) -> PyResult<f64> {
    core_measures::hypothesis_margin(&vis.0).map_err(err)
}

#[pyfunction]
fn abw(vis: &PyVisualization) -> PyResult<f64> {
    core_measures::abw(&vis.0).map_err(err)
}

/// Q_NX(K) for K = 1..N-1.
#[pyfunction]
fn qnx_curve(vis: &PyVisualization) -> PyResult<Vec<f64>> {
    Ok(core_measures::qnx_curve(&vis.0).map_err(err)?.values().to_vec())
}

/// Area under the Q_NX curve; `weighting` is "uniform" or "log_k".
#[pyfunction]
#[pyo3(signature = (vis, weighting="uniform"))]
fn nh_auc(vis: &PyVisualization, weighting: &str) -> PyResult<f64> {
    let weighting = match weighting {
        "uniform" => AucWeighting::Uniform,
        "log_k" => AucWeighting::LogK,
        other => return Err(PyValueError::new_err(format!("unknown weighting {other:?}"))),
    };
    let curve = core_measures::qnx_curve(&vis.0).map_err(err)?;
    Ok(core_measures::nh_auc(&curve, weighting))
}

/// Raw values of every measure that applies to `vis`, keyed by measure name.
#[pyfunction]
fn measures(vis: &PyVisualization) -> PyResult<BTreeMap<&'static str, f64>> {
    let fv = core_measures::feature_vector(&vis.0).map_err(err)?;
    Ok(MeasureId::ALL.iter().filter_map(|&m| fv.raw(m).map(|v| (m.name(), v))).collect())
}

#[pyclass(name = "PreferenceDataset", frozen)]
struct PyPreferenceDataset(vizpref_core::PreferenceDataset);

#[pymethods]
impl PyPreferenceDataset {
    /// Reads a JSON-lines preference log and the visualizations it refers to.
    #[staticmethod]
    fn load(log: std::path::PathBuf, vis_dir: std::path::PathBuf) -> PyResult<Self> {
        load_preference_log(log, vis_dir).map(Self).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.records().len()
    }

    #[getter]
    fn trainable_count(&self) -> usize {
        self.0.trainable_count()
    }

    fn users(&self) -> Vec<String> {
        self.0.users().into_iter().map(str::to_string).collect()
    }

    fn visualization_ids(&self) -> Vec<String> {
        self.0.visualizations().keys().cloned().collect()
    }
}

#[pyclass(name = "CoxModel", frozen)]
struct PyCoxModel {
    model: vizpref_core::CoxModel,
}

#[pymethods]
impl PyCoxModel {
    /// Fits on every trainable preference of `dataset`.
    #[staticmethod]
    #[pyo3(signature = (dataset, lam=0.01, tol=None, max_iter=None))]
    fn fit(dataset: &PyPreferenceDataset, lam: f64, tol: Option<f64>, max_iter: Option<usize>) -> PyResult<Self> {
        let mut cfg = FitConfig::default();
        if let Some(t) = tol {
            cfg.tol = t;
        }
        if let Some(n) = max_iter {
            cfg.max_iter = n;
        }
        let features = core_measures::compute_features(dataset.0.visualizations().values()).map_err(err)?;
        let model = coxpref::fit(&dataset.0, &features, lam, &cfg).map_err(err)?;
        Ok(Self { model })
    }

    /// Standardized coefficients keyed by measure name.
    #[getter]
    fn beta(&self) -> BTreeMap<&'static str, f64> {
        self.model.active_measures().iter().map(|m| m.name()).zip(self.model.beta().iter().copied()).collect()
    }

    /// Coefficients on the raw (unstandardized) measure scale.
    #[getter]
    fn raw_weights(&self) -> BTreeMap<&'static str, f64> {
        self.model.raw_weights().into_iter().map(|(m, w)| (m.name(), w)).collect()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.model.diagnostics().converged
    }

    /// Whether the fit hit the coefficient cap because the preferences are separable.
    #[getter]
    fn separable(&self) -> bool {
        self.model.diagnostics().separable
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.model.diagnostics().iterations
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.model.diagnostics().objective
    }

    /// Understandability score of a visualization.
    fn score(&self, vis: &PyVisualization) -> PyResult<f64> {
        let fv = core_measures::feature_vector(&vis.0).map_err(err)?;
        coxpref::score(&self.model, &fv).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.model).map_err(json_err)
    }
}

/// Warm-started L1 path over `count` geometric λ values below λ_max. Returns `(λ, active names)` pairs.
#[pyfunction]
#[pyo3(signature = (dataset, count=20, min_ratio=1e-3))]
fn regularization_path(dataset: &PyPreferenceDataset, count: usize, min_ratio: f64) -> PyResult<Vec<(f64, Vec<&'static str>)>> {
    let features = core_measures::compute_features(dataset.0.visualizations().values()).map_err(err)?;
    let problem = PreparedProblem::new(dataset.0.records(), &features, &MeasureId::ALL).map_err(err)?;
    let lambdas = geometric_lambdas(problem.critical_lambda(), min_ratio, count);
    let path = path_for_problem(&problem, &lambdas, &FitConfig::default()).map_err(err)?;
    Ok(path.points.iter().map(|p| (p.lambda, p.active.iter().map(|m| m.name()).collect())).collect())
}

/// Runs the user-permutation experiment. `config` is experiment configuration JSON; the report
/// comes back as JSON text, or as the rendered tables when `tables` is set.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, tables=false))]
fn run_experiment(py: Python<'_>, dataset: &PyPreferenceDataset, config: Option<&str>, tables: bool) -> PyResult<String> {
    let cfg: ExperimentConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => ExperimentConfig::default(),
    };
    let report = py.detach(|| run_core_experiment(&dataset.0, &cfg)).map_err(err)?;
    if tables {
        Ok(render_tables(&report))
    } else {
        report.to_json().map_err(err)
    }
}

/// Loads every `*.json` visualization in a directory.
#[pyfunction]
fn load_directory(dir: std::path::PathBuf) -> PyResult<Vec<PyVisualization>> {
    Ok(load_visualization_dir(dir).map_err(err)?.into_values().map(PyVisualization).collect())
}

#[pymodule]
fn vizpref(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVisualization>()?;
    m.add_class::<PyPreferenceDataset>()?;
    m.add_class::<PyCoxModel>()?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(hypothesis_margin, m)?)?;
    m.add_function(wrap_pyfunction!(abw, m)?)?;
    m.add_function(wrap_pyfunction!(qnx_curve, m)?)?;
    m.add_function(wrap_pyfunction!(nh_auc, m)?)?;
    m.add_function(wrap_pyfunction!(measures, m)?)?;
    m.add_function(wrap_pyfunction!(regularization_path, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(load_directory, m)?)?;
    Ok(())
}

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use teamlearn::data::{generate_synthetic, SynthConfig};
use teamlearn::evaluation::{evaluate_policy, human_only_baseline, TeamMetrics};
use teamlearn::numerics::{stable_softmax, TrainConfig};
use teamlearn::team::TeamPolicy;
use teamlearn::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Training { .. } | Error::Numeric { .. } | Error::State(_) | Error::Query(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &TeamMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total_loss", m.total_loss)?;
    d.set_item("classification_error", m.classification_error)?;
    d.set_item("mean_utility", m.mean_utility)?;
    d.set_item("query_rate", m.query_rate)?;
    Ok(d)
}

#[pyclass(name = "Dataset", module = "teamlearn_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: teamlearn::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Planted synthetic benchmark; keyword arguments override the defaults.
    #[staticmethod]
    #[pyo3(signature = (n=14000, seed=0, num_classes=5, feature_dim=8))]
    fn synthetic(n: usize, seed: u64, num_classes: usize, feature_dim: usize) -> PyResult<Self> {
        let mut cfg = SynthConfig {
            n,
            seed,
            num_classes,
            feature_dim,
            ..SynthConfig::default()
        };
        if num_classes != 5 {
            cfg.class_priors = vec![1.0 / num_classes as f64; num_classes];
        }
        Ok(PyDataset {
            inner: generate_synthetic(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load_csv(path: &str, num_classes: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: teamlearn::data::Dataset::load_csv(path, num_classes).map_err(to_py)?,
        })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        self.inner.save_csv(path).map_err(to_py)
    }

    fn split(&self, train: f64, val: f64, test: f64, seed: u64) -> PyResult<(Self, Self, Self)> {
        let (a, b, c) = self.inner.split((train, val, test), seed).map_err(to_py)?;
        Ok((
            PyDataset { inner: a },
            PyDataset { inner: b },
            PyDataset { inner: c },
        ))
    }

    /// `(features, label, human)` of instance `i`.
    fn instance(&self, i: usize) -> PyResult<(Vec<f64>, usize, usize)> {
        let inst = self
            .inner
            .instances()
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))?;
        Ok((inst.features.clone(), inst.label, inst.human))
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    fn human_error_rate(&self) -> f64 {
        self.inner.human_error_rate()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "TeamConfig", module = "teamlearn_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTeamConfig {
    inner: teamlearn::team::TeamConfig,
}

#[pymethods]
impl PyTeamConfig {
    #[new]
    fn new(utility: Vec<Vec<f64>>, query_cost: f64) -> PyResult<Self> {
        let inner = teamlearn::team::TeamConfig {
            utility,
            query_cost,
        };
        inner.validate().map_err(to_py)?;
        Ok(PyTeamConfig { inner })
    }

    #[staticmethod]
    fn accuracy(num_classes: usize, query_cost: f64) -> PyResult<Self> {
        let inner = teamlearn::team::TeamConfig::accuracy(num_classes, query_cost);
        inner.validate().map_err(to_py)?;
        Ok(PyTeamConfig { inner })
    }

    #[staticmethod]
    fn false_negative_weighted(query_cost: f64) -> PyResult<Self> {
        let inner = teamlearn::team::TeamConfig::false_negative_weighted(query_cost);
        inner.validate().map_err(to_py)?;
        Ok(PyTeamConfig { inner })
    }

    fn with_cost(&self, query_cost: f64) -> PyResult<Self> {
        let inner = self.inner.with_cost(query_cost);
        inner.validate().map_err(to_py)?;
        Ok(PyTeamConfig { inner })
    }

    #[getter]
    fn utility(&self) -> Vec<Vec<f64>> {
        self.inner.utility.clone()
    }

    #[getter]
    fn query_cost(&self) -> f64 {
        self.inner.query_cost
    }
}

#[pyclass(name = "TrainConfig", module = "teamlearn_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (
        iterations=4000, learning_rate=0.05, batch_size=64, hidden=vec![16], seed=0,
        dropout_rate=0.2, calibration_interval=200, softmax_temperature=1.0, cost_weight=1.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        iterations: usize,
        learning_rate: f64,
        batch_size: usize,
        hidden: Vec<usize>,
        seed: u64,
        dropout_rate: f64,
        calibration_interval: usize,
        softmax_temperature: f64,
        cost_weight: f64,
    ) -> PyResult<Self> {
        let inner = TrainConfig {
            iterations,
            learning_rate,
            batch_size,
            hidden,
            seed,
            dropout_rate,
            calibration_interval,
            softmax_temperature,
            cost_weight,
            ..TrainConfig::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(PyTrainConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Prediction network plus query network.
#[pyclass(
    name = "DiscriminativeSystem",
    module = "teamlearn_py",
    skip_from_py_object
)]
struct PyDiscriminative {
    inner: teamlearn::discriminative::DiscriminativeSystem,
}

#[pymethods]
impl PyDiscriminative {
    #[staticmethod]
    fn train_fixed(data: &PyDataset, team: &PyTeamConfig, cfg: &PyTrainConfig) -> PyResult<Self> {
        let inner = teamlearn::discriminative::train_fixed(&data.inner, &team.inner, &cfg.inner)
            .map_err(to_py)?;
        Ok(PyDiscriminative { inner })
    }

    #[staticmethod]
    fn train_joint(data: &PyDataset, team: &PyTeamConfig, cfg: &PyTrainConfig) -> PyResult<Self> {
        let inner = teamlearn::discriminative::train_joint(&data.inner, &team.inner, &cfg.inner)
            .map_err(to_py)?;
        Ok(PyDiscriminative { inner })
    }

    /// `(machine distribution, query probability)` for `x`.
    fn outputs(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        let (m, q) = self.inner.outputs(&x).map_err(to_py)?;
        Ok((m.into_vec(), q))
    }

    /// `(label, queried)`; `human` is returned when the system queries.
    fn predict(&self, x: Vec<f64>, human: usize) -> PyResult<(usize, bool)> {
        let p = self
            .inner
            .team_predict(&x, &mut |_| Ok(human))
            .map_err(to_py)?;
        Ok((p.predicted_label, p.queried))
    }

    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        team: &PyTeamConfig,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (_, m) = evaluate_policy(&self.inner, &data.inner, &team.inner).map_err(to_py)?;
        metrics_dict(py, &m)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Three calibrated models combined through the value-of-information rule.
#[pyclass(name = "VoiSystem", module = "teamlearn_py", skip_from_py_object)]
struct PyVoi {
    inner: teamlearn::voi::VoiSystem,
}

#[pymethods]
impl PyVoi {
    #[staticmethod]
    fn train_fixed(data: &PyDataset, team: &PyTeamConfig, cfg: &PyTrainConfig) -> PyResult<Self> {
        let inner =
            teamlearn::voi::train_fixed_voi(&data.inner, &team.inner, &cfg.inner).map_err(to_py)?;
        Ok(PyVoi { inner })
    }

    #[staticmethod]
    fn train_joint(data: &PyDataset, team: &PyTeamConfig, cfg: &PyTrainConfig) -> PyResult<Self> {
        let inner =
            teamlearn::voi::train_joint_voi(&data.inner, &team.inner, &cfg.inner).map_err(to_py)?;
        Ok(PyVoi { inner })
    }

    /// Exact decision for `x` as a dict with `u_nq`, `u_q`, `query`, `best_label_no_query`.
    fn decide<'py>(&self, py: Python<'py>, x: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let d = self.inner.decide(&x).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("u_nq", d.u_nq)?;
        out.set_item("u_q", d.u_q)?;
        out.set_item("query", d.query)?;
        out.set_item("best_label_no_query", d.best_label_no_query)?;
        Ok(out)
    }

    /// `(u_nq_soft, u_q_soft, q_soft)` at temperature `tau`.
    fn soft_team_quantities(&self, x: Vec<f64>, tau: f64) -> PyResult<(f64, f64, f64)> {
        let s = self.inner.soft_team_quantities(&x, tau).map_err(to_py)?;
        Ok((s.u_nq_soft, s.u_q_soft, s.q_soft))
    }

    fn predict(&self, x: Vec<f64>, human: usize) -> PyResult<(usize, bool)> {
        let p = self
            .inner
            .team_predict(&x, &mut |_| Ok(human))
            .map_err(to_py)?;
        Ok((p.predicted_label, p.queried))
    }

    fn with_cost(&self, query_cost: f64) -> Self {
        let mut inner = self.inner.clone();
        inner.team = inner.team.with_cost(query_cost);
        PyVoi { inner }
    }

    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        team: &PyTeamConfig,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut system = self.inner.clone();
        system.team = team.inner.clone();
        let (_, m) = evaluate_policy(&system, &data.inner, &team.inner).map_err(to_py)?;
        metrics_dict(py, &m)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyfunction]
fn human_only<'py>(
    py: Python<'py>,
    data: &PyDataset,
    team: &PyTeamConfig,
) -> PyResult<Bound<'py, PyDict>> {
    let m = human_only_baseline(&data.inner, &team.inner).map_err(to_py)?;
    metrics_dict(py, &m)
}

#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0))]
fn softmax(logits: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    Ok(stable_softmax(&logits, temperature)
        .map_err(to_py)?
        .into_vec())
}

/// Runs the built-in property suites: `[(name, max_error, passed)]`.
#[pyfunction]
fn verify() -> PyResult<Vec<(String, f64, bool)>> {
    let reports = teamlearn::verify::run_all(false).map_err(to_py)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.name.to_string(), r.max_error, r.passed))
        .collect())
}

#[pymodule]
fn teamlearn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTeamConfig>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDiscriminative>()?;
    m.add_class::<PyVoi>()?;
    m.add_function(wrap_pyfunction!(human_only, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}

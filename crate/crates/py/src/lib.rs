//! Python bindings: scenarios, closed-loop runs, experiments, tracks and the
//! stability helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nmpc_core::experiment::{run_experiment as run_experiment_core, step_csv};
use nmpc_core::monitor::{self, AffineConstants};
use nmpc_core::mpc::{run_closed_loop as run_closed_loop_core, ClosedLoopRecord};
use nmpc_core::scenario::{ScenarioError, ScenarioFile};
use nmpc_core::sim::ParamWindow;
use nmpc_core::track::{synth_track as synth_track_core, TrackSpec};
use nmpc_core::updates::StrategyKind;
use nmpc_core::StateVec;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scenario_err(e: ScenarioError) -> PyErr {
    match e {
        ScenarioError::Ocp(inner) => PyRuntimeError::new_err(inner.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn strategy(name: &str) -> PyResult<StrategyKind> {
    StrategyKind::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown strategy '{name}'")))
}

#[pyclass(name = "Scenario", module = "nmpc", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: ScenarioFile,
}

#[pymethods]
impl PyScenario {
    /// Reference scenario, optionally overridden by key-value or JSON text.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ScenarioFile::parse_str(text).map_err(scenario_err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ScenarioFile::read(&path).map_err(scenario_err)?,
        })
    }

    fn echo(&self) -> PyResult<String> {
        self.inner.echo().map_err(scenario_err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("scenario serializes")
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[setter]
    fn set_steps(&mut self, steps: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.steps = steps;
        next.validate().map_err(scenario_err)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.seeds = seeds;
        next.validate().map_err(scenario_err)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn strategies(&self) -> Vec<&'static str> {
        self.inner.strategies.iter().map(|k| k.name()).collect()
    }

    #[setter]
    fn set_strategies(&mut self, names: Vec<String>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.strategies = names.iter().map(|n| strategy(n)).collect::<PyResult<_>>()?;
        next.validate().map_err(scenario_err)?;
        self.inner = next;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(horizon={}, steps={}, seeds={:?}, strategies={:?})",
            self.inner.horizon,
            self.inner.steps,
            self.inner.seeds,
            self.strategies()
        )
    }
}

#[pyclass(name = "ClosedLoopRecord", module = "nmpc", frozen)]
struct PyRecord {
    inner: ClosedLoopRecord,
}

#[pymethods]
impl PyRecord {
    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.name()
    }

    #[getter]
    fn cost(&self) -> f64 {
        self.inner.closed_loop_cost()
    }

    #[getter]
    fn failure(&self) -> Option<String> {
        self.inner.failure.clone()
    }

    /// Measured states, one list of four per step.
    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        self.inner.steps.iter().map(|s| s.x_bar.as_slice().to_vec()).collect()
    }

    #[getter]
    fn controls(&self) -> Vec<f64> {
        self.inner.steps.iter().map(|s| s.control[0]).collect()
    }

    #[getter]
    fn stage_costs(&self) -> Vec<f64> {
        self.inner.steps.iter().map(|s| s.stage_cost).collect()
    }

    #[getter]
    fn values(&self) -> Vec<Option<f64>> {
        self.inner.steps.iter().map(|s| s.value).collect()
    }

    fn to_csv(&self) -> String {
        step_csv(&self.inner)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("record serializes")
    }

    fn __len__(&self) -> usize {
        self.inner.steps.len()
    }
}

/// One closed-loop run of the scenario for `strategy` and `seed`.
#[pyfunction]
fn run_closed_loop(py: Python<'_>, scenario: &PyScenario, strategy_name: &str, seed: u64) -> PyResult<PyRecord> {
    let kind = strategy(strategy_name)?;
    let s = scenario.inner.clone();
    let record = py
        .detach(move || {
            let road = s.load_road()?;
            let cfg = s.closed_loop(kind, seed, &road)?;
            run_closed_loop_core(&cfg).map_err(ScenarioError::from)
        })
        .map_err(scenario_err)?;
    Ok(PyRecord { inner: record })
}

/// Runs the whole grid, writes the artifacts and returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (scenario, out_dir, workers = 1))]
fn run_experiment(py: Python<'_>, scenario: &PyScenario, out_dir: PathBuf, workers: usize) -> PyResult<String> {
    let s = scenario.inner.clone();
    let summary = py.detach(move || run_experiment_core(&s, &out_dir, workers)).map_err(scenario_err)?;
    Ok(serde_json::to_string_pretty(&summary).expect("summary serializes"))
}

/// Solves the scenario's OCP from `x0` on a road window; returns
/// `(controls, value)`.
#[pyfunction]
fn solve_ocp(scenario: &PyScenario, x0: Vec<f64>, window: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    let ocp = scenario.inner.ocp().map_err(scenario_err)?;
    let x0 = StateVec::new(x0).map_err(value_err)?;
    let window = ParamWindow::from_scalars(scenario.inner.sample_period, &window).map_err(value_err)?;
    let inst = ocp.instance(x0, window).map_err(value_err)?;
    let sol = inst.solve(None).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((sol.controls.iter().map(|u| u[0]).collect(), sol.value))
}

/// Window length the scenario's OCP expects.
#[pyfunction]
fn window_len(scenario: &PyScenario) -> PyResult<usize> {
    let ocp = scenario.inner.ocp().map_err(scenario_err)?;
    Ok(ocp.window_len())
}

/// Samples the reference track, or a track description when given.
#[pyfunction]
#[pyo3(signature = (spec = None, dt = 0.002))]
fn synth_track(spec: Option<&str>, dt: f64) -> PyResult<Vec<f64>> {
    let track = match spec {
        None => TrackSpec::reference(dt),
        Some(text) => TrackSpec::parse(text).map_err(value_err)?,
    };
    Ok(synth_track_core(&track).map_err(value_err)?.samples)
}

#[pyfunction]
fn fit_affine_bounds(pairs: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    monitor::fit_affine_bounds(&pairs).map_err(value_err)
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn compute_epsilon(l_stage: f64, j_stage: f64, l_value: f64, j_value: f64, delta_x: f64, delta_p: f64, alpha: f64) -> PyResult<f64> {
    let c = AffineConstants {
        l_stage,
        j_stage,
        l_value,
        j_value,
    };
    monitor::compute_epsilon(&c, delta_x, delta_p, alpha).map_err(value_err)
}

#[pyfunction]
fn strategies() -> Vec<&'static str> {
    StrategyKind::ALL.iter().map(|k| k.name()).collect()
}

#[pymodule]
fn nmpc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRecord>()?;
    m.add_function(wrap_pyfunction!(run_closed_loop, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ocp, m)?)?;
    m.add_function(wrap_pyfunction!(window_len, m)?)?;
    m.add_function(wrap_pyfunction!(synth_track, m)?)?;
    m.add_function(wrap_pyfunction!(fit_affine_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(compute_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    Ok(())
}

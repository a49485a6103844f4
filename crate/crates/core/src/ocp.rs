//! Finite-horizon optimal control problem by direct single shooting.
//!
//! The decision vector stacks the `N` control moves. The NLP parameter is the
//! initial state, optionally followed by the fast-rate parameter samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nlp::{self, NlpError, NlpProblem, NlpSolution, SqpOptions};
use crate::sim::{ParamWindow, PlantModel, SimError};
use crate::types::{BoxSet, ControlVec, CoreError, ParamSample, StateVec, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("control {index} = {value:?} outside the admissible set")]
    Inadmissible { index: usize, value: Vec<f64> },
}

/// What the NLP parameter vector contains besides the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ThetaLayout {
    #[default]
    State,
    /// Initial state followed by every fast-rate parameter sample of the window.
    StateAndParams,
}

#[derive(Debug, Clone)]
pub struct ParametricOcp<M: PlantModel> {
    pub model: M,
    pub horizon: usize,
    /// Admissible set of a single control move.
    pub control_set: BoxSet,
    pub state_set: Option<BoxSet>,
    /// Weight of the quadratic penalty on state-set violation at the interval ends.
    pub state_penalty: f64,
    /// The NLP minimizes `J_N / objective_scale`.
    pub objective_scale: f64,
    pub solver: SqpOptions,
    pub theta_layout: ThetaLayout,
}

impl<M: PlantModel> ParametricOcp<M> {
    pub fn new(model: M, horizon: usize, control_set: BoxSet) -> Result<Self, OcpError> {
        if horizon < 2 {
            return Err(OcpError::Invalid(format!("horizon {horizon} < 2")));
        }
        if control_set.dim() != model.control_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: model.control_dim(),
                got: control_set.dim(),
            }
            .into());
        }
        Ok(Self {
            model,
            horizon,
            control_set,
            state_set: None,
            state_penalty: 1e8,
            objective_scale: 1.0,
            solver: SqpOptions::default(),
            theta_layout: ThetaLayout::State,
        })
    }

    pub fn with_state_set(mut self, set: BoxSet) -> Self {
        self.state_set = Some(set);
        self
    }

    pub fn with_objective_scale(mut self, scale: f64) -> Self {
        self.objective_scale = scale;
        self
    }

    pub fn with_solver(mut self, solver: SqpOptions) -> Self {
        self.solver = solver;
        self
    }

    pub fn with_theta_layout(mut self, layout: ThetaLayout) -> Self {
        self.theta_layout = layout;
        self
    }

    /// Fast-rate samples needed to cover the horizon.
    pub fn window_len(&self) -> usize {
        self.horizon * self.model.ticks_per_period() + 1
    }

    pub fn decision_box(&self) -> BoxSet {
        self.control_set.repeat(self.horizon)
    }

    pub fn instance(&self, x0: StateVec, window: ParamWindow) -> Result<OcpInstance<'_, M>, OcpError> {
        if x0.dim() != self.model.state_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.model.state_dim(),
                got: x0.dim(),
            }
            .into());
        }
        if window.len() < self.window_len() {
            return Err(OcpError::Invalid(format!(
                "parameter window has {} samples, horizon needs {}",
                window.len(),
                self.window_len()
            )));
        }
        let signal = self.model.signal(&window)?;
        Ok(OcpInstance {
            ocp: self,
            x0,
            window,
            signal,
        })
    }
}

/// A problem with fixed initial state and parameter window.
pub struct OcpInstance<'a, M: PlantModel> {
    pub ocp: &'a ParametricOcp<M>,
    pub x0: StateVec,
    pub window: ParamWindow,
    pub signal: M::Signal,
}

/// Open-loop prediction with the stage cost of every interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub stage_costs: Vec<f64>,
}

impl Rollout {
    pub fn cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }
}

impl<'a, M: PlantModel> OcpInstance<'a, M> {
    /// Coarse parameter sequence, one sample per control interval.
    pub fn p_seq(&self) -> Vec<ParamSample> {
        self.window.coarse(self.ocp.model.ticks_per_period())[..self.ocp.horizon].to_vec()
    }

    /// NLP parameter vector for this instance.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.x0.as_slice().to_vec();
        if self.ocp.theta_layout == ThetaLayout::StateAndParams {
            for s in &self.window.samples {
                t.extend_from_slice(s.as_slice());
            }
        }
        t
    }

    fn check_controls(&self, u_seq: &[ControlVec]) -> Result<(), OcpError> {
        if u_seq.len() != self.ocp.horizon {
            return Err(CoreError::LengthMismatch(self.ocp.horizon, u_seq.len()).into());
        }
        for (index, u) in u_seq.iter().enumerate() {
            if !self.ocp.control_set.contains(u.as_slice()) {
                return Err(OcpError::Inadmissible {
                    index,
                    value: u.as_slice().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn rollout_with_costs(&self, u_seq: &[ControlVec]) -> Result<Rollout, OcpError> {
        self.check_controls(u_seq)?;
        let model = &self.ocp.model;
        let ticks = model.ticks_per_period();
        let mut states = vec![self.x0.clone()];
        let mut stage_costs = Vec::with_capacity(u_seq.len());
        for (k, u) in u_seq.iter().enumerate() {
            let out = model.advance(states[k].as_slice(), u.as_slice(), &self.signal, k * ticks, ticks)?;
            states.push(StateVec::new(out.state)?);
            stage_costs.push(out.cost);
        }
        let trajectory = Trajectory::new(0.0, model.control_period(), states, u_seq.to_vec(), self.p_seq())?;
        Ok(Rollout {
            trajectory,
            stage_costs,
        })
    }

    pub fn rollout(&self, u_seq: &[ControlVec]) -> Result<Trajectory, OcpError> {
        Ok(self.rollout_with_costs(u_seq)?.trajectory)
    }

    pub fn eval_cost(&self, u_seq: &[ControlVec]) -> Result<f64, OcpError> {
        Ok(self.rollout_with_costs(u_seq)?.cost())
    }

    /// Unscaled cost of a stacked control vector from `x0`, no admissibility check.
    fn cost_flat(&self, x0: &[f64], z: &[f64], signal: &M::Signal) -> Result<f64, SimError> {
        let model = &self.ocp.model;
        let ticks = model.ticks_per_period();
        let m = model.control_dim();
        let mut x = x0.to_vec();
        let mut total = 0.0;
        for k in 0..self.ocp.horizon {
            let out = model.advance(&x, &z[k * m..(k + 1) * m], signal, k * ticks, ticks)?;
            total += out.cost;
            x = out.state;
            if let Some(set) = &self.ocp.state_set {
                total += self.ocp.state_penalty * violation_sq(set, &x);
            }
        }
        Ok(total)
    }

    pub fn as_nlp(&self) -> OcpNlp<'_, 'a, M> {
        OcpNlp {
            instance: self,
            bounds: self.ocp.decision_box(),
        }
    }

    /// Solves from `warm_start` (projected onto the admissible set) or from
    /// the box midpoint.
    pub fn solve(&self, warm_start: Option<&[ControlVec]>) -> Result<OcpSolution, OcpError> {
        self.solve_with(warm_start, &self.ocp.solver, None)
    }

    pub fn solve_with(
        &self,
        warm_start: Option<&[ControlVec]>,
        options: &SqpOptions,
        hessian0: Option<&nalgebra::DMatrix<f64>>,
    ) -> Result<OcpSolution, OcpError> {
        let nlp_problem = self.as_nlp();
        let z0 = match warm_start {
            Some(ws) => {
                if ws.len() != self.ocp.horizon {
                    return Err(CoreError::LengthMismatch(self.ocp.horizon, ws.len()).into());
                }
                flatten(ws)
            }
            None => {
                let mid: Vec<f64> = self
                    .ocp
                    .control_set
                    .lower()
                    .iter()
                    .zip(self.ocp.control_set.upper())
                    .map(|(l, u)| midpoint(*l, *u))
                    .collect();
                mid.repeat(self.ocp.horizon)
            }
        };
        let sol = nlp::sqp_solve_with(&nlp_problem, &self.theta(), &z0, options, hessian0)?;
        Ok(OcpSolution::new(sol, self.ocp.model.control_dim(), self.ocp.objective_scale)?)
    }

    /// Whether every predicted state lies in the state set (true without one).
    pub fn states_feasible(&self, u_seq: &[ControlVec]) -> Result<bool, OcpError> {
        let Some(set) = &self.ocp.state_set else {
            return Ok(true);
        };
        let traj = self.rollout(u_seq)?;
        Ok(traj.states().iter().all(|x| set.contains(x.as_slice())))
    }
}

fn midpoint(l: f64, u: f64) -> f64 {
    match (l.is_finite(), u.is_finite()) {
        (true, true) => 0.5 * (l + u),
        (true, false) => l,
        (false, true) => u,
        (false, false) => 0.0,
    }
}

fn violation_sq(set: &BoxSet, x: &[f64]) -> f64 {
    x.iter()
        .zip(set.lower().iter().zip(set.upper()))
        .map(|(v, (l, u))| {
            let d = (l - v).max(v - u).max(0.0);
            d * d
        })
        .sum()
}

pub fn flatten(u_seq: &[ControlVec]) -> Vec<f64> {
    u_seq.iter().flat_map(|u| u.iter().copied()).collect()
}

pub fn unflatten(z: &[f64], control_dim: usize) -> Result<Vec<ControlVec>, CoreError> {
    z.chunks(control_dim).map(|c| ControlVec::new(c.to_vec())).collect()
}

/// Drops the first move and repeats the last one.
pub fn shift_warm_start(u_prev: &[ControlVec]) -> Vec<ControlVec> {
    match u_prev.split_first() {
        None => Vec::new(),
        Some((_, rest)) => {
            let mut out = rest.to_vec();
            out.push(u_prev[u_prev.len() - 1].clone());
            out
        }
    }
}

/// The single-shooting NLP of an instance.
pub struct OcpNlp<'i, 'a, M: PlantModel> {
    instance: &'i OcpInstance<'a, M>,
    bounds: BoxSet,
}

impl<M: PlantModel> NlpProblem for OcpNlp<'_, '_, M> {
    fn dim_z(&self) -> usize {
        self.instance.ocp.horizon * self.instance.ocp.model.control_dim()
    }

    fn dim_theta(&self) -> usize {
        let nx = self.instance.ocp.model.state_dim();
        match self.instance.ocp.theta_layout {
            ThetaLayout::State => nx,
            ThetaLayout::StateAndParams => nx + self.instance.window.len() * self.instance.ocp.model.param_dim(),
        }
    }

    fn bounds(&self) -> &BoxSet {
        &self.bounds
    }

    fn objective(&self, z: &[f64], theta: &[f64]) -> Result<f64, NlpError> {
        let inst = self.instance;
        let nx = inst.ocp.model.state_dim();
        let fail = |e: SimError| NlpError::Objective {
            z: z.to_vec(),
            msg: e.to_string(),
        };
        let (x0, params) = theta.split_at(nx);
        let own: Vec<f64>;
        let changed = match inst.ocp.theta_layout {
            ThetaLayout::State => false,
            ThetaLayout::StateAndParams => {
                own = inst.theta()[nx..].to_vec();
                own != params
            }
        };
        let cost = if changed {
            let dim = inst.ocp.model.param_dim();
            let samples = params
                .chunks(dim)
                .map(|c| ParamSample::new(c.to_vec()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| fail(e.into()))?;
            let window = ParamWindow::new(inst.window.sample_period, samples).map_err(fail)?;
            let signal = inst.ocp.model.signal(&window).map_err(fail)?;
            inst.cost_flat(x0, z, &signal)
        } else {
            inst.cost_flat(x0, z, &inst.signal)
        };
        Ok(cost.map_err(fail)? / inst.ocp.objective_scale)
    }
}

/// Solver output in control-sequence form.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub controls: Vec<ControlVec>,
    /// Optimal cost `V_N` in cost units.
    pub value: f64,
    pub nlp: NlpSolution,
}

impl OcpSolution {
    fn new(nlp: NlpSolution, control_dim: usize, scale: f64) -> Result<Self, CoreError> {
        Ok(Self {
            controls: unflatten(&nlp.z_star, control_dim)?,
            value: nlp.value * scale,
            nlp,
        })
    }

    pub fn from_nlp(nlp: NlpSolution, control_dim: usize, scale: f64) -> Result<Self, CoreError> {
        Self::new(nlp, control_dim, scale)
    }
}

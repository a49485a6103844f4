//! Plant models, road data and disturbance generation.

pub mod disturbance;
pub mod quarter_car;
pub mod road;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::IntegrateError;
use crate::types::{ControlVec, CoreError, ParamSample, StateVec};

pub use disturbance::{disturb, DisturbanceSpec, Disturber};
pub use quarter_car::{
    chassis_jerk, mechanical_energy, quarter_car_rhs, tyre_force, CostWeights, Integration, QuarterCar,
    QuarterCarParams, RoadSignal,
};
pub use road::{eval_road, make_interpolant, FftInterpolant, RoadProfile, RoadValue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error("invalid road profile: {0}")]
    InvalidRoad(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
    #[error("window [{start}, {start}+{count}) outside profile of length {len}")]
    WindowOutOfRange { start: usize, count: usize, len: usize },
    #[error("invalid disturbance: {0}")]
    InvalidDisturbance(String),
}

/// Parameter samples at the fast rate covering one or more control periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamWindow {
    pub sample_period: f64,
    pub samples: Vec<ParamSample>,
}

impl ParamWindow {
    pub fn new(sample_period: f64, samples: Vec<ParamSample>) -> Result<Self, SimError> {
        if !(sample_period > 0.0) {
            return Err(SimError::InvalidRoad(format!("sample period {sample_period}")));
        }
        if samples.len() < 2 {
            return Err(SimError::InvalidRoad("window needs at least two samples".into()));
        }
        let dim = samples[0].dim();
        if let Some(s) = samples.iter().find(|s| s.dim() != dim) {
            return Err(CoreError::DimensionMismatch { expected: dim, got: s.dim() }.into());
        }
        Ok(Self { sample_period, samples })
    }

    /// Scalar window from plain heights.
    pub fn from_scalars(sample_period: f64, values: &[f64]) -> Result<Self, SimError> {
        let samples = values.iter().map(|v| ParamSample::scalar(*v)).collect::<Result<Vec<_>, _>>()?;
        Self::new(sample_period, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, index: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[index]).collect()
    }

    /// Samples at the start of each control interval.
    pub fn coarse(&self, ticks_per_period: usize) -> Vec<ParamSample> {
        self.samples.iter().step_by(ticks_per_period.max(1)).cloned().collect()
    }
}

/// End state and accumulated stage cost of an integration.
#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub state: Vec<f64>,
    pub cost: f64,
}

/// Discrete-time plant obtained by integrating a continuous model with the
/// control held constant over each control period.
///
/// Time inside a signal is counted in fast ticks of length
/// `control_period / ticks_per_period` from the start of its window.
pub trait PlantModel: Send + Sync {
    /// Pre-processed parameter signal for one window.
    type Signal: Send + Sync;

    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn control_period(&self) -> f64;
    fn ticks_per_period(&self) -> usize;

    fn signal(&self, window: &ParamWindow) -> Result<Self::Signal, SimError>;

    /// Integrates over `ticks` fast ticks starting at tick `tick0`.
    fn advance(&self, x: &[f64], u: &[f64], signal: &Self::Signal, tick0: usize, ticks: usize) -> Result<Advance, SimError>;

    /// State after control interval `interval` of the signal.
    fn step(&self, x: &StateVec, u: &ControlVec, signal: &Self::Signal, interval: usize) -> Result<StateVec, SimError> {
        let ticks = self.ticks_per_period();
        let out = self.advance(x.as_slice(), u.as_slice(), signal, interval * ticks, ticks)?;
        Ok(StateVec::new(out.state)?)
    }

    /// Stage cost of control interval `interval`.
    fn stage_cost(&self, x: &StateVec, u: &ControlVec, signal: &Self::Signal, interval: usize) -> Result<f64, SimError> {
        let ticks = self.ticks_per_period();
        Ok(self.advance(x.as_slice(), u.as_slice(), signal, interval * ticks, ticks)?.cost)
    }
}

/// One control period of the disturbed plant: integrate from `x` under `u`
/// and `signal`, then add the model mismatch drawn by `disturber`.
pub fn step_plant<M: PlantModel>(
    model: &M,
    x: &StateVec,
    u: &ControlVec,
    signal: &M::Signal,
    interval: usize,
    disturber: &mut Disturber,
) -> Result<(StateVec, f64), SimError> {
    let ticks = model.ticks_per_period();
    let mut out = model.advance(x.as_slice(), u.as_slice(), signal, interval * ticks, ticks)?;
    disturber.mismatch(&mut out.state);
    Ok((StateVec::new(out.state)?, out.cost))
}

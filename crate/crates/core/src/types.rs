//! Shared value types: states, controls, parameters, box sets and trajectories.

use std::fmt;
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector must have positive dimension")]
    EmptyVector,
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("box bound lower[{index}] = {lower} exceeds upper = {upper}")]
    InvertedBounds { index: usize, lower: f64, upper: f64 },
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

/// Marker for the space a [`Vector`] lives in.
pub trait Space: Copy + fmt::Debug + Send + Sync + 'static {
    const NAME: &'static str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace;
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlSpace;
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpace;

impl Space for StateSpace {
    const NAME: &'static str = "state";
}
impl Space for ControlSpace {
    const NAME: &'static str = "control";
}
impl Space for ParamSpace {
    const NAME: &'static str = "parameter";
}

/// Finite real vector tagged with the space it belongs to, so states,
/// controls and parameters cannot be mixed up.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<S: Space> {
    values: Vec<f64>,
    #[serde(skip)]
    _space: PhantomData<S>,
}

pub type StateVec = Vector<StateSpace>;
pub type ControlVec = Vector<ControlSpace>;
pub type ParamSample = Vector<ParamSpace>;

impl<S: Space> Vector<S> {
    pub fn new(values: Vec<f64>) -> Result<Self, CoreError> {
        if values.is_empty() {
            return Err(CoreError::EmptyVector);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { index });
        }
        Ok(Self {
            values,
            _space: PhantomData,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self {
            values: vec![0.0; dim],
            _space: PhantomData,
        }
    }

    pub fn scalar(value: f64) -> Result<Self, CoreError> {
        Self::new(vec![value])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    fn check_dim(&self, other: &Self) -> Result<(), CoreError> {
        if self.dim() != other.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }
}

impl<S: Space> fmt::Debug for Vector<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", S::NAME, self.values)
    }
}

impl<S: Space> std::ops::Index<usize> for Vector<S> {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Euclidean distance `‖a − b‖₂` between two elements of the same space.
pub fn metric_distance<S: Space>(a: &Vector<S>, b: &Vector<S>) -> Result<f64, CoreError> {
    a.check_dim(b)?;
    Ok(euclid(a.as_slice(), b.as_slice()))
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Supremum over the stored horizon of the pointwise distances.
pub fn seq_sup_distance(a: &[ParamSample], b: &[ParamSample]) -> Result<f64, CoreError> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::EmptySequence);
    }
    if a.len() != b.len() {
        return Err(CoreError::LengthMismatch(a.len(), b.len()));
    }
    let mut sup = 0.0_f64;
    for (x, y) in a.iter().zip(b) {
        sup = sup.max(metric_distance(x, y)?);
    }
    Ok(sup)
}

/// Axis-aligned box `{ v : lower ≤ v ≤ upper }`; infinite sides are unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, CoreError> {
        if lower.len() != upper.len() {
            return Err(CoreError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(CoreError::EmptyVector);
        }
        for (index, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(CoreError::InvertedBounds {
                    index,
                    lower: l,
                    upper: u,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self, CoreError> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| *x >= *l && *x <= *u)
    }

    /// Componentwise clamp of a raw slice into the box.
    pub fn clamp(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (l, u))| x.max(*l).min(*u))
            .collect()
    }

    /// Smallest distance from `v` to a finite face of the box (infinite if none).
    /// Negative when `v` lies outside.
    pub fn boundary_margin(&self, v: &[f64]) -> f64 {
        let mut margin = f64::INFINITY;
        for (x, (l, u)) in v.iter().zip(self.lower.iter().zip(&self.upper)) {
            margin = margin.min(x - l).min(u - x);
        }
        margin
    }

    /// Repeat the box `times` times, e.g. per-step control bounds over a horizon.
    pub fn repeat(&self, times: usize) -> BoxSet {
        BoxSet {
            lower: self.lower.repeat(times),
            upper: self.upper.repeat(times),
        }
    }
}

/// Componentwise projection of a control onto a box.
pub fn project_box(v: &ControlVec, set: &BoxSet) -> Result<ControlVec, CoreError> {
    if v.dim() != set.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: set.dim(),
            got: v.dim(),
        });
    }
    ControlVec::new(set.clamp(v.as_slice()))
}

/// Open-loop trajectory sampled at a fixed control period.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t0: f64,
    dt: f64,
    states: Vec<StateVec>,
    controls: Vec<ControlVec>,
    params: Vec<ParamSample>,
}

impl Trajectory {
    pub fn new(
        t0: f64,
        dt: f64,
        states: Vec<StateVec>,
        controls: Vec<ControlVec>,
        params: Vec<ParamSample>,
    ) -> Result<Self, CoreError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(CoreError::InvalidTrajectory(format!("dt must be positive, got {dt}")));
        }
        if states.len() != controls.len() + 1 || states.len() != params.len() + 1 {
            return Err(CoreError::InvalidTrajectory(format!(
                "{} states, {} controls, {} parameters",
                states.len(),
                controls.len(),
                params.len()
            )));
        }
        Ok(Self {
            t0,
            dt,
            states,
            controls,
            params,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn states(&self) -> &[StateVec] {
        &self.states
    }

    pub fn controls(&self) -> &[ControlVec] {
        &self.controls
    }

    pub fn params(&self) -> &[ParamSample] {
        &self.params
    }

    /// `max_k ‖self(k) − other(k)‖` over the stored states.
    pub fn state_sup_distance(&self, other: &Trajectory) -> Result<f64, CoreError> {
        if self.states.len() != other.states.len() {
            return Err(CoreError::LengthMismatch(self.states.len(), other.states.len()));
        }
        let mut sup = 0.0_f64;
        for (a, b) in self.states.iter().zip(&other.states) {
            sup = sup.max(metric_distance(a, b)?);
        }
        Ok(sup)
    }
}

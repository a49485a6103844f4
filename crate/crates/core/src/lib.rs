//! Nonlinear model predictive control with pluggable control updates.

pub mod experiment;
pub mod integrate;
pub mod monitor;
pub mod mpc;
pub mod nlp;
pub mod ocp;
pub mod scenario;
pub mod sim;
pub mod track;
pub mod types;
pub mod updates;

pub use types::{
    metric_distance, project_box, seq_sup_distance, BoxSet, ControlVec, CoreError, ParamSample, StateVec, Trajectory,
};

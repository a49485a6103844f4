//! Scenario files: plant, horizon, rates, weights, disturbances, road source
//! and the run grid.
//!
//! The native format is one `key = value` per line, `#` starting a comment.
//! Lists are comma separated; `seeds` also accepts a half-open range `a..b`.
//! A file whose first non-blank character is `{` is read as JSON with the
//! same keys. Missing keys take the reference values.
//!
//! ```text
//! horizon = 5
//! strategies = nominal, realtime, full_reopt, hierarchical
//! seeds = 0..20
//! road = reference
//! fft_cutoff = 10
//! ```
//!
//! `road` is `reference`, `file:<path>` (a road-profile file) or
//! `track:<path>` (a track description); relative paths resolve against the
//! scenario file's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::mpc::{ClosedLoopConfig, RoadNoise};
use crate::ocp::{OcpError, ParametricOcp};
use crate::sim::{CostWeights, DisturbanceSpec, QuarterCar, QuarterCarParams, RoadProfile, SimError};
use crate::track::{synth_track, TrackSpec};
use crate::types::{BoxSet, StateVec};
use crate::updates::StrategyKind;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub plant: String,
    /// Wheel mass, kg.
    pub m_w: f64,
    /// Chassis mass, kg.
    pub m_c: f64,
    /// Tyre stiffness, N/m.
    pub c_w: f64,
    /// Tyre damping, N·s/m.
    pub d_w: f64,
    /// Suspension stiffness, N/m.
    pub c_c: f64,
    /// Exchange the tyre stiffness and damping values.
    pub swap_wheel_values: bool,
    pub horizon: usize,
    pub control_period: f64,
    pub sample_period: f64,
    pub comfort_weight: f64,
    pub safety_weight: f64,
    /// Damping bounds, kN·s/m.
    pub u_min: f64,
    pub u_max: f64,
    pub delta_x: f64,
    pub delta_p: f64,
    pub delta_f: f64,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategyKind>,
    pub road: String,
    pub fft_cutoff: Option<usize>,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub objective_scale: f64,
    pub substeps: usize,
    pub x0: Vec<f64>,
    pub road_noise: RoadNoise,
    pub record_values: bool,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        let p = QuarterCarParams::reference();
        Self {
            plant: "quarter_car".into(),
            m_w: p.m_w,
            m_c: p.m_c,
            c_w: p.c_w,
            d_w: p.d_w,
            c_c: p.c_c,
            swap_wheel_values: false,
            horizon: 5,
            control_period: 0.1,
            sample_period: 0.002,
            comfort_weight: 10.0,
            safety_weight: 1.0,
            u_min: 0.5,
            u_max: 3.0,
            delta_x: 0.005,
            delta_p: 0.005,
            delta_f: 0.0,
            steps: 100,
            seeds: vec![0],
            strategies: vec![
                StrategyKind::Nominal,
                StrategyKind::Sensitivity,
                StrategyKind::Realtime,
                StrategyKind::FullReopt,
                StrategyKind::Hierarchical,
            ],
            road: "reference".into(),
            fft_cutoff: Some(10),
            tolerance: 1e-6,
            max_iterations: 100,
            objective_scale: 1e4,
            substeps: 8,
            x0: vec![0.0; 4],
            road_noise: RoadNoise::Fresh,
            record_values: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoadSource {
    Reference,
    File(PathBuf),
    Track(PathBuf),
}

#[derive(Clone, Copy)]
enum Kind {
    Float,
    Int,
    Bool,
    Str,
    FloatList,
    SeedList,
    StrList,
    OptInt,
}

const KEYS: &[(&str, Kind)] = &[
    ("plant", Kind::Str),
    ("m_w", Kind::Float),
    ("m_c", Kind::Float),
    ("c_w", Kind::Float),
    ("d_w", Kind::Float),
    ("c_c", Kind::Float),
    ("swap_wheel_values", Kind::Bool),
    ("horizon", Kind::Int),
    ("control_period", Kind::Float),
    ("sample_period", Kind::Float),
    ("comfort_weight", Kind::Float),
    ("safety_weight", Kind::Float),
    ("u_min", Kind::Float),
    ("u_max", Kind::Float),
    ("delta_x", Kind::Float),
    ("delta_p", Kind::Float),
    ("delta_f", Kind::Float),
    ("steps", Kind::Int),
    ("seeds", Kind::SeedList),
    ("strategies", Kind::StrList),
    ("road", Kind::Str),
    ("fft_cutoff", Kind::OptInt),
    ("tolerance", Kind::Float),
    ("max_iterations", Kind::Int),
    ("objective_scale", Kind::Float),
    ("substeps", Kind::Int),
    ("x0", Kind::FloatList),
    ("road_noise", Kind::Str),
    ("record_values", Kind::Bool),
];

fn typed(kind: Kind, raw: &str) -> Result<Value, String> {
    let float = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("expected a number, got '{}'", s.trim()));
    let int = |s: &str| s.trim().parse::<u64>().map_err(|_| format!("expected a nonnegative integer, got '{}'", s.trim()));
    let items = || raw.split(',').map(str::trim).filter(|s| !s.is_empty());
    Ok(match kind {
        Kind::Float => Value::from(float(raw)?),
        Kind::Int => Value::from(int(raw)?),
        Kind::Bool => match raw {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            other => return Err(format!("expected true or false, got '{other}'")),
        },
        Kind::Str => Value::String(raw.to_string()),
        Kind::FloatList => Value::Array(items().map(float).collect::<Result<Vec<_>, _>>()?.into_iter().map(Value::from).collect()),
        Kind::SeedList => {
            if let Some((a, b)) = raw.split_once("..") {
                let (a, b) = (int(a)?, int(b)?);
                Value::Array((a..b).map(Value::from).collect())
            } else {
                Value::Array(items().map(int).collect::<Result<Vec<_>, _>>()?.into_iter().map(Value::from).collect())
            }
        }
        Kind::StrList => Value::Array(items().map(|s| Value::String(s.to_string())).collect()),
        Kind::OptInt => match raw {
            "none" | "" => Value::Null,
            other => Value::from(int(other)?),
        },
    })
}

impl ScenarioFile {
    pub fn parse_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: ScenarioFile = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ScenarioError::Line {
                line: e.line(),
                msg: e.to_string(),
            })?
        } else {
            let mut map = Map::new();
            let mut lines = std::collections::HashMap::new();
            for (no, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let err = |msg: String| ScenarioError::Line { line: no + 1, msg };
                let (key, value) = line.split_once('=').ok_or_else(|| err("expected 'key = value'".into()))?;
                let key = key.trim();
                let kind = KEYS
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, kind)| *kind)
                    .ok_or_else(|| err(format!("unknown key '{key}'")))?;
                if map.insert(key.to_string(), typed(kind, value.trim()).map_err(err)?).is_some() {
                    return Err(err(format!("duplicate key '{key}'")));
                }
                lines.insert(key.to_string(), no + 1);
            }
            // Deserialize key by key so type errors keep their line.
            let mut out = serde_json::to_value(ScenarioFile::default()).expect("default serializes");
            for (key, value) in map {
                out[key.as_str()] = value;
                if let Err(e) = serde_json::from_value::<ScenarioFile>(out.clone()) {
                    return Err(ScenarioError::Line {
                        line: lines[&key],
                        msg: e.to_string(),
                    });
                }
            }
            serde_json::from_value(out).map_err(|e| ScenarioError::Invalid(e.to_string()))?
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Reads and validates a scenario; relative road paths are resolved
    /// against the file's directory.
    pub fn read(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        let mut s = Self::parse_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for prefix in ["file:", "track:"] {
            if let Some(rest) = s.road.strip_prefix(prefix) {
                let p = Path::new(rest);
                if p.is_relative() {
                    s.road = format!("{prefix}{}", base.join(p).display());
                }
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.plant != "quarter_car" {
            return bad(format!("unknown plant '{}'", self.plant));
        }
        self.params()?;
        if self.horizon < 2 {
            return bad(format!("horizon {} < 2", self.horizon));
        }
        if !(self.sample_period > 0.0 && self.control_period > 0.0) {
            return bad("periods must be positive".into());
        }
        let ratio = self.control_period / self.sample_period;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < 1.0 {
            return bad(format!(
                "control period {} is not a positive integer multiple of sample period {}",
                self.control_period, self.sample_period
            ));
        }
        if !(self.comfort_weight >= 0.0 && self.safety_weight >= 0.0) {
            return bad("weights must be nonnegative".into());
        }
        if !(self.u_min < self.u_max) || !self.u_min.is_finite() || !self.u_max.is_finite() {
            return bad(format!("control box [{}, {}] is empty", self.u_min, self.u_max));
        }
        self.disturbance(0).validate()?;
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.seeds.is_empty() || self.strategies.is_empty() {
            return bad("need at least one seed and one strategy".into());
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return bad("solver tolerance and iteration limit must be positive".into());
        }
        if !(self.objective_scale > 0.0) || self.substeps == 0 {
            return bad("objective scale and substeps must be positive".into());
        }
        if self.x0.len() != 4 || self.x0.iter().any(|v| !v.is_finite()) {
            return bad(format!("x0 needs 4 finite entries, got {:?}", self.x0));
        }
        if self.fft_cutoff == Some(0) {
            return bad("fft_cutoff must be positive or none".into());
        }
        self.road_source()?;
        Ok(())
    }

    /// Plant parameters with the swap applied.
    pub fn params(&self) -> Result<QuarterCarParams, ScenarioError> {
        let p = QuarterCarParams::new(self.m_w, self.m_c, self.c_w, self.d_w, self.c_c)?;
        Ok(if self.swap_wheel_values { p.with_wheel_values_swapped() } else { p })
    }

    /// The scenario as run: swap applied to the values, flag cleared.
    pub fn effective(&self) -> Result<Self, ScenarioError> {
        let p = self.params()?;
        Ok(Self {
            c_w: p.c_w,
            d_w: p.d_w,
            swap_wheel_values: false,
            ..self.clone()
        })
    }

    pub fn road_source(&self) -> Result<RoadSource, ScenarioError> {
        if self.road == "reference" {
            Ok(RoadSource::Reference)
        } else if let Some(p) = self.road.strip_prefix("file:") {
            Ok(RoadSource::File(PathBuf::from(p)))
        } else if let Some(p) = self.road.strip_prefix("track:") {
            Ok(RoadSource::Track(PathBuf::from(p)))
        } else {
            Err(ScenarioError::Invalid(format!(
                "road must be 'reference', 'file:<path>' or 'track:<path>', got '{}'",
                self.road
            )))
        }
    }

    pub fn load_road(&self) -> Result<RoadProfile, ScenarioError> {
        let road = match self.road_source()? {
            RoadSource::Reference => synth_track(&TrackSpec::reference(self.sample_period))?,
            RoadSource::File(p) => RoadProfile::read(&p)?,
            RoadSource::Track(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| ScenarioError::Io(format!("{}: {e}", p.display())))?;
                synth_track(&TrackSpec::parse(&text)?)?
            }
        };
        if (road.sample_period - self.sample_period).abs() > 1e-12 * self.sample_period {
            return Err(ScenarioError::Invalid(format!(
                "road sampled every {} s, scenario expects {} s",
                road.sample_period, self.sample_period
            )));
        }
        Ok(road)
    }

    pub fn model(&self) -> Result<QuarterCar, ScenarioError> {
        Ok(QuarterCar::new(self.params()?, self.control_period, self.sample_period)?
            .with_weights(CostWeights {
                comfort: self.comfort_weight,
                safety: self.safety_weight,
            })
            .with_integration(crate::sim::Integration::FixedGrid { substeps: self.substeps })
            .with_cutoff(self.fft_cutoff))
    }

    pub fn ocp(&self) -> Result<ParametricOcp<QuarterCar>, ScenarioError> {
        let solver = crate::nlp::SqpOptions {
            tol: self.tolerance,
            max_iter: self.max_iterations,
            ..Default::default()
        };
        Ok(ParametricOcp::new(self.model()?, self.horizon, BoxSet::uniform(1, self.u_min, self.u_max).map_err(SimError::from)?)?
            .with_objective_scale(self.objective_scale)
            .with_solver(solver))
    }

    pub fn disturbance(&self, seed: u64) -> DisturbanceSpec {
        DisturbanceSpec {
            delta_x: self.delta_x,
            delta_p: self.delta_p,
            delta_f: self.delta_f,
            seed,
        }
    }

    pub fn closed_loop(&self, strategy: StrategyKind, seed: u64, road: &RoadProfile) -> Result<ClosedLoopConfig<QuarterCar>, ScenarioError> {
        let x0 = StateVec::new(self.x0.clone()).map_err(SimError::from)?;
        let mut cfg = ClosedLoopConfig::new(self.ocp()?, strategy, x0, road.clone(), self.steps).with_disturbance(self.disturbance(seed));
        cfg.road_noise = self.road_noise;
        cfg.record_values = self.record_values;
        Ok(cfg)
    }

    /// `key = value` form; parses back to the same scenario.
    pub fn to_key_value(&self) -> String {
        let v = serde_json::to_value(self).expect("scenario serializes");
        let mut out = String::new();
        for (key, _) in KEYS {
            let text = match &v[*key] {
                Value::Null => "none".to_string(),
                Value::String(s) => s.clone(),
                Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(", "),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{key} = {text}");
        }
        out
    }

    /// Effective configuration as key-value text, noting an applied swap.
    pub fn echo(&self) -> Result<String, ScenarioError> {
        let mut out = String::new();
        if self.swap_wheel_values {
            out.push_str("# tyre stiffness and damping values swapped\n");
        }
        out.push_str(&self.effective()?.to_key_value());
        Ok(out)
    }
}

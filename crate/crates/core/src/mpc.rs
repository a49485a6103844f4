//! Advanced-step closed loop: measure, update, apply, predict, reoptimize.
//!
//! The nominal problem for step `n` is solved one step ahead, from the
//! predicted state `x(n)` and the road window `p_n` measured one step earlier.
//! At step `n` the plant state `x̄(n)` and a fresh road window `p̄_n` are
//! measured, the selected update corrects the nominal solution, and the
//! plant is driven by the update over the fast ticks of the period. The
//! plant sees the measured road (the disturbed parameter), so road
//! measurement error acts as a parameter disturbance between the nominal
//! forecast and the measurement. The state disturbance is a modelling error
//! that accumulates evenly over the fast ticks; its total over one period is
//! the drawn deviation. The prediction `x(n+1)` uses the nominal model on
//! `p̄_n` and the applied controls, and the next nominal problem is solved
//! from it with the shifted measured window.

use serde::{Deserialize, Serialize};

use crate::nlp::extract_sensitivities;
use crate::ocp::{shift_warm_start, OcpError, OcpInstance, OcpSolution, ParametricOcp};
use crate::sim::{DisturbanceSpec, Disturber, ParamWindow, PlantModel, RoadProfile, SimError};
use crate::types::{euclid, BoxSet, ControlVec, ParamSample, StateVec};
use crate::updates::{DLevelSource, HierarchicalUpdate, StrategyKind, UpdateStrategy, UpdateContext, UpdateDiagnostics, UpdateResult};

/// How road measurement errors evolve over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadNoise {
    /// The whole measured window is re-drawn every step.
    #[default]
    Fresh,
    /// Each road sample carries one error drawn at the start of the run, so
    /// every look at the same sample returns the same value.
    Persistent,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopConfig<M: PlantModel> {
    pub ocp: ParametricOcp<M>,
    pub strategy: StrategyKind,
    pub disturbance: DisturbanceSpec,
    pub steps: usize,
    pub x0: StateVec,
    /// Undisturbed road; measurements add the parameter disturbance.
    pub road: RoadProfile,
    pub road_noise: RoadNoise,
    /// Also solve `V_N(x̄(n), p̄_n)` every step (one extra solve per step for
    /// strategies that do not reoptimize anyway).
    pub record_values: bool,
    /// D-level source of the hierarchical strategy.
    pub d_level: DLevelSource,
}

impl<M: PlantModel> ClosedLoopConfig<M> {
    pub fn new(ocp: ParametricOcp<M>, strategy: StrategyKind, x0: StateVec, road: RoadProfile, steps: usize) -> Self {
        Self {
            ocp,
            strategy,
            disturbance: DisturbanceSpec::none(),
            steps,
            x0,
            road,
            road_noise: RoadNoise::default(),
            record_values: true,
            d_level: DLevelSource::default(),
        }
    }

    pub fn with_disturbance(mut self, disturbance: DisturbanceSpec) -> Self {
        self.disturbance = disturbance;
        self
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        if self.steps == 0 {
            return Err(OcpError::Invalid("closed loop needs at least one step".into()));
        }
        if self.ocp.model.param_dim() != 1 {
            return Err(OcpError::Invalid(format!(
                "road-driven loop needs a scalar parameter, model has {}",
                self.ocp.model.param_dim()
            )));
        }
        let expected = self.ocp.model.control_period() / self.ocp.model.ticks_per_period() as f64;
        if (self.road.sample_period - expected).abs() > 1e-12 * expected {
            return Err(OcpError::Invalid(format!(
                "road sampled every {} s, model expects {} s",
                self.road.sample_period, expected
            )));
        }
        self.disturbance.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub n: usize,
    pub t: f64,
    /// Measured plant state `x̄(n)`.
    pub x_bar: StateVec,
    /// Nominal prediction `x(n)` the nominal problem was solved for.
    pub x_pred: StateVec,
    /// First applied move `μ̄_N(x̄(n), p̄_n)`.
    pub control: ControlVec,
    /// Applied move per fast tick, only when it may change inside the period.
    pub tick_controls: Vec<ControlVec>,
    /// Stage cost of the plant over the period.
    pub stage_cost: f64,
    /// `V_N(x̄(n), p̄_n)`, if recorded.
    pub value: Option<f64>,
    /// `V_N(x(n), p_n)` of the nominal problem.
    pub nominal_value: f64,
    /// Nominal solution `u*(x(n), p_n)`.
    pub nominal_controls: Vec<ControlVec>,
    /// First-interval cost of the nominal solution, `ℓ(x(n), μ_N(x(n), p_n), p(n))`.
    pub nominal_stage_cost: f64,
    /// `‖p̄_n − p_n‖max`: measured window against the nominal one.
    pub road_error: f64,
    pub nominal_converged: bool,
    pub update: UpdateDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub strategy: StrategyKind,
    pub steps: Vec<StepRecord>,
    /// Plant state after the last step.
    pub final_state: Option<StateVec>,
    /// Set when the loop stopped early.
    pub failure: Option<String>,
}

impl ClosedLoopRecord {
    /// Sum of the recorded stage costs.
    pub fn closed_loop_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.stage_cost).sum()
    }

    pub fn applied_controls(&self) -> Vec<ControlVec> {
        self.steps
            .iter()
            .flat_map(|s| {
                if s.tick_controls.is_empty() {
                    vec![s.control.clone()]
                } else {
                    s.tick_controls.clone()
                }
            })
            .collect()
    }
}

/// Undisturbed road and, for persistent noise, its one-off measurement.
struct RoadFeed {
    truth: Vec<f64>,
    measured: Vec<f64>,
    window: usize,
    ticks: usize,
    dt: f64,
}

impl RoadFeed {
    fn new(road: &RoadProfile, steps: usize, window: usize, ticks: usize, noise: RoadNoise, d: &mut Disturber) -> Result<Self, SimError> {
        let total = steps * ticks + window;
        let truth = road.window_padded(0, total);
        let measured = match noise {
            RoadNoise::Persistent => noisy(&truth, d)?,
            RoadNoise::Fresh => truth.clone(),
        };
        Ok(Self {
            truth,
            measured,
            window,
            ticks,
            dt: road.sample_period,
        })
    }

    fn range(&self, n: usize) -> std::ops::Range<usize> {
        n * self.ticks..n * self.ticks + self.window
    }

    fn truth(&self, n: usize) -> &[f64] {
        &self.truth[self.range(n)]
    }

    fn pack(&self, values: &[f64]) -> Result<ParamWindow, SimError> {
        ParamWindow::from_scalars(self.dt, values)
    }
}

fn noisy(values: &[f64], d: &mut Disturber) -> Result<Vec<f64>, SimError> {
    let samples = values.iter().map(|v| ParamSample::scalar(*v)).collect::<Result<Vec<_>, _>>()?;
    Ok(d.disturb_params(&samples)?.into_iter().map(|s| s[0]).collect())
}

fn solve_nominal<'a, M: PlantModel>(
    ocp: &'a ParametricOcp<M>,
    x: StateVec,
    window: ParamWindow,
    warm: Option<&[ControlVec]>,
) -> Result<(OcpInstance<'a, M>, OcpSolution), OcpError> {
    let inst = ocp.instance(x, window)?;
    let sol = inst.solve(warm)?;
    Ok((inst, sol))
}

/// Runs the closed loop. OCP failures truncate the record and are reported
/// in `failure`; invalid configurations are errors.
pub fn run_closed_loop<M: PlantModel>(config: &ClosedLoopConfig<M>) -> Result<ClosedLoopRecord, OcpError> {
    config.validate()?;
    let ocp = &config.ocp;
    let model = &ocp.model;
    let ticks = model.ticks_per_period();
    let mut disturber = Disturber::new(config.disturbance)?;
    let feed = RoadFeed::new(
        &config.road,
        config.steps,
        ocp.window_len(),
        ticks,
        config.road_noise,
        &mut disturber,
    )?;
    let mut strategy: Box<dyn UpdateStrategy<M>> = match config.strategy {
        StrategyKind::Hierarchical => Box::new(HierarchicalUpdate::new(config.d_level)),
        other => other.build::<M>(),
    };
    let mut record = ClosedLoopRecord {
        strategy: config.strategy,
        steps: Vec::with_capacity(config.steps),
        final_state: None,
        failure: None,
    };

    let mut nominal_window: Vec<f64> = match config.road_noise {
        RoadNoise::Persistent => feed.measured[feed.range(0)].to_vec(),
        RoadNoise::Fresh => noisy(feed.truth(0), &mut disturber)?,
    };
    let mut x_pred = config.x0.clone();
    let mut x_plant = config.x0.clone();
    let (mut inst, mut sol) = match solve_nominal(ocp, x_pred.clone(), feed.pack(&nominal_window)?, None) {
        Ok(v) => v,
        Err(e) => {
            record.failure = Some(format!("initial solve: {e}"));
            return Ok(record);
        }
    };

    for n in 0..config.steps {
        // (1) measurements
        let x_bar = x_plant.clone();
        let measured: Vec<f64> = match config.road_noise {
            RoadNoise::Persistent => feed.measured[feed.range(n)].to_vec(),
            RoadNoise::Fresh => noisy(feed.truth(n), &mut disturber)?,
        };
        let p_bar = feed.pack(&measured)?;
        let road_error = measured
            .iter()
            .zip(&nominal_window)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let drift = disturber.disturb_state(&StateVec::zeros(model.state_dim()))?;
        let drift_per_tick: Vec<f64> = drift.iter().map(|v| v / ticks as f64).collect();

        // (2) update and apply
        let sens = if strategy.needs_sensitivities() {
            Some(extract_sensitivities(&inst.as_nlp(), &sol.nlp, &inst.theta()))
        } else {
            None
        };
        let mut ctx = UpdateContext::new(&inst, &sol);
        if let Some(s) = &sens {
            match s {
                Ok(data) => ctx.sensitivities = Some(data),
                Err(e) => ctx.sensitivity_error = Some(e.to_string()),
            }
        }
        let result: UpdateResult = strategy.update(&ctx, &x_bar, &p_bar);
        let signal = model.signal(&p_bar)?;
        let fast = strategy.has_fast_rate();
        let mut applied = result.feedback.clone();
        let mut tick_controls = Vec::new();
        let mut fast_fallback = false;
        let mut state = x_bar.as_slice().to_vec();
        let mut predicted = state.clone();
        let mut stage_cost = 0.0;
        for tick in 0..ticks {
            if tick > 0 {
                if let Some(res) = strategy.fast_update(tick, &StateVec::new(state.clone())?) {
                    fast_fallback |= res.diagnostics.fallback;
                    applied = res.feedback;
                }
            }
            let out = model.advance(&state, applied.as_slice(), &signal, tick, 1)?;
            state = out.state;
            for (v, d) in state.iter_mut().zip(&drift_per_tick) {
                *v += d;
            }
            stage_cost += out.cost;
            predicted = model.advance(&predicted, applied.as_slice(), &signal, tick, 1)?.state;
            if fast {
                tick_controls.push(applied.clone());
            }
        }
        disturber.mismatch(&mut state);
        let next_plant = StateVec::new(state)?;
        let next_pred = StateVec::new(predicted)?;

        let mut update = result.diagnostics.clone();
        if fast_fallback && !update.fallback {
            update.fallback = true;
            update.fallback_reason = Some("fast-rate correction unavailable".into());
        }

        let value = if !config.record_values {
            None
        } else if x_bar == inst.x0 && measured == nominal_window {
            Some(sol.value)
        } else {
            ocp.instance(x_bar.clone(), p_bar.clone())
                .and_then(|i| i.solve(Some(&sol.controls)))
                .map(|s| s.value)
                .ok()
        };
        let nominal_stage_cost = model.stage_cost(&inst.x0, &sol.controls[0], &inst.signal, 0)?;
        record.steps.push(StepRecord {
            n,
            t: n as f64 * model.control_period(),
            x_bar: x_bar.clone(),
            x_pred: x_pred.clone(),
            control: result.feedback.clone(),
            tick_controls,
            stage_cost,
            value,
            nominal_value: sol.value,
            nominal_controls: sol.controls.clone(),
            nominal_stage_cost,
            road_error,
            nominal_converged: sol.nlp.converged,
            update,
        });

        // (3) prediction, (4) next nominal problem
        x_plant = next_plant;
        x_pred = next_pred;
        nominal_window = match config.road_noise {
            RoadNoise::Persistent => feed.measured[feed.range(n + 1)].to_vec(),
            RoadNoise::Fresh => {
                let mut w = measured[ticks..].to_vec();
                let r = feed.range(n + 1);
                w.extend_from_slice(&feed.truth[r.end - ticks..r.end]);
                w
            }
        };
        if n + 1 == config.steps {
            break;
        }
        let warm = shift_warm_start(&result.u_bar);
        match solve_nominal(ocp, x_pred.clone(), feed.pack(&nominal_window)?, Some(&warm)) {
            Ok((i, s)) => {
                inst = i;
                sol = s;
            }
            Err(e) => {
                record.failure = Some(format!("nominal solve at step {}: {e}", n + 1));
                record.final_state = Some(x_plant);
                return Ok(record);
            }
        }
    }
    record.final_state = Some(x_plant);
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Steps whose measured state lies outside the state set.
    pub violations: Vec<usize>,
    /// Steps whose nominal state is closer than the margin to the boundary.
    pub margin_flags: Vec<usize>,
    /// Smallest boundary distance over all nominal states (infinite for an unbounded set).
    pub min_margin: f64,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `x̄(n) ∈ 𝕏` at every step and flags nominal states within `margin`
/// of the boundary of `𝕏`.
pub fn check_feasibility(record: &ClosedLoopRecord, state_set: &BoxSet, margin: f64) -> FeasibilityReport {
    let mut violations = Vec::new();
    let mut margin_flags = Vec::new();
    let mut min_margin = f64::INFINITY;
    for s in &record.steps {
        if !state_set.contains(s.x_bar.as_slice()) {
            violations.push(s.n);
        }
        let m = state_set.boundary_margin(s.x_pred.as_slice());
        min_margin = min_margin.min(m);
        if m < margin {
            margin_flags.push(s.n);
        }
    }
    FeasibilityReport {
        violations,
        margin_flags,
        min_margin,
    }
}

/// `max_n ‖x̄(n) − x(n)‖₂` over a record.
pub fn max_prediction_gap(record: &ClosedLoopRecord) -> f64 {
    record
        .steps
        .iter()
        .map(|s| euclid(s.x_bar.as_slice(), s.x_pred.as_slice()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::QuarterCar;
    use crate::track::{synth_track, TrackSpec};

    fn ocp() -> ParametricOcp<QuarterCar> {
        ParametricOcp::new(QuarterCar::reference(), 5, BoxSet::uniform(1, 0.5, 3.0).unwrap())
            .unwrap()
            .with_objective_scale(1e4)
    }

    fn bump_road() -> RoadProfile {
        let spec = TrackSpec::parse("dt 0.002\nduration 2\nstep 0.3 0.6 0 0.03\nstep 0.9 1.2 0.03 0\n").unwrap();
        synth_track(&spec).unwrap()
    }

    #[test]
    fn equilibrium_stays_at_rest() {
        let cfg = ClosedLoopConfig::new(ocp(), StrategyKind::Nominal, StateVec::zeros(4), RoadProfile::flat(0.002, 400).unwrap(), 10);
        let rec = run_closed_loop(&cfg).unwrap();
        assert!(rec.failure.is_none());
        assert_eq!(rec.steps.len(), 10);
        assert_eq!(rec.closed_loop_cost(), 0.0);
        assert!(rec.steps.iter().all(|s| s.x_bar.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn undisturbed_loop_tracks_its_prediction_exactly() {
        let cfg = ClosedLoopConfig::new(ocp(), StrategyKind::Nominal, StateVec::zeros(4), bump_road(), 6);
        let rec = run_closed_loop(&cfg).unwrap();
        assert!(rec.closed_loop_cost() > 0.0);
        for s in &rec.steps {
            assert_eq!(s.x_bar, s.x_pred, "step {}", s.n);
            assert_eq!(s.value, Some(s.nominal_value));
        }
    }

    #[test]
    fn prediction_matches_resimulation() {
        let cfg = ClosedLoopConfig::new(ocp(), StrategyKind::Realtime, StateVec::zeros(4), bump_road(), 5).with_disturbance(
            DisturbanceSpec {
                delta_x: 0.005,
                delta_p: 0.005,
                delta_f: 0.0,
                seed: 3,
            },
        );
        let mut cfg = cfg;
        cfg.ocp.model = cfg.ocp.model.clone().with_cutoff(Some(10));
        cfg.record_values = false;
        cfg.road_noise = RoadNoise::Persistent;
        let rec = run_closed_loop(&cfg).unwrap();
        // Rebuild the measured windows the loop used.
        let mut d = Disturber::new(cfg.disturbance).unwrap();
        let feed = RoadFeed::new(&cfg.road, cfg.steps, cfg.ocp.window_len(), 50, RoadNoise::Persistent, &mut d).unwrap();
        let model = &cfg.ocp.model;
        for w in rec.steps.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let sig = model.signal(&feed.pack(&feed.measured[feed.range(a.n)]).unwrap()).unwrap();
            let next = model.step(&a.x_bar, &a.control, &sig, 0).unwrap();
            let gap = euclid(next.as_slice(), b.x_pred.as_slice());
            assert!(gap <= 1e-12, "step {}: {gap:e}", a.n);
        }
    }

    #[test]
    fn feasibility_flags_planted_violations() {
        let cfg = ClosedLoopConfig::new(ocp(), StrategyKind::Nominal, StateVec::zeros(4), bump_road(), 6);
        let rec = run_closed_loop(&cfg).unwrap();
        let free = check_feasibility(&rec, &BoxSet::unbounded(4), 0.005);
        assert!(free.feasible() && free.margin_flags.is_empty());
        // Every state has x_c ≥ 0 on this road, so an upper bound of 0 on x_c
        // is violated wherever the chassis has risen.
        let tight = BoxSet::new(vec![-1.0; 4], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let rep = check_feasibility(&rec, &tight, 0.0);
        let risen: Vec<usize> = rec.steps.iter().filter(|s| s.x_bar[2] > 0.0).map(|s| s.n).collect();
        assert!(!risen.is_empty());
        assert_eq!(rep.violations, risen);
        let shrunk = BoxSet::new(vec![-1.0; 4], vec![1.0, 1.0, 0.01, 1.0]).unwrap();
        let rep = check_feasibility(&rec, &shrunk, 0.005);
        let near: Vec<usize> = rec.steps.iter().filter(|s| shrunk.boundary_margin(s.x_pred.as_slice()) < 0.005).map(|s| s.n).collect();
        assert_eq!(rep.margin_flags, near);
        assert!(rec.steps.iter().any(|s| s.x_pred[2] > 0.005));
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = ClosedLoopConfig::new(ocp(), StrategyKind::Hierarchical, StateVec::zeros(4), bump_road(), 4)
            .with_disturbance(DisturbanceSpec {
                delta_x: 0.005,
                delta_p: 0.005,
                delta_f: 0.0,
                seed: 11,
            });
        cfg.ocp.model = cfg.ocp.model.clone().with_cutoff(Some(10));
        cfg.record_values = false;
        let a = run_closed_loop(&cfg).unwrap();
        let b = run_closed_loop(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps[0].tick_controls.len(), 50);
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = ClosedLoopConfig::new(ocp(), StrategyKind::Nominal, StateVec::zeros(4), bump_road(), 0);
        assert!(run_closed_loop(&cfg).is_err());
    }
}

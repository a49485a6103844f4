//! Control updates: map a precomputed nominal solution and new measurements
//! to an admissible control sequence.
//!
//! Every strategy degrades to the nominal control with the fallback flag set
//! instead of failing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::nlp::{self, extract_sensitivities, SensitivityData, SolverCarry};
use crate::ocp::{flatten, unflatten, OcpInstance, OcpSolution};
use crate::sim::{ParamWindow, PlantModel};
use crate::types::{BoxSet, ControlVec, StateVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Nominal,
    Sensitivity,
    #[serde(alias = "realtime_iteration")]
    Realtime,
    Hierarchical,
    FullReopt,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Nominal,
        StrategyKind::Sensitivity,
        StrategyKind::Realtime,
        StrategyKind::Hierarchical,
        StrategyKind::FullReopt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Nominal => "nominal",
            StrategyKind::Sensitivity => "sensitivity",
            StrategyKind::Realtime => "realtime",
            StrategyKind::Hierarchical => "hierarchical",
            StrategyKind::FullReopt => "full_reopt",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.trim() {
            "nominal" => Some(StrategyKind::Nominal),
            "sensitivity" => Some(StrategyKind::Sensitivity),
            "realtime" | "realtime_iteration" => Some(StrategyKind::Realtime),
            "hierarchical" => Some(StrategyKind::Hierarchical),
            "full_reopt" => Some(StrategyKind::FullReopt),
            _ => None,
        }
    }

    pub fn build<M: PlantModel>(self) -> Box<dyn UpdateStrategy<M>> {
        match self {
            StrategyKind::Nominal => Box::new(NominalUpdate),
            StrategyKind::Sensitivity => Box::new(SensitivityUpdate),
            StrategyKind::Realtime => Box::new(RealtimeIteration::default()),
            StrategyKind::Hierarchical => Box::new(HierarchicalUpdate::default()),
            StrategyKind::FullReopt => Box::new(FullReopt),
        }
    }
}

/// Everything an update may use: the nominal problem `(x, p)` it was solved
/// for, its solution, and optional derivative information.
pub struct UpdateContext<'c, 'a, M: PlantModel> {
    /// Nominal instance; `nominal.ocp` rebuilds instances for new data.
    pub nominal: &'c OcpInstance<'a, M>,
    pub solution: &'c OcpSolution,
    pub sensitivities: Option<&'c SensitivityData>,
    /// Why `sensitivities` is missing, if it was requested.
    pub sensitivity_error: Option<String>,
    pub carry: Option<SolverCarry>,
}

impl<'c, 'a, M: PlantModel> UpdateContext<'c, 'a, M> {
    pub fn new(nominal: &'c OcpInstance<'a, M>, solution: &'c OcpSolution) -> Self {
        Self {
            nominal,
            solution,
            sensitivities: None,
            sensitivity_error: None,
            carry: Some(solution.nlp.carry()),
        }
    }

    fn control_set(&self) -> &BoxSet {
        &self.nominal.ocp.control_set
    }

    /// NLP parameter of the measured data, laid out like the nominal one.
    fn theta_of(&self, x_bar: &StateVec, p_bar: &ParamWindow) -> Result<Vec<f64>, String> {
        let inst = self.nominal.ocp.instance(x_bar.clone(), p_bar.clone()).map_err(|e| e.to_string())?;
        Ok(inst.theta())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    /// `max |ū − u*|` over the whole sequence, after projection.
    pub update_norm: f64,
    /// Largest distance of an unprojected component from the control box.
    pub projection_violation: f64,
    pub fallback: bool,
    pub fallback_reason: Option<String>,
    pub iterations: usize,
    /// Seconds; excluded from equality so records stay comparable.
    pub wall_time: f64,
}

impl PartialEq for UpdateDiagnostics {
    fn eq(&self, other: &Self) -> bool {
        self.update_norm == other.update_norm
            && self.projection_violation == other.projection_violation
            && self.fallback == other.fallback
            && self.fallback_reason == other.fallback_reason
            && self.iterations == other.iterations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub u_bar: Vec<ControlVec>,
    pub feedback: ControlVec,
    pub diagnostics: UpdateDiagnostics,
}

impl UpdateResult {
    fn finish(u_bar: Vec<ControlVec>, nominal: &[ControlVec], mut diagnostics: UpdateDiagnostics, start: Instant) -> Self {
        diagnostics.update_norm = u_bar
            .iter()
            .zip(nominal)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        diagnostics.wall_time = start.elapsed().as_secs_f64();
        let feedback = u_bar[0].clone();
        Self {
            u_bar,
            feedback,
            diagnostics,
        }
    }
}

/// Projects a stacked control vector onto the repeated box and reports the
/// largest violation that was removed.
fn project(z: &[f64], set: &BoxSet, horizon: usize) -> (Vec<ControlVec>, f64) {
    let full = set.repeat(horizon);
    let violation = z
        .iter()
        .zip(full.lower().iter().zip(full.upper()))
        .map(|(v, (l, u))| (l - v).max(v - u).max(0.0))
        .fold(0.0, f64::max);
    let clamped = full.clamp(z);
    let controls = unflatten(&clamped, set.dim()).expect("length is a multiple of the control dimension");
    (controls, violation)
}

fn fallback<M: PlantModel>(ctx: &UpdateContext<M>, reason: String, start: Instant) -> UpdateResult {
    let diagnostics = UpdateDiagnostics {
        fallback: true,
        fallback_reason: Some(reason),
        ..UpdateDiagnostics::default()
    };
    UpdateResult::finish(ctx.solution.controls.clone(), &ctx.solution.controls, diagnostics, start)
}

/// Applies the nominal control unchanged.
pub fn update_nominal<M: PlantModel>(ctx: &UpdateContext<M>, _x_bar: &StateVec, _p_bar: &ParamWindow) -> UpdateResult {
    let start = Instant::now();
    UpdateResult::finish(
        ctx.solution.controls.clone(),
        &ctx.solution.controls,
        UpdateDiagnostics::default(),
        start,
    )
}

/// First-order update `u* + (∂u*/∂θ)(θ̄ − θ)`, projected onto the box.
pub fn update_sensitivity<M: PlantModel>(ctx: &UpdateContext<M>, x_bar: &StateVec, p_bar: &ParamWindow) -> UpdateResult {
    let start = Instant::now();
    let Some(sens) = ctx.sensitivities else {
        let reason = ctx
            .sensitivity_error
            .clone()
            .unwrap_or_else(|| "no sensitivities in context".into());
        return fallback(ctx, reason, start);
    };
    let theta_bar = match ctx.theta_of(x_bar, p_bar) {
        Ok(t) => t,
        Err(e) => return fallback(ctx, e, start),
    };
    let theta = ctx.nominal.theta();
    if theta_bar.len() != theta.len() || sens.du_dtheta.ncols() != theta.len() {
        return fallback(ctx, "parameter layout changed".into(), start);
    }
    let delta: Vec<f64> = theta_bar.iter().zip(&theta).map(|(a, b)| a - b).collect();
    let z = sens.predict(&ctx.solution.nlp.z_star, &delta);
    let (u_bar, violation) = project(&z, ctx.control_set(), ctx.nominal.ocp.horizon);
    let diagnostics = UpdateDiagnostics {
        projection_violation: violation,
        ..UpdateDiagnostics::default()
    };
    UpdateResult::finish(u_bar, &ctx.solution.controls, diagnostics, start)
}

/// One SQP step at the measured data from the nominal solution. Returns the
/// updated solver carry alongside the result.
pub fn update_realtime_iteration<M: PlantModel>(
    ctx: &UpdateContext<M>,
    x_bar: &StateVec,
    p_bar: &ParamWindow,
) -> (UpdateResult, Option<SolverCarry>) {
    let start = Instant::now();
    let Some(carry) = &ctx.carry else {
        return (fallback(ctx, "no solver carry in context".into(), start), None);
    };
    let inst = match ctx.nominal.ocp.instance(x_bar.clone(), p_bar.clone()) {
        Ok(i) => i,
        Err(e) => return (fallback(ctx, e.to_string(), start), None),
    };
    let problem = inst.as_nlp();
    match nlp::sqp_single_iteration(&problem, &inst.theta(), &ctx.solution.nlp.z_star, carry) {
        Ok((z, new_carry)) => {
            let (u_bar, violation) = project(&z, ctx.control_set(), ctx.nominal.ocp.horizon);
            let diagnostics = UpdateDiagnostics {
                projection_violation: violation,
                iterations: 1,
                ..UpdateDiagnostics::default()
            };
            (UpdateResult::finish(u_bar, &ctx.solution.controls, diagnostics, start), Some(new_carry))
        }
        Err(e) => (fallback(ctx, e.to_string(), start), None),
    }
}

/// Full SQP solve at the measured data, warm-started from the nominal
/// solution. Returns the solution as well so callers can reuse it.
pub fn update_full_reopt<M: PlantModel>(
    ctx: &UpdateContext<M>,
    x_bar: &StateVec,
    p_bar: &ParamWindow,
) -> (UpdateResult, Option<OcpSolution>) {
    let start = Instant::now();
    let inst = match ctx.nominal.ocp.instance(x_bar.clone(), p_bar.clone()) {
        Ok(i) => i,
        Err(e) => return (fallback(ctx, e.to_string(), start), None),
    };
    match inst.solve(Some(&ctx.solution.controls)) {
        Ok(sol) => {
            let diagnostics = UpdateDiagnostics {
                iterations: sol.nlp.iterations,
                fallback: !sol.nlp.converged,
                fallback_reason: (!sol.nlp.converged)
                    .then(|| format!("not converged, best iterate with residual {:e}", sol.nlp.kkt_residual)),
                ..UpdateDiagnostics::default()
            };
            let res = UpdateResult::finish(sol.controls.clone(), &ctx.solution.controls, diagnostics, start);
            (res, Some(sol))
        }
        Err(e) => (fallback(ctx, e.to_string(), start), None),
    }
}

/// Slow-rate (and optionally fast-rate) update rule used by the closed loop.
pub trait UpdateStrategy<M: PlantModel> {
    fn kind(&self) -> StrategyKind;

    /// Whether the closed loop should attach sensitivities of the nominal
    /// solution to the context.
    fn needs_sensitivities(&self) -> bool {
        false
    }

    /// Update at the start of a control period (fast tick 0).
    fn update(&mut self, ctx: &UpdateContext<M>, x_bar: &StateVec, p_bar: &ParamWindow) -> UpdateResult;

    fn has_fast_rate(&self) -> bool {
        false
    }

    /// Update at fast tick `tick ≥ 1` of the current period from a new state
    /// measurement. `None` holds the control of the previous tick.
    fn fast_update(&mut self, _tick: usize, _x_fast: &StateVec) -> Option<UpdateResult> {
        None
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NominalUpdate;

impl<M: PlantModel> UpdateStrategy<M> for NominalUpdate {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Nominal
    }

    fn update(&mut self, ctx: &UpdateContext<M>, x_bar: &StateVec, p_bar: &ParamWindow) -> UpdateResult {
        update_nominal(ctx, x_bar, p_bar)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SensitivityUpdate;

impl<M: PlantModel> UpdateStrategy<M> for SensitivityUpdate {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Sensitivity
    }

    fn needs_sensitivities(&self) -> bool {
        true
    }

    fn update(&mut self, ctx: &UpdateContext<M>, x_bar: &StateVec, p_bar: &ParamWindow) -> UpdateResult {
        update_sensitivity(ctx, x_bar, p_bar)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RealtimeIteration {
    /// Carry after the most recent step.
    pub carry: Option<SolverCarry>,
}

impl<M: PlantModel> UpdateStrategy<M> for RealtimeIteration {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Realtime
    }

    fn update(&mut self, ctx: &UpdateContext<M>, x_bar: &StateVec, p_bar: &ParamWindow) -> UpdateResult {
        let (res, carry) = update_realtime_iteration(ctx, x_bar, p_bar);
        self.carry = carry;
        res
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FullReopt;

impl<M: PlantModel> UpdateStrategy<M> for FullReopt {
    fn kind(&self) -> StrategyKind {
        StrategyKind::FullReopt
    }

    fn update(&mut self, ctx: &UpdateContext<M>, x_bar: &StateVec, p_bar: &ParamWindow) -> UpdateResult {
        update_full_reopt(ctx, x_bar, p_bar).0
    }
}

/// Where the slow-rate (D-level) solution of the two-level scheme comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DLevelSource {
    /// The advanced-step nominal solution and its sensitivities; fast
    /// corrections are taken against the nominal prediction.
    Nominal,
    /// A full solve at the measurement at the start of every period.
    #[default]
    Reoptimize,
}

/// Two-level scheme: a D-level solution per control period and an A-level
/// first-order correction against every fast-rate state measurement, with
/// derivatives frozen at the D-level solution.
#[derive(Debug, Clone, Default)]
pub struct HierarchicalUpdate {
    pub source: DLevelSource,
    level_d: Option<DLevel>,
}

#[derive(Debug, Clone)]
struct DLevel {
    controls: Vec<ControlVec>,
    z_star: Vec<f64>,
    /// Reference state at every fast tick of the first period.
    predicted: Vec<StateVec>,
    sensitivities: Result<SensitivityData, String>,
    control_set: BoxSet,
    theta_len: usize,
}

impl HierarchicalUpdate {
    pub fn new(source: DLevelSource) -> Self {
        Self { source, level_d: None }
    }

    /// The D-level solution of the current period, if any.
    pub fn d_level_controls(&self) -> Option<&[ControlVec]> {
        self.level_d.as_ref().map(|d| d.controls.as_slice())
    }
}

/// A-level step: re-apply the stored first-order correction against a
/// fast-rate state measurement taken at `fast_tick` of the current period.
pub fn update_hierarchical(level: &HierarchicalUpdate, fast_tick: usize, x_fast: &StateVec) -> Option<UpdateResult> {
    let start = Instant::now();
    let d = level.level_d.as_ref()?;
    let predicted = d.predicted.get(fast_tick)?;
    let horizon = d.controls.len();
    let sens = match &d.sensitivities {
        Ok(s) => s,
        Err(reason) => {
            let diagnostics = UpdateDiagnostics {
                fallback: true,
                fallback_reason: Some(reason.clone()),
                ..UpdateDiagnostics::default()
            };
            return Some(UpdateResult::finish(d.controls.clone(), &d.controls, diagnostics, start));
        }
    };
    let mut delta = vec![0.0; d.theta_len];
    for (slot, (a, b)) in delta.iter_mut().zip(x_fast.iter().zip(predicted.iter())) {
        *slot = a - b;
    }
    let z = sens.predict(&d.z_star, &delta);
    let (u_bar, violation) = project(&z, &d.control_set, horizon);
    let diagnostics = UpdateDiagnostics {
        projection_violation: violation,
        ..UpdateDiagnostics::default()
    };
    Some(UpdateResult::finish(u_bar, &d.controls, diagnostics, start))
}

/// State at every fast tick of the first period under the first move of `controls`.
fn fast_prediction<M: PlantModel>(inst: &OcpInstance<M>, controls: &[ControlVec]) -> Result<Vec<StateVec>, String> {
    let model = &inst.ocp.model;
    let mut predicted = vec![inst.x0.clone()];
    for tick in 0..model.ticks_per_period() {
        let last = predicted.last().expect("non-empty");
        let out = model
            .advance(last.as_slice(), controls[0].as_slice(), &inst.signal, tick, 1)
            .map_err(|e| e.to_string())?;
        predicted.push(StateVec::new(out.state).map_err(|e| e.to_string())?);
    }
    Ok(predicted)
}

impl<M: PlantModel> UpdateStrategy<M> for HierarchicalUpdate {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Hierarchical
    }

    fn needs_sensitivities(&self) -> bool {
        self.source == DLevelSource::Nominal
    }

    fn has_fast_rate(&self) -> bool {
        true
    }

    fn update(&mut self, ctx: &UpdateContext<M>, x_bar: &StateVec, p_bar: &ParamWindow) -> UpdateResult {
        let start = Instant::now();
        self.level_d = None;
        let ocp = ctx.nominal.ocp;
        match self.source {
            DLevelSource::Nominal => {
                let res = update_sensitivity(ctx, x_bar, p_bar);
                let predicted = match fast_prediction(ctx.nominal, &ctx.solution.controls) {
                    Ok(p) => p,
                    Err(e) => return fallback(ctx, e, start),
                };
                self.level_d = Some(DLevel {
                    controls: ctx.solution.controls.clone(),
                    z_star: ctx.solution.nlp.z_star.clone(),
                    predicted,
                    sensitivities: match ctx.sensitivities {
                        Some(s) => Ok(s.clone()),
                        None => Err(ctx
                            .sensitivity_error
                            .clone()
                            .unwrap_or_else(|| "no sensitivities in context".into())),
                    },
                    control_set: ocp.control_set.clone(),
                    theta_len: ctx.nominal.theta().len(),
                });
                res
            }
            DLevelSource::Reoptimize => {
                let (res, sol) = update_full_reopt(ctx, x_bar, p_bar);
                let Some(sol) = sol else {
                    return res;
                };
                let inst = match ocp.instance(x_bar.clone(), p_bar.clone()) {
                    Ok(i) => i,
                    Err(e) => return fallback(ctx, e.to_string(), start),
                };
                let theta = inst.theta();
                let sensitivities = extract_sensitivities(&inst.as_nlp(), &sol.nlp, &theta).map_err(|e| e.to_string());
                let predicted = match fast_prediction(&inst, &sol.controls) {
                    Ok(p) => p,
                    Err(e) => return fallback(ctx, e, start),
                };
                self.level_d = Some(DLevel {
                    z_star: flatten(&sol.controls),
                    controls: sol.controls,
                    predicted,
                    sensitivities,
                    control_set: ocp.control_set.clone(),
                    theta_len: theta.len(),
                });
                res
            }
        }
    }

    fn fast_update(&mut self, tick: usize, x_fast: &StateVec) -> Option<UpdateResult> {
        update_hierarchical(self, tick, x_fast)
    }
}

//! Empirical stability checks on closed-loop records: the relaxed Lyapunov
//! decrease and its suboptimality degree, affine deviation bounds, the
//! practical-stability margin and the modified closed-loop cost.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{run_closed_loop, ClosedLoopConfig, ClosedLoopRecord};
use crate::ocp::OcpError;
use crate::sim::{DisturbanceSpec, ParamWindow, PlantModel};
use crate::types::euclid;
use crate::updates::StrategyKind;

/// Stage costs at or below this are treated as zero.
pub const STAGE_COST_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MonitorError {
    #[error("suboptimality degree must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("constants must be nonnegative: {0}")]
    NegativeConstant(String),
    #[error("{0}")]
    Input(String),
}

/// One step of the decrease check: `V(n)`, the successor value and `ℓ(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecreaseSample {
    pub value: f64,
    pub successor: f64,
    pub stage_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    /// `None` when every stage cost vanishes (a run resting at equilibrium),
    /// or when no step has a positive quotient.
    pub alpha: Option<f64>,
    /// Steps whose decrease quotient is not positive.
    pub violations: Vec<usize>,
    /// `(V(n) − V⁺(n)) / ℓ(n)` per step, `None` where `ℓ(n)` vanishes.
    pub quotients: Vec<Option<f64>>,
}

impl AlphaEstimate {
    pub fn applicable(&self) -> bool {
        self.quotients.iter().any(Option::is_some)
    }
}

pub fn alpha_from_samples(samples: &[DecreaseSample]) -> AlphaEstimate {
    let quotients: Vec<Option<f64>> = samples
        .iter()
        .map(|s| (s.stage_cost > STAGE_COST_FLOOR).then(|| (s.value - s.successor) / s.stage_cost))
        .collect();
    let violations = quotients
        .iter()
        .enumerate()
        .filter_map(|(n, q)| q.filter(|q| *q <= 0.0).map(|_| n))
        .collect();
    let alpha = quotients.iter().flatten().filter(|q| **q > 0.0).copied().reduce(f64::min);
    AlphaEstimate {
        alpha,
        violations,
        quotients,
    }
}

/// Estimates the suboptimality degree along `record`. `successor(n)` must
/// return `V_N(x(n+1), p_n)`: the value of the successor state on the window
/// of step `n`.
pub fn estimate_alpha<E>(
    record: &ClosedLoopRecord,
    mut successor: impl FnMut(usize) -> Result<f64, E>,
) -> Result<AlphaEstimate, E> {
    let mut samples = Vec::with_capacity(record.steps.len());
    for (n, step) in record.steps.iter().enumerate() {
        samples.push(DecreaseSample {
            value: step.value.unwrap_or(step.nominal_value),
            successor: successor(n)?,
            stage_cost: step.stage_cost,
        });
    }
    Ok(alpha_from_samples(&samples))
}

/// Undisturbed nominal run of the same configuration, with values recorded.
pub fn nominal_companion<M: PlantModel + Clone>(config: &ClosedLoopConfig<M>) -> Result<ClosedLoopRecord, OcpError> {
    let mut companion = config.clone();
    companion.strategy = StrategyKind::Nominal;
    companion.disturbance = DisturbanceSpec {
        seed: config.disturbance.seed,
        ..DisturbanceSpec::none()
    };
    companion.record_values = true;
    run_closed_loop(&companion)
}

/// `V_N(x(n+1), p_n)` for every step of an undisturbed run: the successor
/// state solved on the window that produced it.
pub fn successor_values<M: PlantModel>(config: &ClosedLoopConfig<M>, record: &ClosedLoopRecord) -> Result<Vec<f64>, OcpError> {
    if !config.disturbance.is_zero() {
        return Err(OcpError::Invalid("successor values need an undisturbed run".into()));
    }
    let ocp = &config.ocp;
    let ticks = ocp.model.ticks_per_period();
    let mut out = Vec::with_capacity(record.steps.len());
    for (n, step) in record.steps.iter().enumerate() {
        let next = match record.steps.get(n + 1) {
            Some(s) => s.x_bar.clone(),
            None => record
                .final_state
                .clone()
                .ok_or_else(|| OcpError::Invalid("record has no final state".into()))?,
        };
        let window = ParamWindow::from_scalars(
            config.road.sample_period,
            &config.road.window_padded(n * ticks, ocp.window_len()),
        )?;
        let inst = ocp.instance(next, window)?;
        out.push(inst.solve(Some(&step.nominal_controls))?.value);
    }
    Ok(out)
}

/// Smallest `(L, J)`, `J ≥ 0`, with `L·s + J ≥ Δ` for every `(s, Δ)`,
/// minimizing `L + J / mean(s)`.
pub fn fit_affine_bounds(pairs: &[(f64, f64)]) -> Result<(f64, f64), MonitorError> {
    if pairs.is_empty() {
        return Err(MonitorError::Input("no observations to fit".into()));
    }
    if pairs.iter().any(|(s, d)| !s.is_finite() || !d.is_finite() || *s < 0.0) {
        return Err(MonitorError::Input("observations must be finite with nonnegative deviation".into()));
    }
    let top = pairs.iter().map(|p| p.1).fold(0.0_f64, f64::max);
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    if mean == 0.0 {
        return Ok((0.0, top));
    }
    let weight = 1.0 / mean;
    let need_j = |l: f64| pairs.iter().map(|(s, d)| d - l * s).fold(0.0_f64, f64::max);

    // The objective is convex and piecewise linear in L; its kinks are the
    // slopes between consecutive vertices of the upper hull of the points,
    // plus the L at which J reaches zero.
    let mut pts: Vec<(f64, f64)> = pairs.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while let Some(&last) = hull.last() {
            if last.0 == p.0 {
                hull.pop();
                continue;
            }
            if hull.len() >= 2 {
                let a = hull[hull.len() - 2];
                let cross = (last.0 - a.0) * (p.1 - a.1) - (last.1 - a.1) * (p.0 - a.0);
                if cross >= 0.0 {
                    hull.pop();
                    continue;
                }
            }
            break;
        }
        hull.push(p);
    }
    let mut candidates = vec![0.0];
    candidates.extend(hull.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).filter(|l| *l > 0.0));
    if pairs.iter().all(|(s, d)| *s > 0.0 || *d <= 0.0) {
        let zero_j = pairs.iter().filter(|p| p.0 > 0.0).map(|(s, d)| d / s).fold(0.0_f64, f64::max);
        candidates.push(zero_j);
    }
    let (mut l, mut j) = (0.0, top);
    let mut best = f64::INFINITY;
    for cand in candidates {
        let cj = need_j(cand);
        let obj = cand + weight * cj;
        if best.is_infinite() || obj < best - 1e-15 * best.abs().max(1.0) {
            best = obj;
            l = cand;
            j = cj;
        }
    }
    // Round J up until every observation is dominated in floating point.
    for (s, d) in pairs {
        if l * s + j < *d {
            j += d - (l * s + j);
            while l * s + j < *d {
                j = next_up(j);
            }
        }
    }
    Ok((l, j))
}

fn next_up(v: f64) -> f64 {
    if v == 0.0 {
        f64::from_bits(1)
    } else if v > 0.0 {
        f64::from_bits(v.to_bits() + 1)
    } else {
        f64::from_bits(v.to_bits() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineConstants {
    pub l_stage: f64,
    pub j_stage: f64,
    pub l_value: f64,
    pub j_value: f64,
}

/// Smallest admissible margin `ε` for the given bound constants, disturbance
/// sizes and suboptimality degree.
pub fn compute_epsilon(c: &AffineConstants, delta_x: f64, delta_p: f64, alpha: f64) -> Result<f64, MonitorError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MonitorError::InvalidAlpha(alpha));
    }
    for (name, v) in [
        ("L_stage", c.l_stage),
        ("J_stage", c.j_stage),
        ("L_value", c.l_value),
        ("J_value", c.j_value),
        ("delta_x", delta_x),
        ("delta_p", delta_p),
    ] {
        if !(v >= 0.0) {
            return Err(MonitorError::NegativeConstant(format!("{name} = {v}")));
        }
    }
    Ok(c.l_stage * (delta_x + delta_p) + c.j_stage + (c.l_value * (2.0 * delta_x + 3.0 * delta_p) + 2.0 * c.j_value) / alpha)
}

/// Deviation/difference observations from a disturbed run: deviation sum
/// `‖x̄(n) − x(n)‖ + ‖p̄_n − p_n‖max` against the stage-cost and value gaps.
pub fn deviation_pairs(record: &ClosedLoopRecord) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut stage = Vec::new();
    let mut value = Vec::new();
    for step in &record.steps {
        let s = euclid(step.x_bar.as_slice(), step.x_pred.as_slice()) + step.road_error;
        stage.push((s, (step.stage_cost - step.nominal_stage_cost).abs()));
        if let Some(v) = step.value {
            value.push((s, (v - step.nominal_value).abs()));
        }
    }
    (stage, value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModifiedCost {
    pub modified_cost: f64,
    pub sigma: f64,
    /// `α·V̄ / (V(0) − σ)`.
    pub bound_ratio: f64,
    pub bound_violated: bool,
}

/// Modified cost on plain sequences. `values[n]` is `V_N(x̄(n), p̄_n)`; a
/// step is inside the practical set when its stage cost is at most
/// `threshold` (`None`: the set is empty).
pub fn modified_cost_from_values(
    values: &[f64],
    stage_costs: &[f64],
    epsilon: f64,
    threshold: Option<f64>,
    alpha: f64,
) -> Result<ModifiedCost, MonitorError> {
    if values.is_empty() {
        return Err(MonitorError::Input("no values recorded".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(MonitorError::NegativeConstant(format!("epsilon = {epsilon}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MonitorError::InvalidAlpha(alpha));
    }
    let inside = |l: f64| threshold.is_some_and(|t| l <= t);
    let modified_cost: f64 = stage_costs
        .iter()
        .filter(|l| !inside(**l))
        .map(|l| (l - epsilon).max(0.0))
        .fold(0.0, |a, b| a + b);
    let entry = stage_costs.iter().position(|l| inside(*l));
    let sigma = match entry {
        Some(k) => values[k.min(values.len() - 1)..].iter().copied().fold(f64::INFINITY, f64::min),
        None if values.len() > 1 => values[1..].iter().copied().fold(f64::INFINITY, f64::min),
        None => values[0],
    };
    let lhs = alpha * modified_cost;
    let rhs = values[0] - sigma;
    let bound_ratio = if lhs == 0.0 {
        0.0
    } else if rhs > 0.0 {
        lhs / rhs
    } else {
        f64::INFINITY
    };
    Ok(ModifiedCost {
        modified_cost,
        sigma,
        bound_ratio,
        bound_violated: bound_ratio > 1.0 + 1e-9,
    })
}

/// Modified cost of a run whose values were recorded.
pub fn modified_closed_loop_cost(
    record: &ClosedLoopRecord,
    epsilon: f64,
    threshold: Option<f64>,
    alpha: f64,
) -> Result<ModifiedCost, MonitorError> {
    let values = record
        .steps
        .iter()
        .map(|s| s.value.ok_or_else(|| MonitorError::Input(format!("step {} has no recorded value", s.n))))
        .collect::<Result<Vec<_>, _>>()?;
    let costs: Vec<f64> = record.steps.iter().map(|s| s.stage_cost).collect();
    modified_cost_from_values(&values, &costs, epsilon, threshold, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub alpha_estimate: Option<f64>,
    pub lyapunov_violations: Vec<usize>,
    pub constants: Option<AffineConstants>,
    pub epsilon_bound: Option<f64>,
    /// Stage-cost level defining the practical set (equal to `ε`).
    pub practical_threshold: Option<f64>,
    pub sigma_estimate: Option<f64>,
    pub modified_cost: Option<f64>,
    pub bound_ratio: Option<f64>,
    pub bound_violated: bool,
    /// Why parts of the report are missing.
    pub notes: Vec<String>,
}

impl StabilityReport {
    /// Assembles the report from the nominal companion's decrease check and
    /// a disturbed run with recorded values.
    pub fn build(alpha: &AlphaEstimate, disturbed: &ClosedLoopRecord, delta_x: f64, delta_p: f64) -> Self {
        let mut report = StabilityReport {
            alpha_estimate: alpha.alpha,
            lyapunov_violations: alpha.violations.clone(),
            constants: None,
            epsilon_bound: None,
            practical_threshold: None,
            sigma_estimate: None,
            modified_cost: None,
            bound_ratio: None,
            bound_violated: false,
            notes: Vec::new(),
        };
        if !alpha.applicable() {
            report.notes.push("suboptimality degree not applicable: stage costs vanish".into());
        }
        let (stage, value) = deviation_pairs(disturbed);
        match (fit_affine_bounds(&stage), fit_affine_bounds(&value)) {
            (Ok((l_stage, j_stage)), Ok((l_value, j_value))) => {
                report.constants = Some(AffineConstants {
                    l_stage,
                    j_stage,
                    l_value,
                    j_value,
                })
            }
            (Err(e), _) | (_, Err(e)) => report.notes.push(format!("constant fit: {e}")),
        }
        let (Some(a), Some(c)) = (alpha.alpha.map(|a| a.min(1.0)), report.constants) else {
            return report;
        };
        let eps = match compute_epsilon(&c, delta_x, delta_p, a) {
            Ok(e) => e,
            Err(e) => {
                report.notes.push(format!("epsilon: {e}"));
                return report;
            }
        };
        report.epsilon_bound = Some(eps);
        report.practical_threshold = Some(eps);
        match modified_closed_loop_cost(disturbed, eps, Some(eps), a) {
            Ok(m) => {
                report.sigma_estimate = Some(m.sigma);
                report.modified_cost = Some(m.modified_cost);
                report.bound_ratio = Some(m.bound_ratio);
                report.bound_violated = m.bound_violated;
            }
            Err(e) => report.notes.push(format!("modified cost: {e}")),
        }
        report
    }

    /// `key = value` lines; missing quantities print as `n/a`.
    pub fn to_key_value(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:e}"));
        let mut out = String::new();
        let _ = writeln!(out, "alpha_estimate = {}", opt(self.alpha_estimate));
        let _ = writeln!(
            out,
            "lyapunov_violations = [{}]",
            self.lyapunov_violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
        );
        let c = self.constants;
        let _ = writeln!(out, "l_stage = {}", opt(c.map(|c| c.l_stage)));
        let _ = writeln!(out, "j_stage = {}", opt(c.map(|c| c.j_stage)));
        let _ = writeln!(out, "l_value = {}", opt(c.map(|c| c.l_value)));
        let _ = writeln!(out, "j_value = {}", opt(c.map(|c| c.j_value)));
        let _ = writeln!(out, "epsilon_bound = {}", opt(self.epsilon_bound));
        let _ = writeln!(out, "practical_threshold = {}", opt(self.practical_threshold));
        let _ = writeln!(out, "sigma_estimate = {}", opt(self.sigma_estimate));
        let _ = writeln!(out, "modified_cost = {}", opt(self.modified_cost));
        let _ = writeln!(out, "bound_ratio = {}", opt(self.bound_ratio));
        let _ = writeln!(out, "bound_violated = {}", self.bound_violated);
        for note in &self.notes {
            let _ = writeln!(out, "note = {note}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(values: &[f64], costs: &[f64]) -> Vec<DecreaseSample> {
        costs
            .iter()
            .enumerate()
            .map(|(n, l)| DecreaseSample {
                value: values[n],
                successor: values[n + 1],
                stage_cost: *l,
            })
            .collect()
    }

    #[test]
    fn planted_alpha() {
        let est = alpha_from_samples(&samples(&[10.0, 7.0, 5.0], &[4.0, 4.0]));
        assert_eq!(est.alpha, Some(0.5));
        assert!(est.violations.is_empty());
    }

    #[test]
    fn equilibrium_alpha_not_applicable() {
        let est = alpha_from_samples(&samples(&[0.0; 4], &[0.0; 3]));
        assert!(!est.applicable());
        assert_eq!(est.alpha, None);
    }

    #[test]
    fn increases_are_violations() {
        let est = alpha_from_samples(&samples(&[10.0, 11.0, 5.0], &[4.0, 4.0]));
        assert_eq!(est.violations, vec![0]);
        assert_eq!(est.alpha, Some(1.5));
    }

    #[test]
    fn affine_fit_examples() {
        assert_eq!(fit_affine_bounds(&[(1.0, 3.0), (2.0, 4.0)]).unwrap(), (1.0, 2.0));
        let line: Vec<(f64, f64)> = (1..6).map(|k| (k as f64, 2.0 * k as f64)).collect();
        assert_eq!(fit_affine_bounds(&line).unwrap(), (2.0, 0.0));
        assert_eq!(fit_affine_bounds(&[(0.0, 0.7)]).unwrap(), (0.0, 0.7));
        assert_eq!(fit_affine_bounds(&[(0.0, 0.2), (0.0, 0.5)]).unwrap(), (0.0, 0.5));
    }

    #[test]
    fn epsilon_examples() {
        let zero = AffineConstants {
            l_stage: 0.0,
            j_stage: 0.0,
            l_value: 0.0,
            j_value: 0.0,
        };
        assert_eq!(compute_epsilon(&zero, 0.005, 0.005, 0.5).unwrap(), 0.0);
        let c = AffineConstants {
            l_stage: 1.0,
            l_value: 1.0,
            ..zero
        };
        let e = compute_epsilon(&c, 0.005, 0.005, 0.5).unwrap();
        assert!((e - 0.06).abs() < 1e-15);
        let e2 = compute_epsilon(&c, 0.01, 0.01, 0.5).unwrap();
        assert!((e2 - 2.0 * e).abs() < 1e-15);
        assert_eq!(compute_epsilon(&c, 0.005, 0.005, 0.0), Err(MonitorError::InvalidAlpha(0.0)));
        assert!(compute_epsilon(&c, 0.005, 0.005, -0.1).is_err());
    }

    #[test]
    fn planted_modified_cost() {
        let m = modified_cost_from_values(&[10.0, 7.0, 5.0], &[4.0, 4.0], 1.0, None, 0.5).unwrap();
        assert_eq!(m.modified_cost, 6.0);
        assert_eq!(m.sigma, 5.0);
        assert_eq!(m.bound_ratio, 0.6);
        assert!(!m.bound_violated);
    }

    #[test]
    fn large_epsilon_zeroes_modified_cost() {
        let m = modified_cost_from_values(&[10.0, 7.0, 5.0], &[4.0, 4.0], 5.0, None, 0.5).unwrap();
        assert_eq!(m.modified_cost, 0.0);
        assert_eq!(m.bound_ratio, 0.0);
    }

    #[test]
    fn telescoping_bound_holds_on_decreasing_values() {
        // V(n) − V(n+1) ≥ α ℓ(n) at every step implies the bound with ε = 0.
        let values = [20.0, 14.0, 9.0, 6.0, 4.5];
        let costs = [8.0, 7.0, 5.0, 3.0];
        let est = alpha_from_samples(&samples(&values, &costs));
        let a = est.alpha.unwrap();
        let m = modified_cost_from_values(&values, &costs, 0.0, None, a).unwrap();
        assert!(m.bound_ratio <= 1.0 + 1e-12, "{}", m.bound_ratio);
    }

    #[test]
    fn report_text_forms() {
        let est = alpha_from_samples(&samples(&[10.0, 7.0, 5.0], &[4.0, 4.0]));
        let record = ClosedLoopRecord {
            strategy: StrategyKind::Nominal,
            steps: Vec::new(),
            final_state: None,
            failure: None,
        };
        let report = StabilityReport::build(&est, &record, 0.005, 0.005);
        let kv = report.to_key_value();
        assert!(kv.contains("alpha_estimate = 5e-1"));
        assert!(kv.contains("epsilon_bound = n/a"));
        let back: StabilityReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}

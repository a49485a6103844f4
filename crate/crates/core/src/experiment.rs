//! Strategy × seed sweeps over a scenario, with per-run step tables and a
//! summary of costs, reductions and stability diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::monitor::{estimate_alpha, nominal_companion, successor_values, AlphaEstimate, StabilityReport};
use crate::mpc::{run_closed_loop, ClosedLoopRecord};
use crate::scenario::{RoadSource, ScenarioError, ScenarioFile};
use crate::updates::StrategyKind;

pub const CSV_HEADER: &str = "n,t,x_w,dx_w,x_c,dx_c,u_applied,stage_cost,V_N,update_norm,fallback";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub csv: String,
    pub closed_loop_cost: f64,
    pub steps_completed: usize,
    pub failure: Option<String>,
    pub fallbacks: usize,
    /// `100·(cost_nominal − cost)/cost_nominal` against the nominal run of
    /// the same seed.
    pub reduction_percent: Option<f64>,
    pub stability: Option<StabilityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub median_reduction_percent: Option<f64>,
    /// Seeds with a strictly positive reduction.
    pub positive_seeds: usize,
    pub seeds: usize,
    /// One-sided sign-test p-value for "reduction > 0".
    pub sign_test_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub road: String,
    pub scenario: ScenarioFile,
    pub nominal_alpha: Option<AlphaEstimate>,
    pub runs: Vec<RunSummary>,
    pub strategies: BTreeMap<String, StrategySummary>,
}

impl ExperimentSummary {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }
}

pub struct Experiment {
    pub records: Vec<(StrategyKind, u64, ClosedLoopRecord)>,
    pub summary: ExperimentSummary,
}

impl Experiment {
    pub fn record(&self, strategy: StrategyKind, seed: u64) -> Option<&ClosedLoopRecord> {
        self.records.iter().find(|(k, s, _)| *k == strategy && *s == seed).map(|(_, _, r)| r)
    }
}

pub fn csv_name(strategy: StrategyKind, seed: u64) -> String {
    format!("{}_seed{seed}.csv", strategy.name())
}

/// Per-step table of a run. Floats use the shortest round-trip form.
pub fn step_csv(record: &ClosedLoopRecord) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in &record.steps {
        let x = s.x_bar.as_slice();
        let value = s.value.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.n,
            s.t,
            x[0],
            x[1],
            x[2],
            x[3],
            s.control[0],
            s.stage_cost,
            value,
            s.update.update_norm,
            u8::from(s.update.fallback)
        );
    }
    out
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut term = 0.5_f64.powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += term;
        }
        term *= (n - i) as f64 / (i + 1) as f64;
    }
    tail.min(1.0)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Runs every (strategy, seed) pair of the scenario. Runs are independent
/// and spread over `workers` threads; results do not depend on the count.
pub fn run_grid(scenario: &ScenarioFile, workers: usize) -> Result<Experiment, ScenarioError> {
    scenario.validate()?;
    let road = scenario.load_road()?;
    let jobs: Vec<(StrategyKind, u64)> = scenario
        .seeds
        .iter()
        .flat_map(|seed| scenario.strategies.iter().map(move |k| (*k, *seed)))
        .collect();
    let configs = jobs
        .iter()
        .map(|(k, seed)| scenario.closed_loop(*k, *seed, &road))
        .collect::<Result<Vec<_>, _>>()?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ClosedLoopRecord, String>>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let out = run_closed_loop(&configs[i]).map_err(|e| e.to_string());
                results.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });
    let results = results.into_inner().expect("no poisoned workers");

    let nominal_alpha = if scenario.record_values {
        let cfg = scenario.closed_loop(StrategyKind::Nominal, scenario.seeds[0], &road)?;
        let companion = nominal_companion(&cfg)?;
        let mut undisturbed = cfg.clone();
        undisturbed.disturbance = crate::sim::DisturbanceSpec {
            seed: cfg.disturbance.seed,
            ..crate::sim::DisturbanceSpec::none()
        };
        let succ = successor_values(&undisturbed, &companion)?;
        Some(estimate_alpha(&companion, |n| Ok::<f64, ScenarioError>(succ[n]))?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(jobs.len());
    let mut runs = Vec::with_capacity(jobs.len());
    for ((kind, seed), res) in jobs.iter().zip(results) {
        let record = match res.expect("every job ran") {
            Ok(r) => r,
            Err(e) => ClosedLoopRecord {
                strategy: *kind,
                steps: Vec::new(),
                final_state: None,
                failure: Some(e),
            },
        };
        let stability = nominal_alpha
            .as_ref()
            .filter(|_| record.failure.is_none() && !record.steps.is_empty())
            .map(|a| StabilityReport::build(a, &record, scenario.delta_x, scenario.delta_p));
        runs.push(RunSummary {
            strategy: *kind,
            seed: *seed,
            csv: csv_name(*kind, *seed),
            closed_loop_cost: record.closed_loop_cost(),
            steps_completed: record.steps.len(),
            failure: record.failure.clone(),
            fallbacks: record.steps.iter().filter(|s| s.update.fallback).count(),
            reduction_percent: None,
            stability,
        });
        records.push((*kind, *seed, record));
    }

    let nominal_cost: BTreeMap<u64, f64> = runs
        .iter()
        .filter(|r| r.strategy == StrategyKind::Nominal && r.failure.is_none())
        .map(|r| (r.seed, r.closed_loop_cost))
        .collect();
    for r in &mut runs {
        if r.failure.is_none() {
            if let Some(c) = nominal_cost.get(&r.seed).filter(|c| **c > 0.0) {
                r.reduction_percent = Some(100.0 * (c - r.closed_loop_cost) / c);
            }
        }
    }
    let mut strategies = BTreeMap::new();
    for kind in &scenario.strategies {
        let red: Vec<f64> = runs.iter().filter(|r| r.strategy == *kind).filter_map(|r| r.reduction_percent).collect();
        let positive = red.iter().filter(|v| **v > 0.0).count();
        strategies.insert(
            kind.name().to_string(),
            StrategySummary {
                median_reduction_percent: median(&red),
                positive_seeds: positive,
                seeds: red.len(),
                sign_test_p: (!red.is_empty()).then(|| sign_test_p(positive, red.len())),
            },
        );
    }

    let road_note = match scenario.road_source()? {
        RoadSource::Reference => "synthetic reference track (an invented stand-in, not a measured road)".to_string(),
        RoadSource::File(p) => format!("road profile file {}", p.display()),
        RoadSource::Track(p) => format!("synthetic track {}", p.display()),
    };
    Ok(Experiment {
        records,
        summary: ExperimentSummary {
            road: road_note,
            scenario: scenario.effective()?,
            nominal_alpha,
            runs,
            strategies,
        },
    })
}

/// Runs the grid and writes one step table per run, the road samples and
/// `summary.json` into `out_dir`.
pub fn run_experiment(scenario: &ScenarioFile, out_dir: &Path, workers: usize) -> Result<ExperimentSummary, ScenarioError> {
    let exp = run_grid(scenario, workers)?;
    let io = |e: std::io::Error| ScenarioError::Io(format!("{}: {e}", out_dir.display()));
    std::fs::create_dir_all(out_dir).map_err(io)?;
    for (kind, seed, record) in &exp.records {
        std::fs::write(out_dir.join(csv_name(*kind, *seed)), step_csv(record)).map_err(io)?;
    }
    let road = scenario.load_road()?;
    let mut road_csv = String::from("t,height\n");
    for (j, h) in road.samples.iter().enumerate() {
        let _ = writeln!(road_csv, "{},{h}", road.t0 + j as f64 * road.sample_period);
    }
    std::fs::write(out_dir.join("road.csv"), road_csv).map_err(io)?;
    let json = serde_json::to_string_pretty(&exp.summary).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    std::fs::write(out_dir.join("summary.json"), json + "\n").map_err(io)?;
    Ok(exp.summary)
}

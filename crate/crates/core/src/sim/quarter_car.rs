//! Quarter-car suspension with a semi-active chassis damper.
//!
//! State `(x_w, ẋ_w, x_c, ẋ_c)` in metres and m/s, shifted so the equilibrium
//! on a flat road is the origin. The control is the damper coefficient in
//! kN·s/m; everything else is SI internally.

use serde::{Deserialize, Serialize};

use super::road::FftInterpolant;
use super::{Advance, ParamWindow, PlantModel, SimError};
use crate::integrate::{self, OdeProblem, C2, C3, C4, C5};

/// Physical parameters in SI units (kg, N/m, N·s/m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuarterCarParams {
    pub m_w: f64,
    pub m_c: f64,
    pub c_w: f64,
    pub d_w: f64,
    pub c_c: f64,
}

impl QuarterCarParams {
    pub fn new(m_w: f64, m_c: f64, c_w: f64, d_w: f64, c_c: f64) -> Result<Self, SimError> {
        let p = Self { m_w, m_c, c_w, d_w, c_c };
        p.validate()?;
        Ok(p)
    }

    /// Values given with stiffness in kN/m and damping in kN·s/m.
    pub fn from_kilo_units(m_w: f64, m_c: f64, c_w_kn: f64, d_w_kns: f64, c_c_kn: f64) -> Result<Self, SimError> {
        Self::new(m_w, m_c, c_w_kn * 1e3, d_w_kns * 1e3, c_c_kn * 1e3)
    }

    /// Test-bench values: m_w = 35 kg, m_c = 325 kg, c_w = 0.2 kN/m,
    /// d_w = 150 kN·s/m, c_c = 20 kN/m.
    pub fn reference() -> Self {
        Self {
            m_w: 35.0,
            m_c: 325.0,
            c_w: 200.0,
            d_w: 150_000.0,
            c_c: 20_000.0,
        }
    }

    /// Exchanges the numeric values of the tyre stiffness and tyre damping.
    pub fn with_wheel_values_swapped(self) -> Self {
        Self {
            c_w: self.d_w,
            d_w: self.c_w,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let all = [self.m_w, self.m_c, self.c_w, self.d_w, self.c_c];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(SimError::InvalidModel(format!("quarter-car parameters must be positive: {self:?}")))
        }
    }
}

/// Time derivative of the quarter-car state.
///
/// `u` in kN·s/m, road height `p` in m and its rate `p_dot` in m/s.
pub fn quarter_car_rhs(x: &[f64; 4], u: f64, p: f64, p_dot: f64, params: &QuarterCarParams) -> [f64; 4] {
    let [xw, vw, xc, vc] = *x;
    let damping = u * 1e3;
    let suspension = params.c_c * (xc - xw) + damping * (vc - vw);
    let tyre = params.c_w * (xw - p) + params.d_w * (vw - p_dot);
    [vw, (suspension - tyre) / params.m_w, vc, -suspension / params.m_c]
}

/// Chassis jerk for a control held constant over the interval.
pub fn chassis_jerk(x: &[f64; 4], dx: &[f64; 4], u: f64, params: &QuarterCarParams) -> f64 {
    let damping = u * 1e3;
    (-params.c_c * (x[3] - x[1]) - damping * (dx[3] - dx[1])) / params.m_c
}

/// Deviation of the tyre force from equilibrium.
pub fn tyre_force(x: &[f64; 4], p: f64, p_dot: f64, params: &QuarterCarParams) -> f64 {
    params.c_w * (x[0] - p) + params.d_w * (x[1] - p_dot)
}

/// Mechanical energy relative to the flat-road equilibrium.
pub fn mechanical_energy(x: &[f64; 4], params: &QuarterCarParams) -> f64 {
    let [xw, vw, xc, vc] = *x;
    0.5 * params.m_w * vw * vw
        + 0.5 * params.m_c * vc * vc
        + 0.5 * params.c_c * (xc - xw).powi(2)
        + 0.5 * params.c_w * xw * xw
}

/// Weights of the comfort (jerk) and safety (tyre force) integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub comfort: f64,
    pub safety: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            comfort: 10.0,
            safety: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Integration {
    /// Dormand–Prince on a fixed grid of `substeps` steps per parameter sample.
    FixedGrid { substeps: usize },
    Adaptive { rel_tol: f64, abs_tol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarterCar {
    pub params: QuarterCarParams,
    pub weights: CostWeights,
    /// Control period T_u (s).
    pub control_period: f64,
    /// Road sample period T_p (s).
    pub sample_period: f64,
    pub integration: Integration,
    /// Highest retained harmonic of the road interpolant.
    pub fft_cutoff: Option<usize>,
}

impl QuarterCar {
    pub fn new(params: QuarterCarParams, control_period: f64, sample_period: f64) -> Result<Self, SimError> {
        params.validate()?;
        let ratio = control_period / sample_period;
        if !(sample_period > 0.0) || !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(SimError::InvalidModel(format!(
                "control period {control_period} must be a positive integer multiple of the sample period {sample_period}"
            )));
        }
        Ok(Self {
            params,
            weights: CostWeights::default(),
            control_period,
            sample_period,
            integration: Integration::FixedGrid { substeps: 8 },
            fft_cutoff: None,
        })
    }

    /// Reference configuration: T_u = 0.1 s, T_p = 0.002 s, μ = (10, 1).
    pub fn reference() -> Self {
        Self::new(QuarterCarParams::reference(), 0.1, 0.002).expect("valid reference model")
    }

    pub fn with_weights(mut self, weights: CostWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_integration(mut self, integration: Integration) -> Self {
        self.integration = integration;
        self
    }

    pub fn with_cutoff(mut self, cutoff: Option<usize>) -> Self {
        self.fft_cutoff = cutoff;
        self
    }

    fn substep(&self) -> Option<(usize, f64)> {
        match self.integration {
            Integration::FixedGrid { substeps } => Some((substeps, self.sample_period / substeps as f64)),
            Integration::Adaptive { .. } => None,
        }
    }

    /// Right-hand side of the state augmented with the two cost integrands.
    fn augmented_rhs(&self, y: &[f64], u: f64, p: f64, p_dot: f64, dy: &mut [f64]) {
        let x = [y[0], y[1], y[2], y[3]];
        let dx = quarter_car_rhs(&x, u, p, p_dot, &self.params);
        let jerk = chassis_jerk(&x, &dx, u, &self.params);
        let force = tyre_force(&x, p, p_dot, &self.params);
        dy[..4].copy_from_slice(&dx);
        dy[4] = jerk * jerk;
        dy[5] = force * force;
    }
}

/// Road interpolant of one horizon window with its values cached on the
/// integration grid.
#[derive(Debug, Clone)]
pub struct RoadSignal {
    interp: FftInterpolant,
    grid: Option<StageTable>,
}

impl RoadSignal {
    pub fn interpolant(&self) -> &FftInterpolant {
        &self.interp
    }

    #[inline]
    fn at(&self, t: f64) -> (f64, f64) {
        if let Some(v) = self.grid.as_ref().and_then(|g| g.lookup(t)) {
            return v;
        }
        let v = self.interp.value(t);
        (v.p, v.p_dot)
    }
}

/// `(p, ṗ)` at every Dormand–Prince stage time of a fixed grid with step `h`.
#[derive(Debug, Clone)]
struct StageTable {
    h: f64,
    values: Vec<(f64, f64)>,
}

/// Stage offsets expressed in units of h/90.
const STAGE_UNITS: [i64; 5] = [0, 18, 27, 72, 80];

impl StageTable {
    fn build(interp: &FftInterpolant, h: f64, steps: usize) -> Self {
        let offsets = [0.0, C2, C3, C4, C5];
        let mut values = Vec::with_capacity(steps * 5 + 1);
        for k in 0..steps {
            for c in offsets {
                let v = interp.value((k as f64 + c) * h);
                values.push((v.p, v.p_dot));
            }
        }
        let v = interp.value(steps as f64 * h);
        values.push((v.p, v.p_dot));
        Self { h, values }
    }

    #[inline]
    fn lookup(&self, t: f64) -> Option<(f64, f64)> {
        let q = (t / self.h * 90.0).round() as i64;
        if q < 0 {
            return None;
        }
        let (step, rem) = (q / 90, q % 90);
        let stage = STAGE_UNITS.iter().position(|&s| s == rem)?;
        self.values.get(step as usize * 5 + stage).copied()
    }
}

impl PlantModel for QuarterCar {
    type Signal = RoadSignal;

    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn control_period(&self) -> f64 {
        self.control_period
    }

    fn ticks_per_period(&self) -> usize {
        (self.control_period / self.sample_period).round() as usize
    }

    fn signal(&self, window: &ParamWindow) -> Result<RoadSignal, SimError> {
        let samples = window.channel(0);
        let interp = FftInterpolant::from_samples(&samples, window.sample_period, 0.0, self.fft_cutoff)?;
        let grid = self
            .substep()
            .map(|(substeps, h)| StageTable::build(&interp, h, (samples.len() - 1) * substeps));
        Ok(RoadSignal { interp, grid })
    }

    fn advance(&self, x: &[f64], u: &[f64], signal: &RoadSignal, tick0: usize, ticks: usize) -> Result<Advance, SimError> {
        let uk = u[0];
        let mut y0 = [0.0; 6];
        y0[..4].copy_from_slice(x);
        let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
            let (p, pd) = signal.at(t);
            self.augmented_rhs(y, uk, p, pd, dy);
        };
        let y = match self.integration {
            Integration::FixedGrid { substeps } => {
                let h = self.sample_period / substeps as f64;
                integrate::integrate_fixed(rhs, (tick0 * substeps) as f64 * h, h, ticks * substeps, &y0)?
            }
            Integration::Adaptive { rel_tol, abs_tol } => {
                let t0 = tick0 as f64 * self.sample_period;
                let t1 = (tick0 + ticks) as f64 * self.sample_period;
                let problem = OdeProblem::new(rhs, (t0, t1), y0.to_vec()).with_tolerances(rel_tol, abs_tol);
                integrate::integrate(problem, &[])?.y_end
            }
        };
        Ok(Advance {
            state: y[..4].to_vec(),
            cost: self.weights.comfort * y[4] + self.weights.safety * y[5],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ParamSample;

    #[test]
    fn equilibrium_is_at_rest() {
        let params = QuarterCarParams::reference();
        for u in [0.5, 1.0, 3.0] {
            assert_eq!(quarter_car_rhs(&[0.0; 4], u, 0.0, 0.0, &params), [0.0; 4]);
        }
    }

    #[test]
    fn chassis_displacement_accelerations() {
        let params = QuarterCarParams::reference();
        let d = quarter_car_rhs(&[0.0, 0.0, 0.01, 0.0], 1.0, 0.0, 0.0, &params);
        assert!((d[1] - 5.714_285_7).abs() < 1e-6);
        assert!((d[3] + 0.615_384_6).abs() < 1e-6);
    }

    #[test]
    fn wheel_displacement_accelerations() {
        let params = QuarterCarParams::reference();
        let d = quarter_car_rhs(&[0.01, 0.0, 0.0, 0.0], 1.0, 0.0, 0.0, &params);
        assert!((d[1] + 5.771_428_6).abs() < 1e-6);
        assert!((d[3] - 0.615_384_6).abs() < 1e-6);
    }

    #[test]
    fn kilo_units_convert() {
        let p = QuarterCarParams::from_kilo_units(35.0, 325.0, 0.2, 150.0, 20.0).unwrap();
        assert_eq!(p, QuarterCarParams::reference());
        let s = p.with_wheel_values_swapped();
        assert_eq!((s.c_w, s.d_w), (150_000.0, 200.0));
        assert!(QuarterCarParams::new(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn rejects_non_integer_rate_ratio() {
        assert!(QuarterCar::new(QuarterCarParams::reference(), 0.1, 0.003).is_err());
        assert_eq!(QuarterCar::reference().ticks_per_period(), 50);
    }

    fn window(samples: Vec<f64>) -> ParamWindow {
        ParamWindow::new(0.002, samples.into_iter().map(|s| ParamSample::scalar(s).unwrap()).collect()).unwrap()
    }

    #[test]
    fn stage_table_matches_analytic_road() {
        let car = QuarterCar::reference();
        let samples: Vec<f64> = (0..251).map(|j| 0.05 * (j as f64 * 0.03).sin()).collect();
        let sig = car.signal(&window(samples)).unwrap();
        let h = 0.00025;
        for k in [0usize, 7, 399, 999] {
            for c in [0.0, C2, C3, C4, C5] {
                let t = (k as f64 + c) * h;
                let cached = sig.grid.as_ref().unwrap().lookup(t).unwrap();
                let v = sig.interp.value(t);
                assert_eq!(cached, (v.p, v.p_dot));
            }
        }
    }

    #[test]
    fn fixed_grid_agrees_with_adaptive() {
        let samples: Vec<f64> = (0..251).map(|j| 0.04 * (j as f64 * 0.025).sin()).collect();
        let fixed = QuarterCar::reference();
        let adaptive = QuarterCar::reference().with_integration(Integration::Adaptive {
            rel_tol: 1e-11,
            abs_tol: 1e-13,
        });
        let sig = fixed.signal(&window(samples.clone())).unwrap();
        // Start after the fast wheel transient has decayed.
        let x = fixed.advance(&[0.0, 0.5, -0.02, 0.1], &[1.2], &sig, 0, 50).unwrap().state;
        let a = fixed.advance(&x, &[1.2], &sig, 50, 50).unwrap();
        let b = adaptive.advance(&x, &[1.2], &adaptive.signal(&window(samples)).unwrap(), 50, 50).unwrap();
        for (p, q) in a.state.iter().zip(&b.state) {
            assert!((p - q).abs() < 1e-8, "{p} vs {q}");
        }
        assert!((a.cost - b.cost).abs() / b.cost < 1e-5, "{} vs {}", a.cost, b.cost);
    }

    #[test]
    fn tick_chunks_reproduce_full_interval() {
        let car = QuarterCar::reference();
        let samples: Vec<f64> = (0..251).map(|j| 0.03 * (j as f64 * 0.05).cos()).collect();
        let sig = car.signal(&window(samples)).unwrap();
        let x0 = [0.0, 0.1, 0.01, 0.0];
        let full = car.advance(&x0, &[2.0], &sig, 50, 50).unwrap();
        let mut x = x0.to_vec();
        for tick in 50..100 {
            x = car.advance(&x, &[2.0], &sig, tick, 1).unwrap().state;
        }
        assert_eq!(x, full.state);
    }
}

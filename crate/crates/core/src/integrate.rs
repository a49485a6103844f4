//! Dormand–Prince 5(4) explicit Runge–Kutta integration.
//!
//! Two entry points share one tableau:
//! * [`integrate`]: adaptive step control with the embedded 4th-order error
//!   estimate and 4th-order continuous (dense) output at requested times.
//! * [`integrate_fixed`]: constant step size, 5th-order solution only. Used
//!   wherever a reproducible, parameter-independent grid is required (order
//!   verification, and derivative evaluation of integrated quantities where an
//!   adaptive grid would make the result non-smooth in the inputs).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64, y: Vec<f64> },
    #[error("right-hand side returned a non-finite value at t = {t}")]
    NonFiniteRhs { t: f64, y: Vec<f64> },
    #[error("maximum number of steps ({0}) exceeded")]
    TooManySteps(usize),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

// Dormand & Prince (1980) coefficients.
pub(crate) const C2: f64 = 1.0 / 5.0;
pub(crate) const C3: f64 = 3.0 / 10.0;
pub(crate) const C4: f64 = 4.0 / 5.0;
pub(crate) const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// Difference between 5th and 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Continuous extension (Hairer, Nørsett & Wanner).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Initial value problem `y' = rhs(t, y)`, `y(t_start) = y0`.
///
/// `t_end` may lie before `t_start` (backward integration).
pub struct OdeProblem<F> {
    pub rhs: F,
    pub t_start: f64,
    pub t_end: f64,
    pub y0: Vec<f64>,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl<F> OdeProblem<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    /// Problem with the default tolerances of 1e-6 (absolute and relative).
    pub fn new(rhs: F, t_span: (f64, f64), y0: Vec<f64>) -> Self {
        Self {
            rhs,
            t_start: t_span.0,
            t_end: t_span.1,
            y0,
            rel_tol: 1e-6,
            abs_tol: 1e-6,
        }
    }

    pub fn with_tolerances(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = abs_tol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    pub max_steps: usize,
    /// Overrides the starting-step heuristic.
    pub initial_step: Option<f64>,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
            max_steps: 1_000_000,
            initial_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub y_end: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// `(t, y)` at each requested output time, in order.
    pub dense: Vec<(f64, Vec<f64>)>,
}

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl Stages {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }

    /// Computes stages 2..7 given `k[0] = f(t, y)`, writes the 5th-order
    /// solution into `y_new`; `k[6]` ends up as `f(t + h, y_new)`.
    fn step<F>(&mut self, rhs: &mut F, t: f64, y: &[f64], h: f64, y_new: &mut [f64])
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        let Stages { k, tmp } = self;
        let [k1, k2, k3, k4, k5, k6, k7] = k;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        rhs(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        rhs(t + h, tmp, k6);
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        rhs(t + h, y_new, k7);
    }

    fn error_norm(&self, y: &[f64], y_new: &[f64], h: f64, rel_tol: f64, abs_tol: f64) -> f64 {
        let k = &self.k;
        let mut sum = 0.0;
        for i in 0..y.len() {
            let e = h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
            let scale = abs_tol.max(rel_tol * y[i].abs().max(y_new[i].abs()));
            sum += (e / scale).powi(2);
        }
        (sum / y.len() as f64).sqrt()
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Starting step from the magnitudes of `y0`, `f(t0, y0)` and one explicit
/// Euler probe (Hairer's heuristic for a 5th-order method).
fn initial_step<F>(rhs: &mut F, t0: f64, y0: &[f64], f0: &[f64], dir: f64, rel: f64, abs: f64, h_max: f64) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let sc: Vec<f64> = y0.iter().map(|y| abs.max(rel * y.abs())).collect();
    let rms = |v: &mut dyn Iterator<Item = f64>| (v.map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    let d0 = rms(&mut y0.iter().zip(&sc).map(|(y, s)| y / s));
    let d1 = rms(&mut f0.iter().zip(&sc).map(|(f, s)| f / s));
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(h_max);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + dir * h0 * f).collect();
    let mut f1 = vec![0.0; n];
    rhs(t0 + dir * h0, &y1, &mut f1);
    let d2 = rms(&mut f1.iter().zip(f0).zip(&sc).map(|((a, b), s)| (a - b) / s)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (1e-6_f64).max(h0 * 1e-3)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(h_max)
}

/// Adaptive Dormand–Prince integration over `[t_start, t_end]`.
///
/// `output_times` must be sorted in the direction of integration and lie
/// within the span; the solution there is taken from the continuous extension.
pub fn integrate<F>(problem: OdeProblem<F>, output_times: &[f64]) -> Result<OdeSolution, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    integrate_with(problem, output_times, &StepControl::default())
}

pub fn integrate_with<F>(
    problem: OdeProblem<F>,
    output_times: &[f64],
    control: &StepControl,
) -> Result<OdeSolution, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let OdeProblem {
        mut rhs,
        t_start,
        t_end,
        y0,
        rel_tol,
        abs_tol,
    } = problem;
    if !(rel_tol > 0.0 && abs_tol > 0.0) {
        return Err(IntegrateError::InvalidProblem("tolerances must be positive".into()));
    }
    if !t_start.is_finite() || !t_end.is_finite() || y0.is_empty() || !all_finite(&y0) {
        return Err(IntegrateError::InvalidProblem("non-finite span or initial value".into()));
    }
    let dir = if t_end >= t_start { 1.0 } else { -1.0 };
    let span = (t_end - t_start).abs();
    for w in output_times.windows(2) {
        if dir * (w[1] - w[0]) < 0.0 {
            return Err(IntegrateError::InvalidProblem("output times not sorted".into()));
        }
    }
    if let Some(t) = output_times
        .iter()
        .find(|&&t| dir * (t - t_start) < 0.0 || dir * (t - t_end) > 0.0)
    {
        return Err(IntegrateError::InvalidProblem(format!("output time {t} outside span")));
    }

    let n = y0.len();
    let mut dense = Vec::with_capacity(output_times.len());
    let mut next_out = 0;
    while next_out < output_times.len() && output_times[next_out] == t_start {
        dense.push((t_start, y0.clone()));
        next_out += 1;
    }
    if span == 0.0 {
        return Ok(OdeSolution {
            y_end: y0,
            accepted_steps: 0,
            rejected_steps: 0,
            dense,
        });
    }

    let mut stages = Stages::new(n);
    let mut y = y0;
    let mut y_new = vec![0.0; n];
    let mut t = t_start;
    rhs(t, &y, &mut stages.k[0]);
    if !all_finite(&stages.k[0]) {
        return Err(IntegrateError::NonFiniteRhs { t, y });
    }

    let mut h = match control.initial_step {
        Some(h0) => h0.abs().min(span),
        None => {
            let f0 = stages.k[0].clone();
            initial_step(&mut rhs, t, &y, &f0, dir, rel_tol, abs_tol, span)
        }
    };
    let expo = 1.0 / 5.0;
    let mut accepted = 0;
    let mut rejected = 0;
    let mut last = false;

    loop {
        if accepted + rejected >= control.max_steps {
            return Err(IntegrateError::TooManySteps(control.max_steps));
        }
        if (t_end - t).abs() <= h {
            h = (t_end - t).abs();
            last = true;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(IntegrateError::StepSizeUnderflow { t, y });
        }
        let hs = dir * h;
        stages.step(&mut rhs, t, &y, hs, &mut y_new);
        if !all_finite(&y_new) || !all_finite(&stages.k[6]) {
            // Treat like a failed step: shrink hard and retry.
            rejected += 1;
            h *= control.min_factor;
            last = false;
            if !all_finite(&stages.k[6]) && h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
                return Err(IntegrateError::NonFiniteRhs { t, y });
            }
            continue;
        }
        let err = stages.error_norm(&y, &y_new, hs, rel_tol, abs_tol);
        let factor = if err == 0.0 {
            control.max_factor
        } else {
            (control.safety * err.powf(-expo)).clamp(control.min_factor, control.max_factor)
        };
        if err <= 1.0 {
            accepted += 1;
            let t_new = if last { t_end } else { t + hs };
            while next_out < output_times.len() && dir * (output_times[next_out] - t_new) <= 0.0 {
                let to = output_times[next_out];
                let theta = (to - t) / hs;
                dense.push((to, interpolate(&stages, &y, &y_new, hs, theta)));
                next_out += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            let [k1, .., k7] = &mut stages.k;
            std::mem::swap(k1, k7);
            if last {
                break;
            }
            h *= factor;
        } else {
            rejected += 1;
            last = false;
            h *= factor.min(1.0);
        }
    }

    Ok(OdeSolution {
        y_end: y,
        accepted_steps: accepted,
        rejected_steps: rejected,
        dense,
    })
}

/// 4th-order continuous extension on the step `[t, t + h]` at `t + θh`.
fn interpolate(stages: &Stages, y: &[f64], y_new: &[f64], h: f64, theta: f64) -> Vec<f64> {
    if theta == 1.0 {
        return y_new.to_vec();
    }
    let k = &stages.k;
    let theta1 = 1.0 - theta;
    (0..y.len())
        .map(|i| {
            let ydiff = y_new[i] - y[i];
            let bspl = h * k[0][i] - ydiff;
            let r4 = ydiff - h * k[6][i] - bspl;
            let r5 = h
                * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i]
                    + D7 * k[6][i]);
            y[i] + theta * (ydiff + theta1 * (bspl + theta * (r4 + theta1 * r5)))
        })
        .collect()
}

/// Fixed-step Dormand–Prince (5th-order solution, no error control).
///
/// Takes exactly `steps` steps of size `h` from `t0`; the stage times are
/// `t0 + (k + c_i)·h`. Returns the end state.
pub fn integrate_fixed<F>(mut rhs: F, t0: f64, h: f64, steps: usize, y0: &[f64]) -> Result<Vec<f64>, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(h.is_finite() && h != 0.0) {
        return Err(IntegrateError::InvalidProblem(format!("invalid step {h}")));
    }
    let n = y0.len();
    let mut stages = Stages::new(n);
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; n];
    if steps == 0 {
        return Ok(y);
    }
    rhs(t0, &y, &mut stages.k[0]);
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        stages.step(&mut rhs, t, &y, h, &mut y_new);
        if !all_finite(&y_new) {
            return Err(IntegrateError::NonFiniteRhs { t, y });
        }
        std::mem::swap(&mut y, &mut y_new);
        let [k1, .., k7] = &mut stages.k;
        std::mem::swap(k1, k7);
    }
    Ok(y)
}

/// Stage offsets `c_i` of the tableau, without duplicates (stage 7 shares
/// its time with stage 6 and the next step's first stage).
pub const STAGE_OFFSETS: [f64; 5] = [0.0, C2, C3, C4, C5];

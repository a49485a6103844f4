//! SQP for parametric NLPs with box constraints on the decision variables.
//!
//! Derivatives are finite differences of the objective unless a problem
//! overrides them. The Hessian model starts from a finite-difference Hessian
//! and is refined by damped BFGS updates.

pub mod qp;
mod sensitivity;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::BoxSet;
use qp::solve_box_qp;

pub use qp::{BoxQpSolution, Bound};
pub use sensitivity::{extract_sensitivities, Regularity, SensitivityData};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("objective evaluation failed at z = {z:?}: {msg}")]
    Objective { z: Vec<f64>, msg: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("QP subproblem failed: {0}")]
    QpFailed(String),
    #[error("sensitivities unavailable: {reason}")]
    SensitivityUnavailable { reason: String, regularity: Regularity },
}

/// Relative step of central first differences (about the cube root of machine epsilon).
pub const GRADIENT_STEP: f64 = 6e-6;
/// Relative step of second differences (about the fourth root of machine epsilon).
pub const SECOND_STEP: f64 = 1e-4;

/// `min_z f(z, θ)` subject to `z ∈ bounds`.
pub trait NlpProblem {
    fn dim_z(&self) -> usize;
    fn dim_theta(&self) -> usize;
    fn bounds(&self) -> &BoxSet;
    fn objective(&self, z: &[f64], theta: &[f64]) -> Result<f64, NlpError>;

    fn gradient(&self, z: &[f64], theta: &[f64]) -> Result<Vec<f64>, NlpError> {
        fd_gradient(|v| self.objective(v, theta), z)
    }

    fn hessian(&self, z: &[f64], theta: &[f64]) -> Result<DMatrix<f64>, NlpError> {
        fd_hessian(|v| self.objective(v, theta), z)
    }

    /// `∂²f/∂z∂θ`, shape `dim_z × dim_theta`.
    fn mixed_hessian(&self, z: &[f64], theta: &[f64]) -> Result<DMatrix<f64>, NlpError> {
        let (nz, nt) = (z.len(), theta.len());
        let mut out = DMatrix::zeros(nz, nt);
        let mut zz = z.to_vec();
        let mut tt = theta.to_vec();
        for i in 0..nz {
            let hi = SECOND_STEP * z[i].abs().max(1.0);
            for j in 0..nt {
                let hj = SECOND_STEP * theta[j].abs().max(1.0);
                let mut corner = |si: f64, sj: f64| {
                    zz[i] = z[i] + si * hi;
                    tt[j] = theta[j] + sj * hj;
                    let v = self.objective(&zz, &tt);
                    zz[i] = z[i];
                    tt[j] = theta[j];
                    v
                };
                let v = corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?;
                out[(i, j)] = v / (4.0 * hi * hj);
            }
        }
        Ok(out)
    }
}

/// Central-difference gradient.
pub fn fd_gradient<F>(mut f: F, z: &[f64]) -> Result<Vec<f64>, NlpError>
where
    F: FnMut(&[f64]) -> Result<f64, NlpError>,
{
    let mut v = z.to_vec();
    let mut g = vec![0.0; z.len()];
    for i in 0..z.len() {
        let h = GRADIENT_STEP * z[i].abs().max(1.0);
        v[i] = z[i] + h;
        let fp = f(&v)?;
        v[i] = z[i] - h;
        let fm = f(&v)?;
        v[i] = z[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Second-difference Hessian, symmetric by construction.
pub fn fd_hessian<F>(mut f: F, z: &[f64]) -> Result<DMatrix<f64>, NlpError>
where
    F: FnMut(&[f64]) -> Result<f64, NlpError>,
{
    let n = z.len();
    let step: Vec<f64> = z.iter().map(|v| SECOND_STEP * v.abs().max(1.0)).collect();
    let f0 = f(z)?;
    let mut v = z.to_vec();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        v[i] = z[i] + step[i];
        let fp = f(&v)?;
        v[i] = z[i] - step[i];
        let fm = f(&v)?;
        v[i] = z[i];
        out[(i, i)] = (fp - 2.0 * f0 + fm) / (step[i] * step[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                v[i] = z[i] + si * step[i];
                v[j] = z[j] + sj * step[j];
                let r = f(&v);
                v[i] = z[i];
                v[j] = z[j];
                r
            };
            let d = corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?;
            let hij = d / (4.0 * step[i] * step[j]);
            out[(i, j)] = hij;
            out[(j, i)] = hij;
        }
    }
    Ok(out)
}

/// Projected-gradient residual `‖z − P(z − ∇f)‖∞` of the box KKT conditions.
pub fn kkt_residual(z: &[f64], gradient: &[f64], bounds: &BoxSet) -> f64 {
    z.iter()
        .zip(gradient)
        .zip(bounds.lower().iter().zip(bounds.upper()))
        .map(|((z, g), (l, u))| (z - (z - g).clamp(*l, *u)).abs())
        .fold(0.0, f64::max)
}

/// Symmetrizes and lifts small or negative eigenvalues.
pub fn make_positive_definite(h: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-8 * top).max(1e-12);
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let lifted = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose()
}

/// Powell-damped BFGS update of `b` with step `s` and gradient change `y`.
pub fn damped_bfgs(b: &mut DMatrix<f64>, s: &[f64], y: &[f64]) {
    let s = DVector::from_column_slice(s);
    let y = DVector::from_column_slice(y);
    let bs = &*b * &s;
    let sbs = s.dot(&bs);
    if !(sbs > 1e-300) || s.amax() == 0.0 {
        return;
    }
    let sy = s.dot(&y);
    let r = if sy >= 0.2 * sbs {
        y
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        &y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if !(sr > 0.0) {
        return;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
    let sym = (&*b + b.transpose()) * 0.5;
    *b = sym;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
            armijo: 1e-4,
            min_step: 1e-10,
        }
    }
}

/// State carried between solver calls: Hessian model and bound multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverCarry {
    pub hessian: DMatrix<f64>,
    pub multipliers_lower: Vec<f64>,
    pub multipliers_upper: Vec<f64>,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub z_star: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub multipliers_lower: Vec<f64>,
    pub multipliers_upper: Vec<f64>,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub hessian: DMatrix<f64>,
    pub tol: f64,
}

impl NlpSolution {
    pub fn carry(&self) -> SolverCarry {
        SolverCarry {
            hessian: self.hessian.clone(),
            multipliers_lower: self.multipliers_lower.clone(),
            multipliers_upper: self.multipliers_upper.clone(),
            tol: self.tol,
        }
    }
}

struct Multipliers {
    lower: Vec<f64>,
    upper: Vec<f64>,
    active_lower: Vec<usize>,
    active_upper: Vec<usize>,
}

/// Bound multipliers read off the gradient at the active bounds.
fn multipliers(z: &[f64], g: &[f64], bounds: &BoxSet) -> Multipliers {
    let n = z.len();
    let mut m = Multipliers {
        lower: vec![0.0; n],
        upper: vec![0.0; n],
        active_lower: Vec::new(),
        active_upper: Vec::new(),
    };
    for i in 0..n {
        if z[i] <= bounds.lower()[i] {
            m.active_lower.push(i);
            m.lower[i] = g[i].max(0.0);
        } else if z[i] >= bounds.upper()[i] {
            m.active_upper.push(i);
            m.upper[i] = (-g[i]).max(0.0);
        }
    }
    m
}

fn check_dims<P: NlpProblem + ?Sized>(problem: &P, z: &[f64], theta: &[f64]) -> Result<(), NlpError> {
    if z.len() != problem.dim_z() || theta.len() != problem.dim_theta() || problem.bounds().dim() != z.len() {
        return Err(NlpError::Dimension(format!(
            "z {} (expected {}), theta {} (expected {}), bounds {}",
            z.len(),
            problem.dim_z(),
            theta.len(),
            problem.dim_theta(),
            problem.bounds().dim()
        )));
    }
    Ok(())
}

fn non_finite(z: &[f64], what: &str) -> NlpError {
    NlpError::Objective {
        z: z.to_vec(),
        msg: format!("non-finite {what}"),
    }
}

/// SQP with default options apart from tolerance and iteration limit.
pub fn sqp_solve<P: NlpProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    z0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<NlpSolution, NlpError> {
    let options = SqpOptions {
        tol,
        max_iter,
        ..SqpOptions::default()
    };
    sqp_solve_with(problem, theta, z0, &options, None)
}

/// Line-search SQP. `hessian0` seeds the Hessian model; otherwise a
/// finite-difference Hessian at the (projected) start is used.
pub fn sqp_solve_with<P: NlpProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    z0: &[f64],
    options: &SqpOptions,
    hessian0: Option<&DMatrix<f64>>,
) -> Result<NlpSolution, NlpError> {
    check_dims(problem, z0, theta)?;
    let bounds = problem.bounds();
    let lower = bounds.lower();
    let upper = bounds.upper();
    let mut z = bounds.clamp(z0);
    let mut f = problem.objective(&z, theta)?;
    if !f.is_finite() {
        return Err(non_finite(&z, "objective"));
    }
    let mut g = problem.gradient(&z, theta)?;
    let mut residual = kkt_residual(&z, &g, bounds);
    let mut hessian: Option<DMatrix<f64>> = hessian0.map(make_positive_definite);
    let mut refreshed = hessian0.is_none();
    let mut iterations = 0;
    while residual > options.tol && iterations < options.max_iter {
        let b = match &hessian {
            Some(b) => b.clone(),
            None => {
                let h = make_positive_definite(&problem.hessian(&z, theta)?);
                hessian = Some(h.clone());
                h
            }
        };
        iterations += 1;
        let lo: Vec<f64> = lower.iter().zip(&z).map(|(l, v)| l - v).collect();
        let hi: Vec<f64> = upper.iter().zip(&z).map(|(u, v)| u - v).collect();
        let d = solve_box_qp(&b, &g, &lo, &hi)?.x;
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut accepted = None;
        if slope < 0.0 {
            let mut t = 1.0;
            while t >= options.min_step {
                let trial = bounds.clamp(&z.iter().zip(&d).map(|(v, s)| v + t * s).collect::<Vec<_>>());
                let ft = problem.objective(&trial, theta)?;
                if ft.is_finite() && ft <= f + options.armijo * t * slope {
                    accepted = Some((trial, ft));
                    break;
                }
                t *= 0.5;
            }
        }
        let Some((z_new, f_new)) = accepted else {
            // Stalled: rebuild the Hessian model once, then give up.
            if refreshed {
                break;
            }
            refreshed = true;
            hessian = None;
            continue;
        };
        let g_new = problem.gradient(&z_new, theta)?;
        let s: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if let Some(b) = hessian.as_mut() {
            damped_bfgs(b, &s, &y);
        }
        z = z_new;
        f = f_new;
        g = g_new;
        residual = kkt_residual(&z, &g, bounds);
    }
    let hessian = match hessian {
        Some(h) => h,
        None => make_positive_definite(&problem.hessian(&z, theta)?),
    };
    let m = multipliers(&z, &g, bounds);
    Ok(NlpSolution {
        converged: residual <= options.tol,
        z_star: z,
        value: f,
        gradient: g,
        multipliers_lower: m.lower,
        multipliers_upper: m.upper,
        active_lower: m.active_lower,
        active_upper: m.active_upper,
        kkt_residual: residual,
        iterations,
        hessian,
        tol: options.tol,
    })
}

/// One full SQP step at new parameters `theta_new` from `z_prev`, without
/// line search. Returns `z_prev` unchanged when it is already stationary.
pub fn sqp_single_iteration<P: NlpProblem + ?Sized>(
    problem: &P,
    theta_new: &[f64],
    z_prev: &[f64],
    carry: &SolverCarry,
) -> Result<(Vec<f64>, SolverCarry), NlpError> {
    check_dims(problem, z_prev, theta_new)?;
    let bounds = problem.bounds();
    let z = bounds.clamp(z_prev);
    let g = problem.gradient(&z, theta_new)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(non_finite(&z, "gradient"));
    }
    if kkt_residual(&z, &g, bounds) <= carry.tol {
        let m = multipliers(&z, &g, bounds);
        return Ok((
            z,
            SolverCarry {
                multipliers_lower: m.lower,
                multipliers_upper: m.upper,
                ..carry.clone()
            },
        ));
    }
    let lo: Vec<f64> = bounds.lower().iter().zip(&z).map(|(l, v)| l - v).collect();
    let hi: Vec<f64> = bounds.upper().iter().zip(&z).map(|(u, v)| u - v).collect();
    let d = solve_box_qp(&carry.hessian, &g, &lo, &hi)?.x;
    let z_new = bounds.clamp(&z.iter().zip(&d).map(|(a, b)| a + b).collect::<Vec<_>>());
    let g_new = problem.gradient(&z_new, theta_new)?;
    let mut hessian = carry.hessian.clone();
    let s: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
    let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
    damped_bfgs(&mut hessian, &s, &y);
    let m = multipliers(&z_new, &g_new, bounds);
    Ok((
        z_new,
        SolverCarry {
            hessian,
            multipliers_lower: m.lower,
            multipliers_upper: m.upper,
            tol: carry.tol,
        },
    ))
}

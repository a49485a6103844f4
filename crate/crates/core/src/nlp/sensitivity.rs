use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{NlpError, NlpProblem, NlpSolution};

/// Multipliers at or below this value count as weakly active.
pub const STRICT_COMPLEMENTARITY_TOL: f64 = 1e-8;

/// Regularity conditions checked at a solution. `ssoc` is a proxy: positive
/// definiteness of the finite-difference Hessian on the inactive indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Regularity {
    pub licq: bool,
    pub scc: bool,
    pub ssoc: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityData {
    /// `∂z*/∂θ`, shape `dim_z × dim_theta`; rows of active indices are zero.
    pub du_dtheta: DMatrix<f64>,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
    pub regularity: Regularity,
}

impl SensitivityData {
    /// First-order prediction `z* + (∂z*/∂θ) Δθ` (unprojected).
    pub fn predict(&self, z_star: &[f64], delta_theta: &[f64]) -> Vec<f64> {
        let dz = &self.du_dtheta * nalgebra::DVector::from_column_slice(delta_theta);
        z_star.iter().zip(dz.iter()).map(|(a, b)| a + b).collect()
    }
}

/// Derivative of the solution map of a box-constrained NLP at a regular
/// solution, from the reduced KKT system on the inactive indices.
pub fn extract_sensitivities<P: NlpProblem + ?Sized>(
    problem: &P,
    sol: &NlpSolution,
    theta: &[f64],
) -> Result<SensitivityData, NlpError> {
    let n = problem.dim_z();
    let nt = problem.dim_theta();
    if sol.z_star.len() != n || theta.len() != nt {
        return Err(NlpError::Dimension(format!(
            "solution of size {} and theta of size {} for problem ({n}, {nt})",
            sol.z_star.len(),
            theta.len()
        )));
    }
    let mut regularity = Regularity {
        licq: true,
        ..Regularity::default()
    };
    let unavailable = |reason: String, regularity| Err(NlpError::SensitivityUnavailable { reason, regularity });
    if !sol.converged {
        return unavailable(format!("solution not converged (residual {:e})", sol.kkt_residual), regularity);
    }
    let weak: Vec<usize> = sol
        .active_lower
        .iter()
        .filter(|&&i| sol.multipliers_lower[i] <= STRICT_COMPLEMENTARITY_TOL)
        .chain(
            sol.active_upper
                .iter()
                .filter(|&&i| sol.multipliers_upper[i] <= STRICT_COMPLEMENTARITY_TOL),
        )
        .copied()
        .collect();
    regularity.scc = weak.is_empty();
    let inactive: Vec<usize> = (0..n)
        .filter(|i| !sol.active_lower.contains(i) && !sol.active_upper.contains(i))
        .collect();
    let mut du = DMatrix::zeros(n, nt);
    if inactive.is_empty() {
        regularity.ssoc = true;
    } else {
        let h = problem.hessian(&sol.z_star, theta)?;
        let m = inactive.len();
        let h_ii = DMatrix::from_fn(m, m, |a, b| 0.5 * (h[(inactive[a], inactive[b])] + h[(inactive[b], inactive[a])]));
        let chol = h_ii.cholesky();
        regularity.ssoc = chol.is_some();
        if let (Some(chol), true) = (chol, regularity.scc) {
            let mixed = problem.mixed_hessian(&sol.z_star, theta)?;
            let rhs = DMatrix::from_fn(m, nt, |a, j| -mixed[(inactive[a], j)]);
            let sol_i = chol.solve(&rhs);
            for (a, &i) in inactive.iter().enumerate() {
                for j in 0..nt {
                    du[(i, j)] = sol_i[(a, j)];
                }
            }
        }
    }
    if !regularity.scc {
        return unavailable(format!("weakly active bounds at indices {weak:?}"), regularity);
    }
    if !regularity.ssoc {
        return unavailable("reduced Hessian is not positive definite".into(), regularity);
    }
    Ok(SensitivityData {
        du_dtheta: du,
        active_lower: sol.active_lower.clone(),
        active_upper: sol.active_upper.clone(),
        regularity,
    })
}

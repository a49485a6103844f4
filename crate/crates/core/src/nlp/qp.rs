//! Strictly convex box-constrained QP by a primal active-set method.

use nalgebra::{DMatrix, DVector};

use super::NlpError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpSolution {
    pub x: Vec<f64>,
    pub status: Vec<Bound>,
    pub iterations: usize,
}

/// Minimizes `½xᵀHx + gᵀx` subject to `lo ≤ x ≤ hi`.
///
/// `H` must be symmetric positive definite. The bounds must contain a point,
/// and zero is used as the start after clamping.
pub fn solve_box_qp(h: &DMatrix<f64>, g: &[f64], lo: &[f64], hi: &[f64]) -> Result<BoxQpSolution, NlpError> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n || lo.len() != n || hi.len() != n {
        return Err(NlpError::Dimension(format!(
            "QP with H {}x{}, g {}, bounds {}/{}",
            h.nrows(),
            h.ncols(),
            n,
            lo.len(),
            hi.len()
        )));
    }
    let mut x = vec![0.0; n];
    let mut status = vec![Bound::Free; n];
    for i in 0..n {
        if lo[i] > hi[i] {
            return Err(NlpError::Dimension(format!("empty box at index {i}")));
        }
        if lo[i] >= 0.0 {
            x[i] = lo[i];
            status[i] = Bound::Lower;
        } else if hi[i] <= 0.0 {
            x[i] = hi[i];
            status[i] = Bound::Upper;
        }
    }
    let max_iter = 20 * n + 50;
    // Index released in the previous iteration; if it blocks again at once,
    // its multiplier sign was roundoff and the current point is optimal.
    let mut released: Option<usize> = None;
    for iteration in 1..=max_iter {
        let grad = gradient(h, g, &x);
        let x_scale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let g_scale = grad.iter().chain(g).fold(0.0_f64, |m, v| m.max(v.abs())) + h.amax() * x_scale;
        let free: Vec<usize> = (0..n).filter(|&i| status[i] == Bound::Free).collect();
        let step = newton_step(h, &grad, &free)?;
        let step_norm = step.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        // Predicted decrease of the face Newton step; below roundoff of the
        // model value at x the step only chases noise on an ill-conditioned face.
        let decrease = 0.5 * free.iter().zip(&step).map(|(&i, p)| -grad[i] * p).sum::<f64>();
        let model_scale: f64 = (0..n)
            .map(|i| x[i].abs() * (g[i].abs() + (0..n).map(|j| h[(i, j)].abs() * x[j].abs()).sum::<f64>()))
            .sum();
        if step_norm <= 1e-13 * x_scale || decrease <= 1e-14 * model_scale {
            // Stationary on the current face: release the worst bound, if any.
            let worst = (0..n)
                .filter_map(|i| match status[i] {
                    Bound::Lower if lo[i] < hi[i] => Some((i, grad[i])),
                    Bound::Upper if lo[i] < hi[i] => Some((i, -grad[i])),
                    _ => None,
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((i, m)) if m < -1e-13 * g_scale => {
                    status[i] = Bound::Free;
                    released = Some(i);
                }
                _ => return Ok(BoxQpSolution { x, status, iterations: iteration }),
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (k, &i) in free.iter().enumerate() {
            let p = step[k];
            let limit = if p < 0.0 {
                (lo[i] - x[i]) / p
            } else if p > 0.0 {
                (hi[i] - x[i]) / p
            } else {
                f64::INFINITY
            };
            if limit < alpha {
                alpha = limit.max(0.0);
                blocking = Some((i, if p < 0.0 { Bound::Lower } else { Bound::Upper }));
            }
        }
        if alpha == 0.0 && blocking.is_some_and(|(i, _)| Some(i) == released) {
            let (i, side) = blocking.expect("checked above");
            status[i] = side;
            return Ok(BoxQpSolution { x, status, iterations: iteration });
        }
        released = None;
        for (k, &i) in free.iter().enumerate() {
            x[i] += alpha * step[k];
        }
        if let Some((i, side)) = blocking {
            status[i] = side;
            x[i] = if side == Bound::Lower { lo[i] } else { hi[i] };
        }
        for &i in &free {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    }
    Err(NlpError::QpFailed(format!("no convergence in {max_iter} iterations")))
}

fn gradient(h: &DMatrix<f64>, g: &[f64], x: &[f64]) -> Vec<f64> {
    let hx = h * DVector::from_column_slice(x);
    hx.iter().zip(g).map(|(a, b)| a + b).collect()
}

/// Newton step on the free variables with the others held fixed.
fn newton_step(h: &DMatrix<f64>, grad: &[f64], free: &[usize]) -> Result<Vec<f64>, NlpError> {
    if free.is_empty() {
        return Ok(Vec::new());
    }
    let m = free.len();
    let sub = DMatrix::from_fn(m, m, |a, b| h[(free[a], free[b])]);
    let rhs = DVector::from_iterator(m, free.iter().map(|&i| -grad[i]));
    let chol = sub
        .cholesky()
        .ok_or_else(|| NlpError::QpFailed("reduced Hessian is not positive definite".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

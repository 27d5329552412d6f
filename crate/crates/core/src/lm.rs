//! Small dense Levenberg-Marquardt solver with numeric Jacobians.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::frames::numeric_jacobian;

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the accepted step norm falls below this.
    pub step_tolerance: f64,
    /// Stop when an accepted step reduces the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub jacobian_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 100,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-12,
            jacobian_step: crate::frames::JACOBIAN_STEP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmSolution {
    pub params: DVector<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
}

/// Minimizes `sum(residuals(x)^2)`. `residuals` returns `None` where the
/// model is undefined; such trial points are rejected like a cost increase.
pub fn minimize<F>(residuals: F, initial: DVector<f64>, opts: &LmOptions) -> Result<LmSolution>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut x = initial;
    let mut r = residuals(&x).ok_or(Error::NonFinite)?;
    let initial_cost = r.norm_squared();
    let mut cost = initial_cost;
    let mut lambda: Option<f64> = None;
    let mut nu = 2.0;

    for iteration in 1..=opts.max_iterations {
        if cost == 0.0 {
            return Ok(LmSolution { params: x, cost, initial_cost, iterations: iteration - 1 });
        }
        let j = numeric_jacobian(
            |p| residuals(p).unwrap_or_else(|| DVector::from_element(r.len(), f64::NAN)),
            &x,
            opts.jacobian_step,
        )?;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mu = *lambda.get_or_insert_with(|| 1e-3 * jtj.diagonal().max());

        let mut lam = mu;
        loop {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lam * jtj[(i, i)].max(1e-12);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lam *= nu;
                    nu *= 2.0;
                    if lam > 1e32 {
                        return Err(Error::Numerical("normal equations not positive definite".into()));
                    }
                    continue;
                }
            };
            let trial = &x + &step;
            let trial_cost = residuals(&trial).map(|tr| tr.norm_squared());
            match trial_cost {
                Some(tc) if tc.is_finite() && tc < cost => {
                    let decrease = (cost - tc) / cost;
                    let step_norm = step.norm();
                    x = trial;
                    r = residuals(&x).ok_or(Error::NonFinite)?;
                    cost = tc;
                    lambda = Some((lam / 3.0).max(1e-15));
                    nu = 2.0;
                    if step_norm < opts.step_tolerance || decrease < opts.cost_tolerance {
                        return Ok(LmSolution { params: x, cost, initial_cost, iterations: iteration });
                    }
                    break;
                }
                _ => {
                    lam *= nu;
                    nu *= 2.0;
                    // Damping so large that the step underflows: stationary point.
                    if lam > 1e20 * (1.0 + jtj.diagonal().max()) {
                        return Ok(LmSolution { params: x, cost, initial_cost, iterations: iteration });
                    }
                }
            }
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iterations })
}

/// Condition number of a symmetric PSD matrix (ratio of extreme eigenvalues).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

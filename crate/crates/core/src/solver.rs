//! Log-barrier Newton machinery shared by the allocation and invariant-point
//! programs. Problem sizes are at most a few hundred variables, so the
//! implementation favors robustness: dense Cholesky with ridge fallback,
//! fraction-to-boundary steps, and Armijo backtracking.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A strictly convex barrier subproblem: minimize `obj(x) + mu * B(x)` over
/// the open feasible set, where B is the sum of -log(slack) terms.
pub(crate) trait BarrierProblem {
    fn dim(&self) -> usize;

    /// Number of barrier terms; `mu * count` estimates the duality gap.
    fn constraint_count(&self) -> usize;

    /// Full barrier objective; `f64::INFINITY` outside the open set.
    fn eval(&self, x: &DVector<f64>, mu: f64) -> f64;

    fn grad_hess(&self, x: &DVector<f64>, mu: f64) -> (DVector<f64>, DMatrix<f64>);

    /// Largest step t with x + t dx strictly feasible (`f64::INFINITY` when
    /// unbounded). The Newton loop retreats to 99% of it.
    fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BarrierOptions {
    pub mu0: f64,
    pub shrink: f64,
    pub newton_tol: f64,
    pub gap_tol: f64,
    pub max_newton_iters: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            mu0: 1.0,
            shrink: 0.2,
            newton_tol: 1e-10,
            gap_tol: 1e-9,
            max_newton_iters: 120,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BarrierSolution {
    pub x: DVector<f64>,
    pub mu_final: f64,
    pub outer_iters: usize,
    pub newton_iters: usize,
}

/// Outer barrier loop: mu0 -> x shrink, stopping once the duality-gap
/// estimate `mu * constraint_count` drops below `gap_tol`.
pub(crate) fn barrier_solve(
    problem: &impl BarrierProblem,
    x0: DVector<f64>,
    opts: &BarrierOptions,
) -> Result<BarrierSolution> {
    if !problem.eval(&x0, opts.mu0).is_finite() {
        return Err(Error::InfeasibleLoad(
            "barrier start point is not strictly feasible".into(),
        ));
    }
    let m = problem.constraint_count().max(1) as f64;
    let mut x = x0;
    let mut mu = opts.mu0;
    let mut outer = 0;
    let mut newton_total = 0;
    loop {
        outer += 1;
        newton_total += newton_descend(problem, &mut x, mu, opts)?;
        if mu * m < opts.gap_tol {
            return Ok(BarrierSolution {
                x,
                mu_final: mu,
                outer_iters: outer,
                newton_iters: newton_total,
            });
        }
        mu *= opts.shrink;
    }
}

/// Damped Newton on the barrier subproblem at fixed mu. Returns the number
/// of iterations spent.
///
/// The stop test is on the Newton decrement at `newton_tol^2`: barrier
/// curvature near active constraints scales like 1/mu, so a decrement of
/// that size is what certifies a gradient (and hence multiplier) residual
/// of order `newton_tol`. Inside the quadratic region the objective
/// differences fall below f64 resolution, so Armijo is replaced by plain
/// feasible steps guarded by monotone decrement.
fn newton_descend(
    problem: &impl BarrierProblem,
    x: &mut DVector<f64>,
    mu: f64,
    opts: &BarrierOptions,
) -> Result<usize> {
    let stop = opts.newton_tol * opts.newton_tol;
    let mut prev_decrement = f64::INFINITY;
    let mut backup = x.clone();
    for iter in 0..opts.max_newton_iters {
        let (grad, hess) = problem.grad_hess(x, mu);
        let dir = solve_spd(&hess, &-&grad).ok_or_else(|| {
            Error::NonConvergence(format!(
                "Newton system unsolvable at mu={mu:.2e} (iteration {iter})"
            ))
        })?;
        let decrement = -grad.dot(&dir);
        if decrement <= stop {
            return Ok(iter);
        }
        let polish = decrement < 1e-9;
        if polish {
            if decrement > 0.5 * prev_decrement {
                // Arithmetic floor reached; the backup is at least as good.
                if decrement > prev_decrement {
                    *x = backup;
                }
                return Ok(iter);
            }
            backup = x.clone();
            let t = (0.99 * problem.max_step(x, &dir)).min(1.0);
            let cand = x.clone() + t * &dir;
            if problem.eval(&cand, mu).is_finite() {
                *x = cand;
                prev_decrement = decrement;
                continue;
            }
            return Ok(iter);
        }
        prev_decrement = decrement;
        let f0 = problem.eval(x, mu);
        let mut t = (0.99 * problem.max_step(x, &dir)).min(1.0);
        let slope = grad.dot(&dir);
        let mut accepted = false;
        while t > 1e-14 {
            let cand = x.clone() + t * &dir;
            let f = problem.eval(&cand, mu);
            if f.is_finite() && f <= f0 + 0.25 * t * slope {
                *x = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Step collapsed; the iterate is as good as the arithmetic allows.
            return Ok(iter + 1);
        }
    }
    // The decrement did not reach tolerance; callers see the effect in the
    // residuals they compute, so report rather than fail hard.
    Ok(opts.max_newton_iters)
}

/// Cholesky solve with iterative refinement and escalating ridge fallback.
/// Barrier Hessians reach condition numbers near 1/mu^2; two refinement
/// rounds recover most of the direction accuracy that plain f64 Cholesky
/// loses there.
fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let refine = |chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>| -> DVector<f64> {
        let mut x = chol.solve(rhs);
        for _ in 0..2 {
            let r = rhs - h * &x;
            x += chol.solve(&r);
        }
        x
    };
    if let Some(chol) = h.clone().cholesky() {
        return Some(refine(&chol));
    }
    let scale = h.diagonal().amax().max(1.0);
    let mut ridge = 1e-14 * scale;
    for _ in 0..12 {
        let mut jittered = h.clone();
        for i in 0..h.nrows() {
            jittered[(i, i)] += ridge;
        }
        if let Some(chol) = jittered.cholesky() {
            return Some(refine(&chol));
        }
        ridge *= 10.0;
    }
    None
}

/// Lawson-Hanson nonnegative least squares: minimize ||A λ - b|| over λ >= 0.
///
/// Used to recover KKT multipliers at the barrier solution: the primal
/// iterate is accurate to O(mu), but mu/slack estimates lose all digits to
/// cancellation once slacks shrink toward 1e-11, while the stationarity
/// system stays well conditioned in λ.
pub(crate) fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut lambda = DVector::zeros(n);
    if n == 0 {
        return lambda;
    }
    let mut passive = vec![false; n];
    let tol = 1e-12 * b.amax().max(1.0);
    for _ in 0..3 * n + 10 {
        let residual = b - a * &lambda;
        let grad = a.transpose() * &residual;
        let mut best = None;
        for i in 0..n {
            if !passive[i] && grad[i] > tol {
                if best.map_or(true, |(_, g)| grad[i] > g) {
                    best = Some((i, grad[i]));
                }
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;
        loop {
            let cols: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let sub = a.select_columns(cols.iter());
            let s = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-13)
                .unwrap_or_else(|_| DVector::zeros(cols.len()));
            if s.iter().all(|&v| v > 0.0) {
                lambda.fill(0.0);
                for (idx, &c) in cols.iter().enumerate() {
                    lambda[c] = s[idx];
                }
                break;
            }
            // Retreat along the segment to the first coordinate hitting zero.
            let mut alpha = 1.0f64;
            for (idx, &c) in cols.iter().enumerate() {
                if s[idx] <= 0.0 {
                    let denom = lambda[c] - s[idx];
                    if denom > 0.0 {
                        alpha = alpha.min(lambda[c] / denom);
                    }
                }
            }
            for (idx, &c) in cols.iter().enumerate() {
                lambda[c] += alpha * (s[idx] - lambda[c]);
                if lambda[c] <= tol.max(1e-300) {
                    lambda[c] = 0.0;
                    passive[c] = false;
                }
            }
        }
    }
    lambda
}

/// Largest t such that `slack - t * rate > 0`, folded over constraints.
pub(crate) fn step_limit(cur: f64, slack: f64, rate: f64) -> f64 {
    if rate > 0.0 {
        cur.min(slack / rate)
    } else {
        cur
    }
}

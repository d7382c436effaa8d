//! Derivative-free-gradient quasi-Newton ascent used by the likelihood and
//! probit fitters: BFGS with central finite-difference gradients and a
//! backtracking Armijo line search.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iterations: usize,
    /// Relative objective-improvement threshold for convergence.
    pub tolerance: f64,
    /// Relative step for central finite differences.
    pub gradient_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-8, gradient_step: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
}

/// Central finite-difference gradient with per-coordinate relative steps.
pub fn numerical_gradient<F>(f: &F, x: &[f64], rel_step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Maximizes `f` from `x0`. Infeasible points may return errors or non-finite
/// values; the line search treats both as rejections, but a non-finite value
/// at the start aborts.
pub fn maximize<F>(f: &F, x0: &[f64], opts: &OptimOptions) -> Result<OptimOutcome>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut evaluations = 0usize;
    let eval = |x: &[f64], evals: &mut usize| -> Result<f64> {
        *evals += 1;
        f(x)
    };

    let mut x = x0.to_vec();
    let mut value = eval(&x, &mut evaluations)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let mut grad = numerical_gradient(f, &x, opts.gradient_step)?;
    evaluations += 2 * n;

    // Inverse-Hessian approximation of the negated objective, kept as a dense
    // symmetric matrix (identity start).
    let mut h_inv = identity(n);
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        // Ascent direction: H⁻¹ g (H approximates the negative Hessian).
        let mut direction = mat_vec(&h_inv, &grad);
        if dot(&direction, &grad) <= 0.0 {
            // Curvature information went stale; fall back to steepest ascent.
            h_inv = identity(n);
            direction = grad.clone();
        }

        let (step, new_x, new_value) =
            match line_search(&mut |p| eval(p, &mut evaluations), &x, value, &grad, &direction)? {
                Some(found) => found,
                None => {
                    // No uphill step exists along either direction: treat the
                    // point as a numerical optimum.
                    converged = true;
                    break;
                }
            };

        let new_grad = numerical_gradient(f, &new_x, opts.gradient_step)?;
        evaluations += 2 * n;

        let improvement = (new_value - value).abs() / (value.abs() + 1.0);
        // BFGS update on (s, y) with y negated because we maximize.
        let s: Vec<f64> = new_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad.iter().zip(&new_grad).map(|(g, ng)| g - ng).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            bfgs_update(&mut h_inv, &s, &y, sy);
        }

        x = new_x;
        value = new_value;
        grad = new_grad;
        let _ = step;

        if improvement < opts.tolerance {
            converged = true;
            break;
        }
    }

    Ok(OptimOutcome { x, value, iterations, converged, evaluations })
}

/// Numerical Hessian by central second differences, symmetrized.
pub fn numerical_hessian<F>(f: &F, x: &[f64], rel_step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = x.len();
    let steps: Vec<f64> = x.iter().map(|&xi| rel_step * (1.0 + xi.abs())).collect();
    let f0 = f(x)?;
    let mut hess = vec![vec![0.0; n]; n];
    let mut probe = x.to_vec();
    for i in 0..n {
        // Diagonal: (f(+h) − 2f(0) + f(−h)) / h².
        probe[i] = x[i] + steps[i];
        let up = f(&probe)?;
        probe[i] = x[i] - steps[i];
        let down = f(&probe)?;
        probe[i] = x[i];
        hess[i][i] = (up - 2.0 * f0 + down) / (steps[i] * steps[i]);
        for j in (i + 1)..n {
            let mut at = |si: f64, sj: f64| -> Result<f64> {
                probe[i] = x[i] + si * steps[i];
                probe[j] = x[j] + sj * steps[j];
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let pp = at(1.0, 1.0)?;
            let pm = at(1.0, -1.0)?;
            let mp = at(-1.0, 1.0)?;
            let mm = at(-1.0, -1.0)?;
            let value = (pp - pm - mp + mm) / (4.0 * steps[i] * steps[j]);
            hess[i][j] = value;
            hess[j][i] = value;
        }
    }
    Ok(hess)
}

type SearchResult = Result<Option<(f64, Vec<f64>, f64)>>;

fn line_search<F>(eval: &mut F, x: &[f64], value: f64, grad: &[f64], direction: &[f64]) -> SearchResult
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    const ARMIJO: f64 = 1e-4;
    const SHRINK: f64 = 0.5;
    const MAX_BACKTRACKS: usize = 45;

    let slope = dot(grad, direction);
    if slope <= 0.0 {
        return Ok(None);
    }
    let mut step = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let candidate: Vec<f64> = x.iter().zip(direction).map(|(xi, di)| xi + step * di).collect();
        match eval(&candidate) {
            Ok(v) if v.is_finite() && v >= value + ARMIJO * step * slope => {
                return Ok(Some((step, candidate, v)));
            }
            // Errors and non-finite values both shrink the step.
            Ok(_) | Err(_) => step *= SHRINK,
        }
    }
    Ok(None)
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// BFGS inverse-Hessian update:
/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ with ρ = 1/(sᵀy).
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                + rho * rho * yhy * s[i] * s[j]
                + rho * s[i] * s[j];
        }
    }
}

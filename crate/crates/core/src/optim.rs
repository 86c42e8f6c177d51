//! Limited-memory BFGS minimisation with a backtracking line search.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Convergence when the max-norm of the gradient falls below
    /// `grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    /// Convergence when the relative decrease of `f` over one step is
    /// below this value for several consecutive iterations.
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 2000,
            grad_tol: 1e-8,
            f_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimises `f`, where `f(x, grad)` returns the objective and writes the
/// gradient into `grad`. Non-finite objective values are treated as
/// infeasible and the line search backs off.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if n == 0 {
        return Minimum {
            x,
            value: fx,
            grad: g,
            iterations: 0,
            converged: true,
        };
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut alpha = vec![0.0; opts.memory];
    let mut stalls = 0;

    for iter in 0..opts.max_iter {
        if !fx.is_finite() {
            break;
        }
        if max_abs(&g) <= opts.grad_tol * fx.abs().max(1.0) {
            return Minimum {
                x,
                value: fx,
                grad: g,
                iterations: iter,
                converged: true,
            };
        }

        // Two-loop recursion.
        dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
        for (k, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha[k] = a;
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
        }
        let scale = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / max_abs(&g).max(1.0),
        };
        dir.iter_mut().for_each(|d| *d *= scale);
        for (k, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            let a = alpha[k];
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
        }

        let mut slope = dot(&g, &dir);
        if slope >= 0.0 || !slope.is_finite() {
            // Not a descent direction: reset to steepest descent.
            history.clear();
            let s = 1.0 / max_abs(&g).max(1.0);
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi * s);
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            x_new
                .iter_mut()
                .zip(x.iter().zip(&dir))
                .for_each(|(xn, (xi, di))| *xn = xi + step * di);
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if history.len() == opts.memory {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                let rel = (fx - f_new).abs() / fx.abs().max(1.0);
                stalls = if rel < opts.f_tol { stalls + 1 } else { 0 };
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            let converged = max_abs(&g) <= 1e3 * opts.grad_tol * fx.abs().max(1.0);
            return Minimum {
                x,
                value: fx,
                grad: g,
                iterations: iter,
                converged,
            };
        }
        if stalls >= 5 {
            let converged = max_abs(&g) <= 1e3 * opts.grad_tol * fx.abs().max(1.0);
            return Minimum {
                x,
                value: fx,
                grad: g,
                iterations: iter + 1,
                converged,
            };
        }
    }
    let converged = fx.is_finite() && max_abs(&g) <= opts.grad_tol * fx.abs().max(1.0);
    Minimum {
        x,
        value: fx,
        grad: g,
        iterations: opts.max_iter,
        converged,
    }
}

//! Posterior mode and Gaussian (Laplace) approximation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bayes::Target;
use crate::error::{Error, Result};
use crate::optim::{minimize, LbfgsOptions};

#[derive(Debug, Clone)]
pub struct LaplaceApprox {
    pub mode: Vec<f64>,
    pub log_density_at_mode: f64,
    /// Lower Cholesky factor of the negative Hessian at the mode.
    chol: DMatrix<f64>,
}

/// Maximises the target from `starts[0]`, trying the remaining starts when
/// the optimiser fails to converge. Returns the best converged optimum.
pub fn find_mode<T: Target + ?Sized>(target: &T, starts: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let opts = LbfgsOptions {
        grad_tol: 1e-6,
        ..Default::default()
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for x0 in starts {
        let m = minimize(
            |x, g| {
                let lp = target.log_density_grad(x, g);
                g.iter_mut().for_each(|v| *v = -*v);
                -lp
            },
            x0,
            &opts,
        );
        if !m.value.is_finite() {
            continue;
        }
        let gmax = m.grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let ok = gmax < 1e-2 && (m.converged || gmax < 1e-4);
        if ok && best.as_ref().is_none_or(|(_, v)| -m.value > *v) {
            best = Some((m.x, -m.value));
            // One good optimum is enough; later starts only serve as fallbacks.
            break;
        }
    }
    best.ok_or_else(|| {
        Error::Fit(format!(
            "mode search did not converge from {} starting points",
            starts.len()
        ))
    })
}

/// Negative Hessian of the log density by central differences of the
/// exact gradient, symmetrised.
pub fn negative_hessian<T: Target + ?Sized>(target: &T, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    for j in 0..n {
        let step = 1e-5 * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        target.log_density_grad(&xp, &mut gp);
        xp[j] = x[j] - step;
        target.log_density_grad(&xp, &mut gm);
        xp[j] = x[j];
        for i in 0..n {
            h[(i, j)] = -(gp[i] - gm[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

impl LaplaceApprox {
    pub fn new<T: Target + ?Sized>(
        target: &T,
        mode: Vec<f64>,
        log_density_at_mode: f64,
    ) -> Result<Self> {
        let h = negative_hessian(target, &mode);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit(
                "non-finite Hessian at the posterior mode".into(),
            ));
        }
        let n = mode.len();
        let scale = (h.trace() / n.max(1) as f64).abs().max(1e-12);
        let mut jitter = 0.0;
        for attempt in 0..8 {
            let m = &h + DMatrix::identity(n, n) * jitter;
            if let Some(c) = m.cholesky() {
                return Ok(Self {
                    mode,
                    log_density_at_mode,
                    chol: c.l(),
                });
            }
            jitter = scale * 1e-8 * 10f64.powi(attempt);
        }
        Err(Error::Fit(
            "negative Hessian is not positive definite".into(),
        ))
    }

    /// Posterior covariance `H^-1`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.mode.len();
        let linv = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("Cholesky factor has a positive diagonal");
        linv.transpose() * linv
    }

    /// Draws `mode + L^-T z`, which have covariance `(L L^T)^-1`.
    pub fn sample<R: Rng>(&self, n_draws: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let n = self.mode.len();
        let lt = self.chol.transpose();
        (0..n_draws)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
                let y = lt
                    .solve_upper_triangular(&z)
                    .expect("Cholesky factor has a positive diagonal");
                self.mode.iter().zip(y.iter()).map(|(m, d)| m + d).collect()
            })
            .collect()
    }
}

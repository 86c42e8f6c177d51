//! M-spline bases for hazard functions and their running integrals.
//!
//! Basis functions are clamped B-splines rescaled to integrate to one over
//! their support, so a hazard `eta * sum_i p_i b_i(t)` with `sum_i p_i = 1`
//! has total integral `eta` over the boundary span. Beyond the upper
//! boundary every basis function is held at its value at the boundary,
//! which makes any hazard built from the basis exactly constant there.
//!
//! Construction: for `degree = k` the full knot vector is the lower
//! boundary repeated `k + 1` times, the interior knots, then the upper
//! boundary repeated `k + 1` times, giving `interior + k + 1` functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize, LbfgsOptions};
use crate::quadrature::GaussLegendre;

/// Number of points used when fitting constant-hazard coefficients.
const CONSTANT_FIT_GRID: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplineBasisDef {
    degree: usize,
    interior_knots: Vec<f64>,
    boundary_knots: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SplineBasisDef", into = "SplineBasisDef")]
pub struct SplineBasis {
    degree: usize,
    interior: Vec<f64>,
    lower: f64,
    upper: f64,
    /// Clamped knot vector.
    full: Vec<f64>,
    /// Distinct breakpoints `[lower, interior.., upper]`.
    breaks: Vec<f64>,
    /// `cum[m][i]` = integral of basis `i` from `lower` to `breaks[m]`.
    cum: Vec<Vec<f64>>,
    /// Basis values at the upper boundary (left limit).
    at_upper: Vec<f64>,
    rule: GaussLegendre,
}

impl TryFrom<SplineBasisDef> for SplineBasis {
    type Error = Error;

    fn try_from(d: SplineBasisDef) -> Result<Self> {
        SplineBasis::new(
            d.degree,
            d.interior_knots,
            d.boundary_knots.0,
            d.boundary_knots.1,
        )
    }
}

impl From<SplineBasis> for SplineBasisDef {
    fn from(b: SplineBasis) -> Self {
        SplineBasisDef {
            degree: b.degree,
            interior_knots: b.interior,
            boundary_knots: (b.lower, b.upper),
        }
    }
}

impl PartialEq for SplineBasis {
    fn eq(&self, other: &Self) -> bool {
        self.degree == other.degree
            && self.interior == other.interior
            && self.lower == other.lower
            && self.upper == other.upper
    }
}

impl SplineBasis {
    pub fn new(degree: usize, interior: Vec<f64>, lower: f64, upper: f64) -> Result<Self> {
        if degree > 15 {
            return Err(Error::config(format!("spline degree {degree} exceeds 15")));
        }
        if !(lower.is_finite() && upper.is_finite()) || lower < 0.0 || upper <= lower {
            return Err(Error::DegenerateKnots(format!(
                "boundary knots ({lower}, {upper}) must satisfy 0 <= lower < upper"
            )));
        }
        let mut prev = lower;
        for &k in &interior {
            if !k.is_finite() || k <= prev {
                return Err(Error::DegenerateKnots(format!(
                    "interior knots must be strictly ascending inside ({lower}, {upper}); got {interior:?}"
                )));
            }
            prev = k;
        }
        if prev >= upper {
            return Err(Error::DegenerateKnots(format!(
                "interior knot {prev} not below upper boundary {upper}"
            )));
        }

        let mut full = vec![lower; degree + 1];
        full.extend_from_slice(&interior);
        full.extend(std::iter::repeat_n(upper, degree + 1));
        let mut breaks = Vec::with_capacity(interior.len() + 2);
        breaks.push(lower);
        breaks.extend_from_slice(&interior);
        breaks.push(upper);

        let mut basis = Self {
            degree,
            interior,
            lower,
            upper,
            full,
            breaks,
            cum: Vec::new(),
            at_upper: Vec::new(),
            // Exact for polynomials up to degree 15.
            rule: GaussLegendre::new(8),
        };
        basis.at_upper = basis.eval(upper);
        let n = basis.n_basis();
        let mut cum = vec![vec![0.0; n]; basis.breaks.len()];
        let mut vals = vec![0.0; n];
        for m in 0..basis.breaks.len() - 1 {
            let (a, b) = (basis.breaks[m], basis.breaks[m + 1]);
            let mut acc = vec![0.0; n];
            for (x, w) in basis.rule.mapped(a, b) {
                basis.eval_into(x, &mut vals);
                acc.iter_mut().zip(&vals).for_each(|(s, v)| *s += w * v);
            }
            let next: Vec<f64> = cum[m].iter().zip(&acc).map(|(c, a)| c + a).collect();
            cum[m + 1] = next;
        }
        basis.cum = cum;
        Ok(basis)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    pub fn boundary_knots(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// All distinct knot locations including both boundaries.
    pub fn knots(&self) -> &[f64] {
        &self.breaks
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis()];
        self.eval_into(t, &mut out);
        out
    }

    /// Writes `(b_1(t), .., b_n(t))` into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_basis());
        out.iter_mut().for_each(|v| *v = 0.0);
        if t < self.lower || t.is_nan() {
            return;
        }
        if t >= self.upper && !self.at_upper.is_empty() {
            out.copy_from_slice(&self.at_upper);
            return;
        }
        let t = t.min(self.upper);
        let p = self.degree;
        let n = self.n_basis();
        // Largest span index with full[span] <= t < full[span + 1].
        let span = if t >= self.upper {
            n - 1
        } else {
            let idx = self.full.partition_point(|&k| k <= t) - 1;
            idx.clamp(p, n - 1)
        };

        let mut basis = [0.0f64; 16];
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        basis[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.full[span + 1 - j];
            right[j] = self.full[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = basis[r] / (right[r + 1] + left[j - r]);
                basis[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            basis[j] = saved;
        }
        for r in 0..=p {
            let i = span - p + r;
            let width = self.full[i + p + 1] - self.full[i];
            out[i] = (p + 1) as f64 * basis[r] / width;
        }
    }

    pub fn eval_integral(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis()];
        self.eval_integral_into(t, &mut out);
        out
    }

    /// Writes `(∫_0^t b_i)_i` into `out`, continuing linearly beyond the
    /// upper boundary.
    pub fn eval_integral_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_basis());
        if t <= self.lower || t.is_nan() {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        if t >= self.upper {
            let last = self.cum.last().expect("basis has breakpoints");
            let dt = t - self.upper;
            out.iter_mut()
                .zip(last.iter().zip(&self.at_upper))
                .for_each(|(o, (c, b))| *o = c + dt * b);
            return;
        }
        let m = self.breaks.partition_point(|&k| k <= t) - 1;
        out.copy_from_slice(&self.cum[m]);
        let a = self.breaks[m];
        if t > a {
            let mut vals = [0.0f64; 64];
            let n = self.n_basis();
            if n <= vals.len() {
                for (x, w) in self.rule.mapped(a, t) {
                    self.eval_into(x, &mut vals[..n]);
                    out.iter_mut()
                        .zip(&vals[..n])
                        .for_each(|(o, v)| *o += w * v);
                }
            } else {
                let mut vals = vec![0.0; n];
                for (x, w) in self.rule.mapped(a, t) {
                    self.eval_into(x, &mut vals);
                    out.iter_mut().zip(&vals).for_each(|(o, v)| *o += w * v);
                }
            }
        }
    }

    /// Random-walk scale for coefficient `i` relative to `i - 1`, for
    /// `i = 1..n`: the spacing of consecutive Greville abscissae (the
    /// mean width of the knot intervals each function spans), normalised
    /// to mean one.
    pub fn walk_weights(&self) -> Vec<f64> {
        let n = self.n_basis();
        if n < 2 {
            return Vec::new();
        }
        let p = self.degree;
        let centre = |i: usize| -> f64 {
            if p == 0 {
                0.5 * (self.full[i] + self.full[i + 1])
            } else {
                self.full[i + 1..=i + p].iter().sum::<f64>() / p as f64
            }
        };
        let diffs: Vec<f64> = (1..n).map(|i| centre(i) - centre(i - 1)).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        diffs.into_iter().map(|d| d / mean).collect()
    }
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cubic basis with knots at equally spaced quantiles of `event_times`.
pub fn make_knots(event_times: &[f64], df: usize, extra_knots: &[f64]) -> Result<SplineBasis> {
    make_knots_with_degree(event_times, df, extra_knots, 3)
}

/// Knot placement rule.
///
/// Within follow-up, `df - degree - 1` interior knots are placed at the
/// type-7 quantiles `j / (m + 1)` of the event times, so that the basis
/// has `df` functions (never fewer than `degree + 1`). Without extra
/// knots the upper boundary is the last event time. Extra knots move the
/// upper boundary to the largest of them; the last event time and the
/// remaining extra knots become interior knots.
pub fn make_knots_with_degree(
    event_times: &[f64],
    df: usize,
    extra_knots: &[f64],
    degree: usize,
) -> Result<SplineBasis> {
    if event_times.is_empty() {
        return Err(Error::DegenerateKnots("no event times".into()));
    }
    if df < 3 {
        return Err(Error::config(format!("df must be at least 3, got {df}")));
    }
    if event_times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::DegenerateKnots(
            "event times must be finite and non-negative".into(),
        ));
    }
    let mut sorted = event_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max_event = *sorted.last().unwrap();
    if max_event <= 0.0 {
        return Err(Error::DegenerateKnots("all event times are zero".into()));
    }
    let n_quantile = df.saturating_sub(degree + 1);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n_quantile + 1 {
        return Err(Error::DegenerateKnots(format!(
            "{} distinct event times cannot support {} quantile knots",
            distinct.len(),
            n_quantile
        )));
    }
    let mut interior: Vec<f64> = (1..=n_quantile)
        .map(|j| quantile_sorted(&sorted, j as f64 / (n_quantile + 1) as f64))
        .collect();
    if interior.windows(2).any(|w| w[1] <= w[0])
        || interior.first().is_some_and(|&k| k <= 0.0)
        || interior.last().is_some_and(|&k| k >= max_event)
    {
        return Err(Error::DegenerateKnots(format!(
            "tied event times give coincident quantile knots {interior:?}"
        )));
    }

    let mut extra = extra_knots.to_vec();
    extra.sort_by(f64::total_cmp);
    if let Some(&bad) = extra.iter().find(|&&k| k <= max_event) {
        return Err(Error::config(format!(
            "extra knot {bad} must exceed the last event time {max_event}"
        )));
    }
    extra.dedup();
    let upper = match extra.pop() {
        None => max_event,
        Some(last) => {
            interior.push(max_event);
            interior.extend(extra);
            last
        }
    };
    SplineBasis::new(degree, interior, 0.0, upper)
}

/// Coefficients `p` on the simplex that make `sum_i p_i b_i(t)` as flat as
/// possible over the boundary span, found by least squares on softmax
/// logits over a grid of bin midpoints.
pub fn constant_hazard_coefficients(basis: &SplineBasis) -> Result<Vec<f64>> {
    let n = basis.n_basis();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let (lo, hi) = basis.boundary_knots();
    let width = hi - lo;
    let grid: Vec<Vec<f64>> = (0..CONSTANT_FIT_GRID)
        .map(|g| basis.eval(lo + width * (g as f64 + 0.5) / CONSTANT_FIT_GRID as f64))
        .collect();
    let g_len = grid.len() as f64;

    let objective = |alpha: &[f64], grad: &mut [f64]| -> f64 {
        let p = softmax(alpha);
        // Hazards scaled by the span so the objective is O(1).
        let h: Vec<f64> = grid
            .iter()
            .map(|b| width * b.iter().zip(&p).map(|(bi, pi)| bi * pi).sum::<f64>())
            .collect();
        let mean = h.iter().sum::<f64>() / g_len;
        let mut dp = vec![0.0; n];
        let mut f = 0.0;
        for (b, hg) in grid.iter().zip(&h) {
            let r = hg - mean;
            f += r * r;
            let coef = 2.0 * r * width / g_len;
            dp.iter_mut().zip(b).for_each(|(d, bi)| *d += coef * bi);
        }
        let inner: f64 = p.iter().zip(&dp).map(|(pi, di)| pi * di).sum();
        grad.iter_mut()
            .zip(p.iter().zip(&dp))
            .for_each(|(g, (pi, di))| *g = pi * (di - inner));
        f / g_len
    };
    let opts = LbfgsOptions {
        max_iter: 20_000,
        grad_tol: 1e-13,
        f_tol: 0.0,
        ..Default::default()
    };
    let m = minimize(objective, &vec![0.0; n], &opts);
    if !m.value.is_finite() {
        return Err(Error::config("constant-hazard coefficient fit diverged"));
    }
    // Residual relative spread of the hazard; the optimum is exactly flat.
    if m.value.sqrt() > 1e-3 {
        return Err(Error::config(format!(
            "constant-hazard coefficient fit did not converge (rms deviation {:.3e})",
            m.value.sqrt()
        )));
    }
    Ok(softmax(&m.x))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

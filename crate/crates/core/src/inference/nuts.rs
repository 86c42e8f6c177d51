//! Multinomial no-U-turn sampler with a diagonal metric, dual-averaging
//! step-size adaptation and windowed metric adaptation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bayes::Target;

#[derive(Debug, Clone)]
pub struct NutsOptions {
    pub warmup: usize,
    pub iters: usize,
    pub max_treedepth: usize,
    pub target_accept: f64,
}

impl Default for NutsOptions {
    fn default() -> Self {
        Self {
            warmup: 1000,
            iters: 1000,
            max_treedepth: 10,
            target_accept: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub divergences: usize,
    pub treedepth_hits: usize,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub mean_accept: f64,
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

const MAX_DELTA_H: f64 = 1000.0;

struct Sampler<'a, T: Target + ?Sized> {
    target: &'a T,
    inv_metric: Vec<f64>,
    eps: f64,
    max_depth: usize,
    // Per-transition counters.
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

impl<T: Target + ?Sized> Sampler<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = self.target.log_density_grad(&z.q, &mut z.grad);
        if !z.logp.is_finite() {
            z.logp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.inv_metric
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                z / m.sqrt()
            })
            .collect()
    }

    /// Recursive tree doubling; `z` is the current trajectory edge.
    #[allow(clippy::too_many_arguments)]
    fn build_tree<R: Rng>(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
        rng: &mut R,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
                return false;
            }
            *log_sum_weight = log_add(*log_sum_weight, h0 - h);
            self.sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return true;
        }
        let dim = z.q.len();

        let mut p_sharp_init_end = vec![0.0; dim];
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut lsw_init,
            rng,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut p_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut lsw_final,
            rng,
        ) {
            return false;
        }

        let lsw_subtree = log_add(lsw_init, lsw_final);
        *log_sum_weight = log_add(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *z_propose = z_propose_final;
        }

        let rho_subtree: Vec<f64> = rho_init
            .iter()
            .zip(&rho_final)
            .map(|(a, b)| a + b)
            .collect();
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = no_uturn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let ext: Vec<f64> = rho_init
            .iter()
            .zip(&p_final_beg)
            .map(|(a, b)| a + b)
            .collect();
        persist &= no_uturn(p_sharp_beg, &p_sharp_final_beg, &ext);
        let ext: Vec<f64> = rho_final
            .iter()
            .zip(&p_init_end)
            .map(|(a, b)| a + b)
            .collect();
        persist &= no_uturn(&p_sharp_init_end, p_sharp_end, &ext);
        persist
    }

    /// One NUTS transition from `z0`; returns the new point and the mean
    /// acceptance statistic.
    fn transition<R: Rng>(&mut self, z0: &Point, rng: &mut R) -> (Point, f64, usize) {
        self.n_leapfrog = 0;
        self.sum_metro = 0.0;
        self.divergent = false;
        let dim = z0.q.len();

        let mut z = z0.clone();
        z.p = self.sample_momentum(rng);
        let h0 = self.hamiltonian(&z);
        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let ps = self.p_sharp(&z.p);
        let (mut p_fwd_fwd, mut p_fwd_bck, mut p_bck_fwd, mut p_bck_bck) =
            (z.p.clone(), z.p.clone(), z.p.clone(), z.p.clone());
        let (mut ps_fwd_fwd, mut ps_fwd_bck, mut ps_bck_fwd, mut ps_bck_bck) =
            (ps.clone(), ps.clone(), ps.clone(), ps);
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid;
            if rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                ps_bck_fwd.clone_from(&ps_fwd_bck);
                valid = self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut ps_fwd_bck,
                    &mut ps_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                    rng,
                );
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                ps_fwd_bck.clone_from(&ps_bck_fwd);
                valid = self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut ps_bck_fwd,
                    &mut ps_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                    rng,
                );
            }
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight
                || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp()
            {
                z_sample.clone_from(&z_propose);
            }
            log_sum_weight = log_add(log_sum_weight, lsw_subtree);

            rho = rho_bck.iter().zip(&rho_fwd).map(|(a, b)| a + b).collect();
            let mut persist = no_uturn(&ps_bck_bck, &ps_fwd_fwd, &rho);
            let ext: Vec<f64> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| a + b).collect();
            persist &= no_uturn(&ps_bck_bck, &ps_fwd_bck, &ext);
            let ext: Vec<f64> = rho_fwd.iter().zip(&p_bck_fwd).map(|(a, b)| a + b).collect();
            persist &= no_uturn(&ps_bck_fwd, &ps_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }
        let accept = if self.n_leapfrog > 0 {
            self.sum_metro / self.n_leapfrog as f64
        } else {
            0.0
        };
        (z_sample, accept, depth)
    }

    /// Doubles or halves the step size until the one-step acceptance
    /// probability crosses 0.8.
    fn init_step_size<R: Rng>(&mut self, z0: &Point, rng: &mut R) {
        let mut z = z0.clone();
        z.p = self.sample_momentum(rng);
        let h0 = self.hamiltonian(&z);
        let mut trial = z.clone();
        self.leapfrog(&mut trial, self.eps);
        let delta = h0 - self.hamiltonian(&trial);
        let up = delta > 0.8f64.ln();
        for _ in 0..100 {
            let mut z = z0.clone();
            z.p = self.sample_momentum(rng);
            let h0 = self.hamiltonian(&z);
            let mut trial = z.clone();
            self.leapfrog(&mut trial, self.eps);
            let delta = h0 - self.hamiltonian(&trial);
            if up && !(delta > 0.8f64.ln()) {
                break;
            }
            if !up && delta > 0.8f64.ln() {
                break;
            }
            self.eps = if up { self.eps * 2.0 } else { self.eps * 0.5 };
            if !(1e-10..=1e7).contains(&self.eps) {
                break;
            }
        }
        self.eps = self.eps.clamp(1e-10, 1e7);
    }
}

fn no_uturn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator of per-coordinate variances.
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    /// Variance shrunk towards a small constant, as regularisation for
    /// short windows.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warmup schedule: an initial fast interval, slow windows that double in
/// length (metric estimation), and a terminal fast interval.
struct WindowSchedule {
    init_buffer: usize,
    term_buffer: usize,
    window_end: usize,
    window_size: usize,
    warmup: usize,
}

impl WindowSchedule {
    fn new(warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        if warmup < 20 {
            return Self {
                init_buffer: warmup,
                term_buffer: 0,
                window_end: warmup,
                window_size: 0,
                warmup,
            };
        }
        if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let mut s = Self {
            init_buffer: init,
            term_buffer: term,
            window_end: init + base,
            window_size: base,
            warmup,
        };
        s.clamp_window();
        s
    }

    fn slow_end(&self) -> usize {
        self.warmup - self.term_buffer
    }

    fn clamp_window(&mut self) {
        let next_end = self.window_end + 2 * self.window_size;
        if next_end > self.slow_end() {
            self.window_end = self.slow_end();
        }
    }

    fn in_slow_phase(&self, i: usize) -> bool {
        self.window_size > 0 && i >= self.init_buffer && i < self.slow_end()
    }

    /// True if iteration `i` closes a slow window; advances the schedule.
    fn end_of_window(&mut self, i: usize) -> bool {
        if self.window_size == 0 || i + 1 != self.window_end || self.window_end > self.slow_end() {
            return false;
        }
        self.window_size *= 2;
        self.window_end += self.window_size;
        self.clamp_window();
        true
    }
}

/// Runs one chain from `init`. Draws are positions on the target's scale.
pub fn run_chain<T: Target + ?Sized, R: Rng>(
    target: &T,
    init: &[f64],
    opts: &NutsOptions,
    rng: &mut R,
) -> ChainOutput {
    let dim = target.dim();
    let mut sampler = Sampler {
        target,
        inv_metric: vec![1.0; dim],
        eps: 1.0,
        max_depth: opts.max_treedepth,
        n_leapfrog: 0,
        sum_metro: 0.0,
        divergent: false,
    };
    let mut z = Point {
        q: init.to_vec(),
        p: vec![0.0; dim],
        grad: vec![0.0; dim],
        logp: 0.0,
    };
    z.logp = target.log_density_grad(&z.q, &mut z.grad);

    sampler.init_step_size(&z, rng);
    let mut da = DualAveraging::new(sampler.eps, opts.target_accept);
    let mut schedule = WindowSchedule::new(opts.warmup);
    let mut welford = Welford::new(dim);

    for i in 0..opts.warmup {
        let (next, accept, _) = sampler.transition(&z, rng);
        z = next;
        sampler.eps = da.update(accept);
        if schedule.in_slow_phase(i) {
            welford.add(&z.q);
        }
        if schedule.end_of_window(i) {
            if welford.n >= 3.0 {
                sampler.inv_metric = welford.regularized_variance();
            }
            welford = Welford::new(dim);
            sampler.init_step_size(&z, rng);
            da = DualAveraging::new(sampler.eps, opts.target_accept);
        }
    }
    if opts.warmup > 0 {
        sampler.eps = da.final_step();
    }

    let mut draws = Vec::with_capacity(opts.iters);
    let mut divergences = 0;
    let mut treedepth_hits = 0;
    let mut accept_sum = 0.0;
    for _ in 0..opts.iters {
        let (next, accept, depth) = sampler.transition(&z, rng);
        z = next;
        if sampler.divergent {
            divergences += 1;
        }
        if depth >= opts.max_treedepth {
            treedepth_hits += 1;
        }
        accept_sum += accept;
        draws.push(z.q.clone());
    }
    ChainOutput {
        draws,
        divergences,
        treedepth_hits,
        step_size: sampler.eps,
        inv_metric: sampler.inv_metric,
        mean_accept: if opts.iters > 0 {
            accept_sum / opts.iters as f64
        } else {
            f64::NAN
        },
    }
}

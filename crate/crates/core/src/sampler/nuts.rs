use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::adapt::{MetricAdapter, StepSizeAdapter};
use super::{LogDensity, SamplerConfig};

const MAX_DELTA_H: f64 = 1000.0;

/// Per-iteration sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TransitionStats {
    pub log_density: f64,
    pub accept_stat: f64,
    pub step_size: f64,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    /// Leapfrog steps that landed where the density is `-inf`.
    pub infeasible_steps: usize,
}

/// Output of one chain after warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub dim: usize,
    /// Row-major `iters x dim`.
    pub draws: Vec<f64>,
    pub stats: Vec<TransitionStats>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
}

impl ChainDraws {
    pub fn n_draws(&self) -> usize {
        self.stats.len()
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    /// Values of coordinate `k` across draws.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        (0..self.n_draws())
            .map(|i| self.draws[i * self.dim + k])
            .collect()
    }
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Nuts<'a, M: LogDensity + ?Sized> {
    model: &'a M,
    inv_metric: Vec<f64>,
    step: f64,
    max_depth: usize,
    divergent: bool,
    infeasible: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl<M: LogDensity + ?Sized> Nuts<'_, M> {
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

    fn sample_momentum(&self, rng: &mut ChaCha8Rng, p: &mut [f64]) {
        for (pi, m) in p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *pi = n / m.sqrt();
        }
    }

    fn leapfrog(&mut self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = self.model.logp_and_grad(&z.q, &mut z.grad);
        if !z.logp.is_finite() {
            if z.logp == f64::NEG_INFINITY {
                self.infeasible += 1;
            }
            z.logp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    /// Heuristic doubling/halving until one step crosses acceptance 0.8.
    fn init_step_size(&mut self, z0: &Point, rng: &mut ChaCha8Rng) {
        let mut z = z0.clone();
        self.sample_momentum(rng, &mut z.p);
        let h0 = self.hamiltonian(&z);
        self.leapfrog(&mut z, self.step);
        let dh = h0 - self.hamiltonian(&z);
        let up = dh > 0.8f64.ln();
        for _ in 0..100 {
            let mut z = z0.clone();
            self.sample_momentum(rng, &mut z.p);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.step);
            let dh = h0 - self.hamiltonian(&z);
            if up && !(dh > 0.8f64.ln()) || !up && !(dh < 0.8f64.ln()) {
                break;
            }
            self.step *= if up { 2.0 } else { 0.5 };
            if self.step > 1e7 || self.step < 1e-12 {
                self.step = self.step.clamp(1e-12, 1e7);
                break;
            }
        }
    }

    fn transition(&mut self, current: &Point, rng: &mut ChaCha8Rng) -> (Point, TransitionStats) {
        self.divergent = false;
        self.infeasible = 0;
        let mut z = current.clone();
        self.sample_momentum(rng, &mut z.p);
        let h0 = self.hamiltonian(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let ps = self.p_sharp(&z.p);
        let mut p_sharp_fwd_bck = ps.clone();
        let mut p_sharp_fwd_fwd = ps.clone();
        let mut p_sharp_bck_fwd = ps.clone();
        let mut p_sharp_bck_bck = ps;
        let mut p_fwd_bck = z.p.clone();
        let mut p_fwd_fwd = z.p.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_bck_bck = z.p.clone();
        let mut rho = z.p.clone();

        let mut log_sum_weight = 0.0;
        let mut depth = 0;
        let mut n_leapfrog = 0;
        let mut sum_metro = 0.0;
        let dim = z.q.len();

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid;
            if rng.random::<f64>() > 0.5 {
                let mut zz = z_fwd.clone();
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.copy_from_slice(&p_fwd_bck);
                p_sharp_bck_fwd.copy_from_slice(&p_sharp_fwd_bck);
                valid = self.build_tree(
                    depth,
                    &mut zz,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut n_leapfrog,
                    &mut lsw_subtree,
                    &mut sum_metro,
                    rng,
                );
                z_fwd = zz;
            } else {
                let mut zz = z_bck.clone();
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.copy_from_slice(&p_bck_fwd);
                p_sharp_fwd_bck.copy_from_slice(&p_sharp_bck_fwd);
                valid = self.build_tree(
                    depth,
                    &mut zz,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut n_leapfrog,
                    &mut lsw_subtree,
                    &mut sum_metro,
                    rng,
                );
                z_bck = zz;
            }
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight {
                z_sample = z_propose.clone();
            } else if rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                z_sample = z_propose.clone();
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            for ((r, b), f) in rho.iter_mut().zip(&rho_bck).zip(&rho_fwd) {
                *r = b + f;
            }
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let mut ext = rho_bck.clone();
            add_assign(&mut ext, &p_fwd_bck);
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &ext);
            ext.copy_from_slice(&rho_fwd);
            add_assign(&mut ext, &p_bck_fwd);
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }

        let accept = if n_leapfrog > 0 {
            sum_metro / n_leapfrog as f64
        } else {
            0.0
        };
        let stats = TransitionStats {
            log_density: z_sample.logp,
            accept_stat: accept,
            step_size: self.step,
            tree_depth: depth,
            n_leapfrog,
            divergent: self.divergent,
            infeasible_steps: self.infeasible,
        };
        (z_sample, stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
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
        n_leapfrog: &mut usize,
        log_sum_weight: &mut f64,
        sum_metro: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.step);
            *n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            *sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            add_assign(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
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
            n_leapfrog,
            &mut lsw_init,
            sum_metro,
            rng,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
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
            n_leapfrog,
            &mut lsw_final,
            sum_metro,
            rng,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *z_propose = z_propose_final;
        }

        let mut rho_subtree = rho_init.clone();
        add_assign(&mut rho_subtree, &rho_final);
        add_assign(rho, &rho_subtree);

        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let mut ext = rho_init;
        add_assign(&mut ext, &p_final_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &ext);
        let mut ext = rho_final;
        add_assign(&mut ext, &p_init_end);
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &ext);
        persist
    }
}

#[inline]
fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Runs warmup and sampling for one chain from `init`.
pub(crate) fn run_chain<M: LogDensity + ?Sized>(
    model: &M,
    init: Vec<f64>,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> ChainDraws {
    let dim = init.len();
    let mut grad = vec![0.0; dim];
    let logp = model.logp_and_grad(&init, &mut grad);
    let mut z = Point {
        q: init,
        p: vec![0.0; dim],
        grad,
        logp,
    };
    let mut nuts = Nuts {
        model,
        inv_metric: vec![1.0; dim],
        step: 1.0,
        max_depth: config.max_depth,
        divergent: false,
        infeasible: 0,
    };
    nuts.init_step_size(&z, rng);
    let mut step_adapt = StepSizeAdapter::new(config.target_accept, nuts.step);
    let mut metric_adapt = MetricAdapter::new(dim, config.warmup);
    let mut warmup_divergences = 0;

    for _ in 0..config.warmup {
        let (next, stats) = nuts.transition(&z, rng);
        z = next;
        warmup_divergences += stats.divergent as usize;
        nuts.step = step_adapt.learn(stats.accept_stat);
        if metric_adapt.learn(&z.q, &mut nuts.inv_metric) {
            nuts.init_step_size(&z, rng);
            step_adapt.restart(nuts.step);
        }
    }
    if config.warmup > 0 {
        nuts.step = step_adapt.final_step();
    }

    let mut draws = Vec::with_capacity(config.iters * dim);
    let mut all_stats = Vec::with_capacity(config.iters);
    for _ in 0..config.iters {
        let (next, stats) = nuts.transition(&z, rng);
        z = next;
        draws.extend_from_slice(&z.q);
        all_stats.push(stats);
    }
    ChainDraws {
        dim,
        draws,
        stats: all_stats,
        step_size: nuts.step,
        inv_metric: nuts.inv_metric,
        warmup_divergences,
    }
}

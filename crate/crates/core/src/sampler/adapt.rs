/// Nesterov dual averaging of `log(step size)` toward a target acceptance.
#[derive(Debug, Clone)]
pub(crate) struct StepSizeAdapter {
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl StepSizeAdapter {
    pub fn new(target: f64, initial: f64) -> Self {
        let mut a = Self {
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: 0.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        };
        a.restart(initial);
        a
    }

    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Debug, Clone)]
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
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn restart(&mut self) {
        self.n = 0.0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }
}

/// Diagonal mass-matrix estimation over doubling warmup windows
/// (75 initial, 25 base, 50 terminal iterations; shrunk for short warmups).
#[derive(Debug, Clone)]
pub(crate) struct MetricAdapter {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
    acc: Welford,
}

impl MetricAdapter {
    pub fn new(dim: usize, warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        let enabled = warmup >= 20;
        if enabled && init_buffer + base + term_buffer > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base = warmup - (init_buffer + term_buffer);
        }
        Self {
            warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window: init_buffer + base - 1,
            counter: 0,
            enabled,
            acc: Welford::new(dim),
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn end_of_window(&self) -> bool {
        self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= last + 1 {
            self.next_window = last;
        }
    }

    /// Feeds one warmup position; returns `true` when `inv_metric` was
    /// updated.
    pub fn learn(&mut self, q: &[f64], inv_metric: &mut [f64]) -> bool {
        if !self.enabled {
            return false;
        }
        if self.in_window() {
            self.acc.add(q);
        }
        if self.end_of_window() {
            self.compute_next_window();
            let n = self.acc.n;
            for (m, s) in inv_metric.iter_mut().zip(&self.acc.m2) {
                let var = s / (n - 1.0);
                *m = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            }
            self.acc.restart();
            self.counter += 1;
            return true;
        }
        self.counter += 1;
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_follow_doubling_schedule() {
        let mut a = MetricAdapter::new(1, 1000);
        let mut m = [1.0];
        let ends: Vec<usize> = (0..1000).filter(|_| a.learn(&[0.0], &mut m)).collect();
        // 75 + 25, then doubling windows ending before the 50-iteration tail
        assert_eq!(ends, vec![99, 149, 249, 449, 949]);
    }

    #[test]
    fn short_warmup_shrinks_buffers() {
        let a = MetricAdapter::new(1, 100);
        assert_eq!((a.init_buffer, a.term_buffer, a.window_size), (15, 10, 75));
        assert!(!MetricAdapter::new(1, 10).enabled);
    }

    #[test]
    fn dual_averaging_moves_toward_target() {
        let mut a = StepSizeAdapter::new(0.8, 1.0);
        // always accepting pushes the step up
        let up = (0..20).map(|_| a.learn(1.0)).last().unwrap();
        assert!(up > 1.0);
        let mut b = StepSizeAdapter::new(0.8, 1.0);
        let down = (0..20).map(|_| b.learn(0.1)).last().unwrap();
        assert!(down < 1.0);
    }

    #[test]
    fn variance_regularization() {
        let mut a = MetricAdapter::new(1, 1000);
        let mut m = [1.0];
        for i in 0..100 {
            let v = if i % 2 == 0 { 1.0 } else { -1.0 };
            a.learn(&[v], &mut m);
        }
        // the first window holds iterations 75..=99
        let xs: Vec<f64> = (75..100)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let mean = xs.iter().sum::<f64>() / 25.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 24.0;
        let expect = 25.0 / 30.0 * var + 1e-3 * 5.0 / 30.0;
        assert!((m[0] - expect).abs() < 1e-12);
    }
}

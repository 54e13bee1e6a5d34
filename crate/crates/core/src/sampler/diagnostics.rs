use serde::Serialize;

/// R-hat above this is flagged.
pub const RHAT_THRESHOLD: f64 = 1.05;
/// Effective sample sizes below this are flagged.
pub const ESS_THRESHOLD: f64 = 100.0;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split R-hat over equal-length chains. `None` for fewer than two chains
/// or fewer than four draws per chain. Zero within-chain variance with
/// distinct chain means gives `+inf`; identical constant chains give NaN.
pub fn split_rhat(chains: &[&[f64]]) -> Option<f64> {
    if chains.len() < 2 {
        return None;
    }
    let n = chains.iter().map(|c| c.len()).min()?;
    let half = n / 2;
    if half < 2 {
        return None;
    }
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[n - half..n]);
    }
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let w = parts.iter().map(|p| sample_var(p)).sum::<f64>() / parts.len() as f64;
    let b = half as f64 * sample_var(&means);
    if w == 0.0 {
        return Some(if b > 0.0 { f64::INFINITY } else { f64::NAN });
    }
    let nf = half as f64;
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Some((var_plus / w).sqrt())
}

fn autocov(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n - lag {
        s += (x[i] - mean) * (x[i + lag] - mean);
    }
    s / n as f64
}

/// Effective sample size by Geyer's initial monotone sequence over the
/// combined chains. `None` when the draws are constant or too short.
pub fn effective_sample_size(chains: &[&[f64]]) -> Option<f64> {
    let m = chains.len();
    if m == 0 {
        return None;
    }
    let n = chains.iter().map(|c| c.len()).min()?;
    if n < 4 {
        return None;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let acov0: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| autocov(c, mu, 0))
        .collect();
    let mean_var = acov0.iter().map(|a| a * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return None;
    }
    let mean_acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let rho_at = |lag: usize| 1.0 - (mean_var - mean_acov(lag)) / var_plus;

    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho_at(1);
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 5 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho_at(t + 1);
        rho_odd = rho_at(t + 2);
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho[t - 1] + rho[t];
        if rho[t + 1] + rho[t + 2] > prev {
            rho[t + 1] = prev / 2.0;
            rho[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau =
        (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1]).max(1.0 / total.log10());
    Some(total / tau)
}

/// Convergence summary of one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateDiagnostic {
    pub name: String,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
    pub flagged: bool,
}

/// Per-coordinate diagnostics plus transition statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub chains: usize,
    pub draws_per_chain: usize,
    /// `false` with a single chain.
    pub rhat_available: bool,
    pub coordinates: Vec<CoordinateDiagnostic>,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub n_flagged: usize,
    pub divergences: usize,
    pub divergence_rate: f64,
    pub infeasible_steps: usize,
    pub infeasible_rate: f64,
    pub max_depth_hits: usize,
    pub mean_accept_stat: f64,
}

impl DiagnosticsReport {
    /// No coordinate flagged (R-hat within threshold and ESS large enough).
    pub fn is_clean(&self) -> bool {
        self.n_flagged == 0
    }
}

/// R-hat and ESS of one coordinate with the flag rule applied.
pub fn coordinate_diagnostic(name: &str, chains: &[&[f64]]) -> CoordinateDiagnostic {
    let rhat = split_rhat(chains);
    let ess = effective_sample_size(chains);
    // constant coordinates have nothing to mix
    let constant = ess.is_none() && rhat.is_some_and(f64::is_nan);
    let flagged = !constant
        && (rhat.is_some_and(|r| !(r <= RHAT_THRESHOLD)) || ess.is_none_or(|e| e < ESS_THRESHOLD));
    CoordinateDiagnostic {
        name: name.to_string(),
        rhat,
        ess,
        flagged,
    }
}

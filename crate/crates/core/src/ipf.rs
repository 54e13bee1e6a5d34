//! Classical raking by iterative proportional fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{CellTable, LoadingMatrix, MarginSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpfOptions {
    /// Relative tolerance on every margin.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IpfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

/// Output of the proportional scaling loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    pub fitted: Vec<f64>,
    pub iterations: usize,
    /// Max relative deviation per margin term after the last sweep.
    pub term_deviation: Vec<f64>,
    pub max_deviation: f64,
    pub converged: bool,
}

/// Rescales `start` cyclically over the margin terms of `loading` until every
/// margin matches `targets` to relative tolerance or `max_iter` sweeps pass.
///
/// Margins whose current total is zero are left alone.  Zeros in `start`
/// stay zero.
pub fn scale_to_margins(
    mut fitted: Vec<f64>,
    loading: &LoadingMatrix,
    targets: &[f64],
    opts: &IpfOptions,
) -> ScaleFit {
    let n_terms = loading.n_terms();
    let mut current = vec![0.0; loading.n_rows()];
    let mut iterations = 0;
    let mut term_deviation = deviations(&fitted, loading, targets, &mut current);
    let mut max_deviation = term_deviation.iter().copied().fold(0.0, f64::max);

    while iterations < opts.max_iter {
        iterations += 1;
        for t in 0..n_terms {
            let rows = loading.term_rows(t);
            let offset = rows.start;
            let sums = &mut current[rows.clone()];
            sums.iter_mut().for_each(|s| *s = 0.0);
            for (j, &x) in fitted.iter().enumerate() {
                sums[loading.rows_of(j)[t] - offset] += x;
            }
            for (s, &target) in sums.iter_mut().zip(&targets[rows]) {
                *s = if *s > 0.0 { target / *s } else { 1.0 };
            }
            for (j, x) in fitted.iter_mut().enumerate() {
                *x *= current[loading.rows_of(j)[t]];
            }
        }
        term_deviation = deviations(&fitted, loading, targets, &mut current);
        max_deviation = term_deviation.iter().copied().fold(0.0, f64::max);
        if max_deviation < opts.tol {
            break;
        }
    }

    ScaleFit {
        fitted,
        iterations,
        term_deviation,
        converged: max_deviation < opts.tol,
        max_deviation,
    }
}

fn deviations(
    fitted: &[f64],
    loading: &LoadingMatrix,
    targets: &[f64],
    scratch: &mut [f64],
) -> Vec<f64> {
    loading.apply_into(fitted, scratch);
    (0..loading.n_terms())
        .map(|t| {
            loading
                .term_rows(t)
                .map(|r| (scratch[r] - targets[r]).abs() / targets[r].max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Raking fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RakeResult {
    pub fitted: Vec<f64>,
    pub iterations: usize,
    pub term_deviation: Vec<f64>,
    pub max_deviation: f64,
    pub converged: bool,
    pub kl: f64,
}

/// Rakes the sample counts of `table` to `margins`, starting from `N·n_j/n`.
///
/// Non-convergence is reported through [`RakeResult::converged`].  A positive
/// target margin with no sampled unit behind it can never be matched and is
/// an error.
pub fn ipf_rake(table: &CellTable, margins: &MarginSet, opts: &IpfOptions) -> Result<RakeResult> {
    let loading = LoadingMatrix::for_margins(table, margins)?;
    let n = table.n_total();
    if n == 0 {
        return Err(Error::InvalidInput("raking needs a nonempty sample".into()));
    }
    let targets = margins.stacked();
    let sample_margins = loading.apply(&table.counts_f64());
    for (t, _) in margins.terms().iter().enumerate() {
        for r in loading.term_rows(t) {
            if targets[r] > 0.0 && sample_margins[r] == 0.0 {
                let row = r - loading.term_rows(t).start;
                return Err(Error::StructuralInfeasibility {
                    margin: margins.row_label(t, row),
                    target: targets[r],
                });
            }
        }
    }
    let total = margins.total();
    let scale = total / n as f64;
    let start: Vec<f64> = table.counts().iter().map(|&c| c as f64 * scale).collect();
    let fit = scale_to_margins(start, &loading, &targets, opts);
    let kl = kl_divergence(&fit.fitted, table, total);
    Ok(RakeResult {
        fitted: fit.fitted,
        iterations: fit.iterations,
        term_deviation: fit.term_deviation,
        max_deviation: fit.max_deviation,
        converged: fit.converged,
        kl,
    })
}

/// `Σ_j (N̂_j/N) log[(N̂_j/N)/(n_j/n)]`; `+∞` when fitted mass sits on an
/// empty sample cell.
pub fn kl_divergence(fitted: &[f64], table: &CellTable, total: f64) -> f64 {
    let n = table.n_total() as f64;
    let mut kl = 0.0;
    for (&f, &c) in fitted.iter().zip(table.counts()) {
        if f <= 0.0 {
            continue;
        }
        if c == 0 {
            return f64::INFINITY;
        }
        let p = f / total;
        kl += p * (p / (c as f64 / n)).ln();
    }
    kl
}

/// Per-cell raking weights `N̂_j / n_j`; `None` for empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RakeWeights {
    pub weights: Vec<Option<f64>>,
    pub undefined: usize,
}

impl RakeWeights {
    /// Weight of every unit, looked up by its cell.
    pub fn unit_weights(&self, unit_cells: &[usize]) -> Vec<f64> {
        unit_cells
            .iter()
            .map(|&j| self.weights[j].expect("sampled unit in an empty cell"))
            .collect()
    }
}

pub fn rake_weights(result: &RakeResult, table: &CellTable) -> Result<RakeWeights> {
    if !result.converged {
        return Err(Error::NotConverged {
            iterations: result.iterations,
            deviation: result.max_deviation,
        });
    }
    let weights: Vec<Option<f64>> = result
        .fitted
        .iter()
        .zip(table.counts())
        .map(|(&f, &c)| (c > 0).then(|| f / c as f64))
        .collect();
    let undefined = weights.iter().filter(|w| w.is_none()).count();
    Ok(RakeWeights { weights, undefined })
}

/// Weighted domain mean with its linearization standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMean {
    pub estimate: f64,
    pub se: f64,
    pub n_units: usize,
}

/// Ratio estimator `Σ_D w y / Σ_D w` with the with-replacement linearization
/// variance `n/(n-1) Σ_i (z_i - z̄)² / (Σ_D w)²`, `z_i = w_i 1{i∈D}(y_i - R)`.
/// Returns `None` when the domain holds no sampled unit.
pub fn weighted_domain_mean(
    unit_weights: &[f64],
    y: &[f64],
    in_domain: impl Fn(usize) -> bool,
) -> Option<WeightedMean> {
    let n = unit_weights.len();
    let mut wsum = 0.0;
    let mut wysum = 0.0;
    let mut n_units = 0;
    for i in 0..n {
        if in_domain(i) {
            wsum += unit_weights[i];
            wysum += unit_weights[i] * y[i];
            n_units += 1;
        }
    }
    if n_units == 0 || wsum <= 0.0 {
        return None;
    }
    let ratio = wysum / wsum;
    let z: Vec<f64> = (0..n)
        .map(|i| {
            if in_domain(i) {
                unit_weights[i] * (y[i] - ratio)
            } else {
                0.0
            }
        })
        .collect();
    let zbar = z.iter().sum::<f64>() / n as f64;
    let ss: f64 = z.iter().map(|v| (v - zbar).powi(2)).sum();
    let se = if n > 1 {
        (n as f64 / (n as f64 - 1.0) * ss).sqrt() / wsum
    } else {
        0.0
    };
    Some(WeightedMean {
        estimate: ratio,
        se,
        n_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{independence_init, RakingVariable};

    fn vars2() -> Vec<RakingVariable> {
        vec![
            RakingVariable::new("A", ["1", "2"]).unwrap(),
            RakingVariable::new("B", ["1", "2"]).unwrap(),
        ]
    }

    /// Plain alternating row/column scaling of a 2×2 array.
    fn alternating_oracle(n: [[f64; 2]; 2], rows: [f64; 2], cols: [f64; 2]) -> [[f64; 2]; 2] {
        let total: f64 = rows.iter().sum();
        let nn: f64 = n.iter().flatten().sum();
        let mut x = n.map(|r| r.map(|v| v * total / nn));
        for _ in 0..10_000 {
            for (a, row) in x.iter_mut().enumerate() {
                let s = row[0] + row[1];
                row.iter_mut().for_each(|v| *v *= rows[a] / s);
            }
            for b in 0..2 {
                let s = x[0][b] + x[1][b];
                for row in x.iter_mut() {
                    row[b] *= cols[b] / s;
                }
            }
            let dev = (0..2)
                .map(|a| ((x[a][0] + x[a][1]) - rows[a]).abs() / rows[a])
                .fold(0.0, f64::max);
            if dev < 1e-12 {
                break;
            }
        }
        x
    }

    #[test]
    fn two_by_two_matches_alternating_oracle() {
        let table = CellTable::from_counts(vars2(), vec![10, 20, 30, 40]).unwrap();
        let margins =
            MarginSet::one_way(&vars2(), vec![vec![50.0, 50.0], vec![60.0, 40.0]]).unwrap();
        let r = ipf_rake(&table, &margins, &IpfOptions::default()).unwrap();
        assert!(r.converged);
        let oracle = alternating_oracle([[10.0, 20.0], [30.0, 40.0]], [50.0, 50.0], [60.0, 40.0]);
        let flat = [oracle[0][0], oracle[0][1], oracle[1][0], oracle[1][1]];
        for (a, b) in r.fitted.iter().zip(flat) {
            assert!((a - b).abs() / b < 1e-7, "{a} vs {b}");
        }

        let w = rake_weights(&r, &table).unwrap();
        for ((wj, f), c) in w.weights.iter().zip(&flat).zip([10.0, 20.0, 30.0, 40.0]) {
            assert!((wj.unwrap() - f / c).abs() < 1e-7);
        }
        let total: f64 = w
            .weights
            .iter()
            .zip(table.counts())
            .map(|(w, &c)| w.unwrap() * c as f64)
            .sum();
        assert!((total - 100.0).abs() / 100.0 < 1e-10);
    }

    #[test]
    fn proportional_sample_converges_in_one_sweep() {
        let table = CellTable::from_counts(vars2(), vec![18, 42, 12, 28]).unwrap();
        let margins =
            MarginSet::one_way(&vars2(), vec![vec![60.0, 40.0], vec![30.0, 70.0]]).unwrap();
        let r = ipf_rake(&table, &margins, &IpfOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        let init = independence_init(&margins, &table).unwrap();
        for (a, b) in r.fitted.iter().zip(&init) {
            assert!((a - b).abs() < 1e-10);
        }
        let w = rake_weights(&r, &table).unwrap();
        assert!(w.weights.iter().all(|w| (w.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zeros_are_preserved() {
        let table = CellTable::from_counts(vars2(), vec![0, 5, 5, 0]).unwrap();
        let margins =
            MarginSet::one_way(&vars2(), vec![vec![50.0, 50.0], vec![50.0, 50.0]]).unwrap();
        let r = ipf_rake(&table, &margins, &IpfOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.fitted, vec![0.0, 50.0, 50.0, 0.0]);
        let w = rake_weights(&r, &table).unwrap();
        assert_eq!(w.undefined, 2);
        assert!(w.weights[0].is_none() && w.weights[3].is_none());
    }

    #[test]
    fn empty_margin_is_structurally_infeasible() {
        let table = CellTable::from_counts(vars2(), vec![5, 5, 0, 0]).unwrap();
        let margins =
            MarginSet::one_way(&vars2(), vec![vec![50.0, 50.0], vec![50.0, 50.0]]).unwrap();
        match ipf_rake(&table, &margins, &IpfOptions::default()) {
            Err(Error::StructuralInfeasibility { margin, .. }) => assert_eq!(margin, "A=2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        // diagonal zeros with unequal margins: no solution exists
        let table = CellTable::from_counts(vars2(), vec![0, 5, 5, 0]).unwrap();
        let margins =
            MarginSet::one_way(&vars2(), vec![vec![50.0, 50.0], vec![60.0, 40.0]]).unwrap();
        let r = ipf_rake(
            &table,
            &margins,
            &IpfOptions {
                tol: 1e-8,
                max_iter: 50,
            },
        )
        .unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 50);
        assert!(r.fitted.iter().all(|&v| v >= 0.0));
        assert!(rake_weights(&r, &table).is_err());
    }

    #[test]
    fn kl_examples() {
        let table = CellTable::from_counts(vars2(), vec![25, 75, 0, 0]).unwrap();
        assert_eq!(kl_divergence(&[25.0, 75.0, 0.0, 0.0], &table, 100.0), 0.0);
        let kl = kl_divergence(&[50.0, 50.0, 0.0, 0.0], &table, 100.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert_eq!(
            kl_divergence(&[50.0, 40.0, 10.0, 0.0], &table, 100.0),
            f64::INFINITY
        );
    }

    #[test]
    fn last_matched_margin_is_exact() {
        let vars = vec![
            RakingVariable::numbered("a", 3).unwrap(),
            RakingVariable::numbered("b", 4).unwrap(),
        ];
        let table = CellTable::from_counts(vars.clone(), (1..=12).collect()).unwrap();
        let margins = MarginSet::one_way(
            &vars,
            vec![vec![30.0, 30.0, 40.0], vec![10.0, 20.0, 30.0, 40.0]],
        )
        .unwrap();
        let loading = LoadingMatrix::for_margins(&table, &margins).unwrap();
        let targets = margins.stacked();
        for sweeps in 1..5 {
            let fit = scale_to_margins(
                table.counts_f64(),
                &loading,
                &targets,
                &IpfOptions {
                    tol: 0.0,
                    max_iter: sweeps,
                },
            );
            let m = loading.apply(&fit.fitted);
            for r in loading.term_rows(1) {
                assert!((m[r] - targets[r]).abs() <= 4.0 * f64::EPSILON * targets[r]);
            }
        }
    }

    #[test]
    fn weighted_mean_and_se() {
        let w = [1.0, 1.0, 2.0, 2.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let m = weighted_domain_mean(&w, &y, |_| true).unwrap();
        assert!((m.estimate - (1.0 + 3.0 + 10.0 + 14.0) / 6.0).abs() < 1e-12);
        assert!(m.se > 0.0);
        assert!(weighted_domain_mean(&w, &y, |_| false).is_none());
        let flat = weighted_domain_mean(&w, &[2.0; 4], |_| true).unwrap();
        assert!(flat.se.abs() < 1e-12);
    }
}

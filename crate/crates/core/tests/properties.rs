use bayesrake::estimate::{domain_draws, Domain, EstimateSummary};
use bayesrake::ipf::{ipf_rake, kl_divergence, IpfOptions};
use bayesrake::model::{log_lik_inclusion, Method};
use bayesrake::sampler::PosteriorDraws;
use bayesrake::sim::metrics;
use bayesrake::subspace::{null_space_basis, projection_matrix, Anchor};
use bayesrake::table::{build_table, independence_init, CellTable, LoadingMatrix, MarginSet};
use bayesrake::RakingVariable;
use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn variables(dims: &[usize]) -> Vec<RakingVariable> {
    dims.iter()
        .enumerate()
        .map(|(k, &d)| RakingVariable::numbered(format!("v{k}"), d).unwrap())
        .collect()
}

fn table(dims: &[usize], counts: Vec<u64>) -> CellTable {
    CellTable::from_counts(variables(dims), counts).unwrap()
}

/// One-way margins of a strictly positive population table.
fn one_way(dims: &[usize], pop: &[f64]) -> MarginSet {
    let terms: Vec<Vec<usize>> = (0..dims.len()).map(|k| vec![k]).collect();
    MarginSet::from_cell_counts(&variables(dims), pop, &terms).unwrap()
}

fn dims_strategy(max_k: usize, max_d: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2..=max_d, 1..=max_k)
}

/// Dimensions with strictly positive sample counts and population weights.
fn positive_problem(
    max_k: usize,
    max_d: usize,
) -> impl Strategy<Value = (Vec<usize>, Vec<u64>, Vec<f64>)> {
    dims_strategy(max_k, max_d).prop_flat_map(|dims| {
        let j: usize = dims.iter().product();
        (
            Just(dims),
            prop::collection::vec(1u64..60, j),
            prop::collection::vec(1.0f64..100.0, j),
        )
    })
}

/// Level index of each variable for a cell, last variable fastest.
fn levels_of(dims: &[usize], mut j: usize) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for k in (0..dims.len()).rev() {
        out[k] = j % dims[k];
        j /= dims[k];
    }
    out
}

fn cell_of(dims: &[usize], levels: &[usize]) -> usize {
    levels.iter().zip(dims).fold(0, |acc, (l, d)| acc * d + l)
}

fn rational_rank(mut m: Vec<Vec<BigRational>>) -> usize {
    let rows = m.len();
    let cols = m.first().map_or(0, |r| r.len());
    let zero = BigRational::from_integer(BigInt::from(0));
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows).find(|&r| m[r][c] != zero) else {
            continue;
        };
        m.swap(rank, p);
        let pivot = m[rank][c].clone();
        for r in 0..rows {
            if r != rank && m[r][c] != zero {
                let f = &m[r][c] / &pivot;
                for cc in c..cols {
                    let v = &m[rank][cc] * &f;
                    m[r][cc] -= v;
                }
            }
        }
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loading_reproduces_sample_margins((dims, counts, _) in positive_problem(3, 4)) {
        let t = table(&dims, counts.clone());
        let terms: Vec<Vec<usize>> = (0..dims.len()).map(|k| vec![k]).collect();
        let m = MarginSet::from_cell_counts(t.variables(), &t.counts_f64(), &terms).unwrap();
        let l = LoadingMatrix::for_margins(&t, &m).unwrap();
        let lv = l.apply(&t.counts_f64());
        let mut row = 0;
        for (k, &d) in dims.iter().enumerate() {
            for level in 0..d {
                let direct: u64 = (0..counts.len())
                    .filter(|&j| levels_of(&dims, j)[k] == level)
                    .map(|j| counts[j])
                    .sum();
                prop_assert_eq!(lv[row], direct as f64);
                row += 1;
            }
        }
    }

    #[test]
    fn table_building_is_deterministic(dims in dims_strategy(3, 4), seed in any::<u64>()) {
        let vars = variables(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let units: Vec<Vec<String>> = (0..200)
            .map(|_| vars.iter().map(|v| v.levels()[rng.random_range(0..v.n_levels())].clone()).collect())
            .collect();
        let a = build_table(&units, &vars).unwrap();
        let b = build_table(&units, &vars).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.n_total(), 200);
        let m = one_way(&dims, &vec![1.0; a.n_cells()]);
        let la = LoadingMatrix::for_margins(&a, &m).unwrap();
        let lb = LoadingMatrix::for_margins(&b, &m).unwrap();
        prop_assert_eq!(la, lb);
    }

    #[test]
    fn independence_init_meets_every_margin((dims, counts, pop) in positive_problem(4, 4)) {
        let t = table(&dims, counts);
        let m = one_way(&dims, &pop);
        let n0 = independence_init(&m, &t).unwrap();
        let l = LoadingMatrix::for_margins(&t, &m).unwrap();
        for (a, b) in l.apply(&n0).iter().zip(m.stacked()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn ipf_matches_margins_and_preserves_odds_ratios((dims, counts, pop) in positive_problem(3, 5)) {
        let t = table(&dims, counts.clone());
        let m = one_way(&dims, &pop);
        let fit = ipf_rake(&t, &m, &IpfOptions::default()).unwrap();
        prop_assert!(fit.converged);
        prop_assert!(fit.iterations <= 1000);
        let l = LoadingMatrix::for_margins(&t, &m).unwrap();
        for (a, b) in l.apply(&fit.fitted).iter().zip(m.stacked()) {
            prop_assert!((a - b).abs() <= 1e-8 * b, "{} vs {}", a, b);
        }
        if dims.len() >= 2 {
            // every 2x2 subtable over the first two variables, others at level 0
            let base = vec![0usize; dims.len()];
            for a1 in 0..dims[0] { for a2 in a1 + 1..dims[0] {
                for b1 in 0..dims[1] { for b2 in b1 + 1..dims[1] {
                    let at = |a: usize, b: usize| {
                        let mut lv = base.clone();
                        lv[0] = a;
                        lv[1] = b;
                        cell_of(&dims, &lv)
                    };
                    let or = |v: &dyn Fn(usize) -> f64| {
                        v(at(a1, b1)) * v(at(a2, b2)) / (v(at(a1, b2)) * v(at(a2, b1)))
                    };
                    let sample = or(&|j| counts[j] as f64);
                    let fitted = or(&|j| fit.fitted[j]);
                    prop_assert!((fitted / sample - 1.0).abs() < 1e-8);
                }}
            }}
        }
    }

    #[test]
    fn ipf_fit_is_log_linear(
        (dims, counts, pop) in (2usize..=5, 2usize..=5).prop_flat_map(|(a, b)| (
            Just(vec![a, b]),
            prop::collection::vec(1u64..60, a * b),
            prop::collection::vec(1.0f64..100.0, a * b),
        ))
    ) {
        let t = table(&dims, counts.clone());
        let m = one_way(&dims, &pop);
        let fit = ipf_rake(&t, &m, &IpfOptions::default()).unwrap();
        let (big_n, n) = (m.total(), t.n_total() as f64);
        let r: Vec<f64> = fit.fitted.iter().zip(&counts)
            .map(|(f, &c)| ((f / big_n) / (c as f64 / n)).ln())
            .collect();
        let (a, b) = (dims[0], dims[1]);
        let row = |i: usize| (0..b).map(|j| r[i * b + j]).sum::<f64>() / b as f64;
        let col = |j: usize| (0..a).map(|i| r[i * b + j]).sum::<f64>() / a as f64;
        let grand = r.iter().sum::<f64>() / r.len() as f64;
        for i in 0..a {
            for j in 0..b {
                let resid = r[i * b + j] - row(i) - col(j) + grand;
                prop_assert!(resid.abs() < 1e-8, "{}", resid);
            }
        }
    }

    #[test]
    fn ipf_minimizes_kl((dims, counts, pop) in positive_problem(3, 4), seed in any::<u64>()) {
        let t = table(&dims, counts);
        let m = one_way(&dims, &pop);
        let fit = ipf_rake(&t, &m, &IpfOptions::default()).unwrap();
        let l = LoadingMatrix::for_margins(&t, &m).unwrap();
        let basis = null_space_basis(&l);
        prop_assume!(basis.d_null() > 0);
        let total = m.total();
        let base = kl_divergence(&fit.fitted, &t, total);
        let floor = fit.fitted.iter().copied().fold(f64::INFINITY, f64::min);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let dir: Vec<f64> = (0..basis.d_null()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let step = basis.apply(&dir);
            let norm = step.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let eps = rng.random_range(0.01..0.9) * floor / norm;
            let moved: Vec<f64> = fit.fitted.iter().zip(&step).map(|(f, s)| f + eps * s).collect();
            prop_assert!(moved.iter().all(|&v| v >= 0.0));
            let kl = kl_divergence(&moved, &t, total);
            prop_assert!(kl >= base - 1e-9, "{} < {}", kl, base);
        }
    }

    #[test]
    fn null_space_dimension_matches_rational_rank(dims in dims_strategy(4, 5)) {
        let j: usize = dims.iter().product();
        prop_assume!(j <= 400);
        let t = CellTable::empty(variables(&dims)).unwrap();
        let m = one_way(&dims, &vec![1.0; j]);
        let l = LoadingMatrix::for_margins(&t, &m).unwrap();
        let dense: Vec<Vec<BigRational>> = (0..l.n_rows())
            .map(|r| (0..j).map(|c| BigRational::from_integer(BigInt::from(l.get(r, c)))).collect())
            .collect();
        let rank = rational_rank(dense);
        let d: usize = dims.iter().sum();
        let k = dims.len();
        prop_assert_eq!(rank, d - k + 1);
        prop_assert_eq!(null_space_basis(&l).d_null(), j - rank);
    }

    #[test]
    fn subspaces_coincide_and_keep_margins(
        (dims, _, pop) in positive_problem(3, 4),
        seed in any::<u64>(),
    ) {
        let t = CellTable::empty(variables(&dims)).unwrap();
        let m = one_way(&dims, &pop);
        let l = LoadingMatrix::for_margins(&t, &m).unwrap();
        let basis = null_space_basis(&l);
        prop_assume!(basis.d_null() > 0);
        let p = projection_matrix(&basis).unwrap();
        let n0 = independence_init(&m, &t).unwrap();
        let anchor = Anchor::new(n0.clone(), &l, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 5.0 * m.total() / t.n_cells() as f64;
        let tv: Vec<f64> = (0..basis.d_null()).map(|_| rng.random_range(-scale..scale)).collect();
        let v: Vec<f64> = (0..t.n_cells()).map(|_| rng.random_range(-scale..scale)).collect();
        let ct = basis.apply(&tv);
        let pv = p.apply(&v);
        // C t lies in range(P) and P v lies in range(C)
        let back = p.apply(&ct);
        let rt = basis.coordinates(&pv).unwrap();
        let recon = basis.apply(&rt);
        for k in 0..t.n_cells() {
            prop_assert!((back[k] - ct[k]).abs() < 1e-8 * scale);
            prop_assert!((recon[k] - pv[k]).abs() < 1e-8 * scale);
        }
        for offset in [&ct, &pv] {
            let x: Vec<f64> = anchor.counts().iter().zip(offset.iter()).map(|(a, o)| a + o).collect();
            for (a, b) in l.apply(&x).iter().zip(m.stacked()) {
                prop_assert!((a - b).abs() <= 1e-8 * m.total());
            }
        }
    }

    #[test]
    fn inclusion_likelihood_ignores_scale(
        cells in prop::collection::vec((0u64..30, 1.0f64..500.0, 0.01f64..0.99), 1..20),
        c in 1e-3f64..1e3,
    ) {
        let n: Vec<u64> = cells.iter().map(|x| x.0).collect();
        let big: Vec<f64> = cells.iter().map(|x| x.1).collect();
        let p: Vec<f64> = cells.iter().map(|x| x.2).collect();
        let scaled: Vec<f64> = big.iter().map(|v| v * c).collect();
        let a = log_lik_inclusion(&n, &big, &p);
        let b = log_lik_inclusion(&n, &scaled, &p);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn domain_estimates_decompose_shift_and_are_monotone(
        j in 2usize..12,
        draws in 1usize..6,
        seed in any::<u64>(),
        delta in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts: Vec<Vec<f64>> = (0..draws).map(|_| (0..j).map(|_| rng.random_range(0.1..100.0)).collect()).collect();
        let theta: Vec<Vec<f64>> = (0..draws).map(|_| (0..j).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let d = PosteriorDraws::from_cells(Method::Soft, counts.clone(), Some(theta.clone()), 1000.0).unwrap();
        let all = Domain::new("all", (0..j).collect(), j).unwrap();
        let overall = domain_draws(&d, &all).unwrap();
        // random partition into up to three domains
        let labels: Vec<usize> = (0..j).map(|_| rng.random_range(0..3)).collect();
        let parts: Vec<Domain> = (0..3)
            .filter_map(|g| {
                let cells: Vec<usize> = (0..j).filter(|&c| labels[c] == g).collect();
                Domain::new(format!("g{g}"), cells, j).ok()
            })
            .collect();
        let per_part: Vec<Vec<Option<f64>>> = parts.iter().map(|p| domain_draws(&d, p).unwrap()).collect();
        for i in 0..draws {
            let row = d.counts.row(i);
            let mut num = 0.0;
            for (p, est) in parts.iter().zip(&per_part) {
                let w: f64 = p.cells().iter().map(|&c| row[c]).sum();
                num += w * est[i].unwrap();
            }
            let total: f64 = row.iter().sum();
            prop_assert!((num / total - overall[i].unwrap()).abs() <= 1e-10 * (1.0 + overall[i].unwrap().abs()));
        }

        let shifted: Vec<Vec<f64>> = theta.iter().map(|r| r.iter().map(|v| v + delta).collect()).collect();
        let ds = PosteriorDraws::from_cells(Method::Soft, counts.clone(), Some(shifted), 1000.0).unwrap();
        for (p, est) in parts.iter().zip(&per_part) {
            for (a, b) in domain_draws(&ds, p).unwrap().iter().zip(est) {
                prop_assert!((a.unwrap() - b.unwrap() - delta).abs() < 1e-10 * (1.0 + delta.abs()));
            }
        }

        let bump = rng.random_range(0..j);
        let mut raised = theta.clone();
        for r in &mut raised {
            r[bump] += rng.random_range(0.0..3.0);
        }
        let dr = PosteriorDraws::from_cells(Method::Soft, counts, Some(raised), 1000.0).unwrap();
        for (p, est) in parts.iter().zip(&per_part) {
            if p.contains(bump) {
                for (a, b) in domain_draws(&dr, p).unwrap().iter().zip(est) {
                    prop_assert!(a.unwrap() >= b.unwrap() - 1e-12);
                }
            }
        }
    }

    #[test]
    fn replication_metrics_are_consistent(
        est in prop::collection::vec(prop::option::weighted(0.9, (-10.0f64..10.0, 0.0f64..5.0)), 1..60),
        truth in -10.0f64..10.0,
    ) {
        let e: Vec<Option<EstimateSummary>> = est.iter().map(|o| o.map(|(m, h)| EstimateSummary {
            domain: "d".into(),
            mean: m,
            se: h / 1.96,
            lower: m - h,
            upper: m + h,
            n_draws: 0,
            n_missing: 0,
        })).collect();
        let r = metrics("d", &e, truth);
        let got: Vec<f64> = est.iter().flatten().map(|x| x.0).collect();
        prop_assert_eq!(r.n, got.len());
        if got.is_empty() {
            return Ok(());
        }
        let n = got.len() as f64;
        let mean = got.iter().sum::<f64>() / n;
        let var = got.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(r.rmse + 1e-12 >= r.bias.abs());
        prop_assert!((0.0..=1.0).contains(&r.coverage));
        prop_assert!((r.rmse.powi(2) - r.bias.powi(2) - var).abs() <= 1e-10 * (1.0 + r.rmse.powi(2)));
    }
}

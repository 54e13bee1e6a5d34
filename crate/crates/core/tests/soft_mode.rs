use bayesrake::sampler::{sample_posterior, SamplerConfig};
use bayesrake::table::{CellTable, LoadingMatrix, MarginSet};
use bayesrake::{BayesRakeModel, Method, ModelConfig, RakingVariable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Limited-memory BFGS maximizer with Armijo backtracking.
fn lbfgs_max(f: impl Fn(&[f64], &mut [f64]) -> f64, mut x: Vec<f64>, iters: usize) -> Vec<f64> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = -f(&x, &mut g);
    g.iter_mut().for_each(|v| *v = -*v);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for _ in 0..iters {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-9 {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            q.iter_mut().for_each(|v| *v /= gnorm.max(1.0));
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let slope = dot(&g, &dir);
        let mut step = 1.0;
        let mut g_new = vec![0.0; n];
        let (x_new, f_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let fc = -f(&cand, &mut g_new);
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                break (cand, fc);
            }
            step *= 0.5;
            if step < 1e-20 {
                return x;
            }
        };
        g_new.iter_mut().for_each(|v| *v = -*v);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            hist.push((s, y, 1.0 / sy));
            if hist.len() > 10 {
                hist.remove(0);
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fixture(scale: f64) -> (CellTable, MarginSet) {
    let vars = vec![
        RakingVariable::new("a", ["x", "y", "z"]).unwrap(),
        RakingVariable::new("b", ["u", "v", "w"]).unwrap(),
    ];
    let pop = [120.0, 80.0, 200.0, 60.0, 150.0, 90.0, 300.0, 100.0, 400.0];
    let pop: Vec<f64> = pop.iter().map(|v| v * scale).collect();
    // every cell observed, unequal sampling fractions
    let frac = [0.3, 0.2, 0.25, 0.1, 0.15, 0.3, 0.2, 0.1, 0.05];
    let counts: Vec<u64> = pop
        .iter()
        .zip(frac)
        .map(|(n, f)| (n * f).round() as u64)
        .collect();
    let table = CellTable::from_counts(vars.clone(), counts).unwrap();
    let margins = MarginSet::from_cell_counts(&vars, &pop, &[vec![0], vec![1]]).unwrap();
    (table, margins)
}

#[test]
fn soft_mode_concentrates_on_margins() {
    for scale in [1.0, 10.0, 100.0] {
        let (table, margins) = fixture(scale);
        let model =
            BayesRakeModel::new(ModelConfig::new(Method::Soft), &table, &margins, None).unwrap();
        let x0 = model
            .initial_point(&mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let mode = lbfgs_max(|x, g| model.logp_and_grad(x, g), x0, 5000);
        let counts = model.cell_counts(&mode);
        let l = LoadingMatrix::for_margins(&table, &margins).unwrap();
        let stacked = margins.stacked();
        let bound = 3.0 / stacked.iter().copied().fold(f64::INFINITY, f64::min).sqrt();
        let mut grad = vec![0.0; mode.len()];
        model.logp_and_grad(&mode, &mut grad);
        assert!(
            grad.iter().all(|g| g.abs() < 1e-2),
            "not at a mode: {grad:?}"
        );
        for (fit, target) in l.apply(&counts).iter().zip(&stacked) {
            let rel = (fit - target).abs() / target;
            assert!(
                rel <= bound,
                "scale {scale}: {fit} vs {target}, {rel} > {bound}"
            );
        }
    }
}

#[test]
fn seed_config_and_data_fix_every_draw() {
    let (table, margins) = fixture(1.0);
    let model =
        BayesRakeModel::new(ModelConfig::new(Method::Basis), &table, &margins, None).unwrap();
    let config = SamplerConfig {
        chains: 2,
        warmup: 150,
        iters: 100,
        seed: 99,
        ..SamplerConfig::default()
    };
    let a = sample_posterior(&model, &config).unwrap();
    let b = sample_posterior(&model, &config).unwrap();
    let bits = |d: &bayesrake::PosteriorDraws| -> Vec<u64> {
        d.params
            .rows()
            .flatten()
            .chain(d.counts.rows().flatten())
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    let c = sample_posterior(
        &model,
        &SamplerConfig {
            seed: 100,
            ..config
        },
    )
    .unwrap();
    assert_ne!(bits(&a), bits(&c));
}

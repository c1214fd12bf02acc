use hawkes_scaling::bernstein::PotentialMeasure;
use hawkes_scaling::grid::GridFunction;
use hawkes_scaling::sve::{
    cir_mean, ensemble_summary, pi0_form_mean, simulate_atom_form, simulate_density_form, simulate_ensemble, simulate_pi0_form,
    simulate_power_cir, CirParams, LimitBaseline, SvePath,
};
use hawkes_scaling::Matrix;
use proptest::prelude::*;

const DELTA: f64 = 0.01;

fn exp_cells(rate: f64, scale: f64, n: usize) -> Vec<Matrix> {
    (0..n)
        .map(|j| {
            let (t0, t1) = (j as f64 * DELTA, (j + 1) as f64 * DELTA);
            let m = if rate == 0.0 { DELTA } else { ((-rate * t0).exp() - (-rate * t1).exp()) / rate };
            Matrix::scalar(scale * m)
        })
        .collect()
}

fn check_path(p: &SvePath) -> std::result::Result<(), TestCaseError> {
    prop_assert!(p.is_monotone());
    if let Some(xi) = &p.density {
        prop_assert!(xi.iter().all(|v| v.iter().all(|x| *x >= 0.0)));
    }
    prop_assert!(p.martingale[0].iter().all(|x| *x == 0.0));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn density_paths_are_monotone_and_nonnegative(rate in 0.0f64..3.0, scale in 0.0f64..3.0, up in 0.0f64..2.0, seed in any::<u64>()) {
        let pi = PotentialMeasure::new(DELTA, Matrix::scalar(0.0), exp_cells(rate, scale, 100)).unwrap();
        let base = LimitBaseline::linear(&[up], DELTA, 1.0).unwrap();
        let p = simulate_density_form(&pi, &base, 1.0, seed, 0).unwrap();
        check_path(&p)?;
        prop_assert_eq!(p.integrated[0][0], 0.0);
    }

    #[test]
    fn atom_paths_are_monotone(atom in 0.0f64..2.0, scale in 0.0f64..2.0, up in 0.0f64..2.0, seed in any::<u64>()) {
        let pi = PotentialMeasure::new(DELTA, Matrix::scalar(atom), exp_cells(0.0, scale, 100)).unwrap();
        let base = LimitBaseline::linear(&[up], DELTA, 1.0).unwrap();
        check_path(&simulate_atom_form(&pi, &base, 1.0, seed, 3).unwrap())?;
    }

    #[test]
    fn power_cir_paths_are_monotone(alpha in 0.55f64..=1.0, beta in 0.0f64..1.0, a in 0.0f64..2.0, b in -0.5f64..1.0, c in 0.5f64..2.0, seed in any::<u64>()) {
        let p = simulate_power_cir(&CirParams::scalar(alpha, beta, a, b, c), 1.0, DELTA, seed, 1).unwrap();
        check_path(&p)?;
    }

    #[test]
    fn pi0_paths_are_monotone(b in 0.0f64..1.0, g0 in 0.0f64..2.0, slope in 0.0f64..1.0, seed in any::<u64>()) {
        let pi0 = PotentialMeasure::lebesgue(1, DELTA, 1.0, 1.0).unwrap();
        let gamma = GridFunction::new(DELTA, (0..=100).map(|k| vec![g0 + slope * k as f64 * DELTA]).collect()).unwrap();
        check_path(&simulate_pi0_form(&pi0, &Matrix::scalar(b), &gamma, None, 1.0, seed, 2).unwrap())?;
    }
}

#[test]
fn ensembles_do_not_depend_on_worker_count() {
    let p = CirParams::scalar(0.75, 0.0, 1.0, 0.5, 1.0);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_ensemble(64, |i| simulate_power_cir(&p, 1.0, DELTA, 5, i)).unwrap())
    };
    assert_eq!(run(1), run(3));
}

fn check_moments(name: &str, paths: &[SvePath], mean_xi: &dyn Fn(usize) -> f64) {
    let s = ensemble_summary(paths).unwrap();
    let last = paths[0].len() - 1;
    for k in [last / 2, last] {
        let r = &s.rows[k];
        let target = mean_xi(k);
        assert!((r.mean_xi - target).abs() <= 3.0 * r.se_xi, "{name} t={}: {} vs {target} ({})", r.t, r.mean_xi, r.se_xi);
        assert!((r.var_m - r.mean_xi).abs() <= 5.0 * r.var_m_se, "{name} t={}: Var M {} vs {}", r.t, r.var_m, r.mean_xi);
    }
    assert!(s.truncation_rate <= 0.2, "{name}: truncation rate {}", s.truncation_rate);
}

#[test]
fn mean_and_quadratic_variation_identities_for_every_scheme() {
    let n = 10_000;
    let pi = PotentialMeasure::new(DELTA, Matrix::scalar(0.0), exp_cells(1.0, 1.0, 100)).unwrap();
    let base = LimitBaseline::linear(&[1.0], DELTA, 1.0).unwrap();
    let paths = simulate_ensemble(n, |i| simulate_density_form(&pi, &base, 1.0, 71, i)).unwrap();
    check_moments("density", &paths, &|k| k as f64 * DELTA);

    let pi = PotentialMeasure::new(DELTA, Matrix::scalar(0.2), exp_cells(0.0, 1.0, 100)).unwrap();
    let paths = simulate_ensemble(n, |i| simulate_atom_form(&pi, &base, 1.0, 72, i)).unwrap();
    check_moments("atom", &paths, &|k| k as f64 * DELTA);

    let p = CirParams::scalar(0.75, 0.0, 1.0, 0.5, 1.0);
    let m = cir_mean(&p, 1.0, DELTA).unwrap();
    let mut integrated = vec![0.0];
    for k in 0..100 {
        integrated.push(integrated[k] + DELTA * m[k][0]);
    }
    let paths = simulate_ensemble(n, |i| simulate_power_cir(&p, 1.0, DELTA, 73, i)).unwrap();
    check_moments("rough cir", &paths, &|k| integrated[k]);

    let pi0 = PotentialMeasure::lebesgue(1, DELTA, 1.0, 1.0).unwrap();
    let gamma = GridFunction::new(DELTA, (0..=100).map(|k| vec![1.0 + 0.3 * k as f64 * DELTA]).collect()).unwrap();
    let b = Matrix::scalar(0.3);
    let mean = pi0_form_mean(&pi0, &b, &gamma, 1.0).unwrap();
    let paths = simulate_ensemble(n, |i| simulate_pi0_form(&pi0, &b, &gamma, None, 1.0, 74, i)).unwrap();
    check_moments("pi0", &paths, &|k| mean[k][0]);
    assert!((mean[100][0] - 1.0).abs() < 1e-2);
}

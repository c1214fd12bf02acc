//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits with a
//! failure status if any criterion fails.

use std::time::Instant;

use hawkes_scaling::bernstein::{
    closed_form_drift, potential_from_resolvent_eq, potential_inversion_gs, potential_measure_closed_form, resolvent_eq_residuals,
    ExtendedBernsteinMatrix, PotentialMeasure, DEFAULT_GS_ORDER,
};
use hawkes_scaling::grid::GridFunction;
use hawkes_scaling::hawkes::{baseline_h, mc_fourier_laplace, simulate_path, ExogenousInput, SimOptions};
use hawkes_scaling::kernels::{resolvent_grid, Kernel, KernelEntry, ScalingScheme};
use hawkes_scaling::matlin::{block_inverse_2x2, build_admissible, real_schur, spectral_radius};
use hawkes_scaling::mc::{ks_two_sample, mean_se, path_rng};
use hawkes_scaling::riccati::{
    fourier_laplace_hawkes, prelimit_bound_violation, riccati_convergence_report, solve_limit, solve_prelimit, PrelimitCase, TestFunctions,
};
use hawkes_scaling::sve::{
    cir_mean, simulate_atom_form, simulate_density_form, simulate_ensemble, simulate_pi0_form, simulate_power_cir, CirParams, LimitBaseline,
};
use hawkes_scaling::{Matrix, C64};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn run(id: usize, name: &str, limit_s: f64, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = check();
    let secs = start.elapsed().as_secs_f64();
    let pass = out.pass && secs < limit_s;
    println!(
        "criterion {id:>2} {}: {name}: {} [{secs:.2} s, limit {limit_s} s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    pass
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn exp_cells(rate: f64, scale: f64, delta: f64, n: usize) -> Vec<Matrix> {
    (0..n)
        .map(|j| {
            let (t0, t1) = (j as f64 * delta, (j + 1) as f64 * delta);
            let m = if rate == 0.0 { delta } else { ((-rate * t0).exp() - (-rate * t1).exp()) / rate };
            Matrix::scalar(scale * m)
        })
        .collect()
}

fn resolvent_oracle() -> Outcome {
    let phi = Kernel::scalar(KernelEntry::Exponential { a: 0.5, b: 1.0 }).unwrap();
    let err = |delta: f64| {
        let r = resolvent_grid(&phi, delta, 5.0).unwrap();
        r.values.iter().enumerate().map(|(k, m)| (m[(0, 0)] - 0.5 * (-0.5 * k as f64 * delta).exp()).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (err(1e-3), err(5e-4));
    let ratio = e1 / e2;
    Outcome { pass: e1 <= 5e-4 && (1.7..=2.3).contains(&ratio), detail: format!("max error {e1:.3e}, halving ratio {ratio:.3}") }
}

fn tanh_oracle() -> Outcome {
    let delta = 1e-3;
    let pi = PotentialMeasure::lebesgue(1, delta, 1.0, 1.0).unwrap();
    let tf = TestFunctions::constant(delta, 1.0, &[c(-0.5, 0.0)], &[c(0.0, 0.0)]).unwrap();
    let sol = solve_limit(&pi, &tf, 1.0).unwrap();
    let gap = (sol.v.values[sol.v.last()][0] + 0.5f64.tanh()).norm();
    Outcome { pass: gap <= 1e-3, detail: format!("|V(1) + tanh(0.5)| = {gap:.3e}") }
}

fn atom_oracle() -> Outcome {
    let delta = 1e-2;
    let pi = PotentialMeasure::dirac(delta, 1.0, Matrix::scalar(1.0)).unwrap();
    let tf = TestFunctions::constant(delta, 1.0, &[c(-0.5, 0.0)], &[c(0.0, 0.0)]).unwrap();
    let sol = solve_limit(&pi, &tf, 1.0).unwrap();
    let target = 1.0 - 2f64.sqrt();
    let gap = sol.v.values.iter().map(|v| (v[0] - c(target, 0.0)).norm()).fold(0.0, f64::max);
    Outcome { pass: gap <= 1e-12, detail: format!("sup |V - (1 - sqrt 2)| = {gap:.3e}") }
}

fn exponential_affine_identity() -> Outcome {
    let phi = Kernel::scalar(KernelEntry::Exponential { a: 0.5, b: 1.0 }).unwrap();
    let mu = ExogenousInput::constant(vec![1.0]);
    let horizon = 3.0;
    let (f, h) = ([c(-0.3, 0.0)], [c(0.0, 0.5)]);
    let delta = 1e-3;
    let tf = TestFunctions::constant(delta, horizon, &f, &h).unwrap();
    let sol = solve_prelimit(&resolvent_grid(&phi, delta, horizon).unwrap(), &tf, horizon).unwrap();
    let base = baseline_h(&phi, &mu, delta, horizon).unwrap();
    let exact = fourier_laplace_hawkes(&sol, &base.h, horizon).unwrap();
    let tf_mc = TestFunctions::constant(1e-2, horizon, &f, &h).unwrap();
    let est = mc_fourier_laplace(&phi, &mu, &tf_mc, horizon, 20_000, 2024).unwrap();
    let gap = (est.mean - exact).norm();
    Outcome {
        pass: gap <= 3.0 * est.se + 1e-2,
        detail: format!("MC {:.5}{:+.5}i (SE {:.2e}) vs Riccati {:.5}{:+.5}i, gap {gap:.3e}", est.mean.re, est.mean.im, est.se, exact.re, exact.im),
    }
}

fn hawkes_moment() -> Outcome {
    let phi = Kernel::scalar(KernelEntry::Exponential { a: 0.5, b: 1.0 }).unwrap();
    let mu = ExogenousInput::constant(vec![1.0]);
    let counts: Vec<f64> = (0..10_000u64)
        .map(|i| simulate_path(&phi, &mu, 2.0, 55, i, &SimOptions::default()).unwrap().total_events() as f64)
        .collect();
    let (m, se) = mean_se(&counts);
    let exact = 2.0 + 2.0 * (-1.0f64).exp();
    Outcome { pass: (m - exact).abs() <= 3.0 * se, detail: format!("E[N(2)] {m:.4} (SE {se:.4}) vs I_H(2) = {exact:.4}") }
}

fn mean_check(name: &str, xs: Vec<f64>, target: f64) -> (bool, String) {
    let (m, se) = mean_se(&xs);
    ((m - target).abs() <= 3.0 * se, format!("{name} {m:.4}/{target:.4} (SE {se:.4})"))
}

fn sve_moment(scheme: &str) -> Outcome {
    let (delta, horizon, n) = (0.01, 1.0, 10_000);
    let base = LimitBaseline::linear(&[1.0], delta, horizon).unwrap();
    let (paths, targets): (Vec<_>, Box<dyn Fn(usize) -> f64>) = match scheme {
        "density" => {
            let pi = PotentialMeasure::new(delta, Matrix::scalar(0.0), exp_cells(1.0, 1.0, delta, 100)).unwrap();
            (simulate_ensemble(n, |i| simulate_density_form(&pi, &base, horizon, 301, i)).unwrap(), Box::new(move |k| k as f64 * delta))
        }
        "atom" => {
            let pi = PotentialMeasure::new(delta, Matrix::scalar(0.2), exp_cells(0.0, 1.0, delta, 100)).unwrap();
            (simulate_ensemble(n, |i| simulate_atom_form(&pi, &base, horizon, 302, i)).unwrap(), Box::new(move |k| k as f64 * delta))
        }
        "rough_cir" => {
            let p = CirParams::scalar(0.75, 0.0, 1.0, 0.5, 1.0);
            let m = cir_mean(&p, horizon, delta).unwrap();
            let mut acc = vec![0.0];
            for k in 0..100 {
                acc.push(acc[k] + delta * m[k][0]);
            }
            (simulate_ensemble(n, |i| simulate_power_cir(&p, horizon, delta, 303, i)).unwrap(), Box::new(move |k| acc[k]))
        }
        _ => {
            let pi0 = PotentialMeasure::lebesgue(1, delta, horizon, 1.0).unwrap();
            let gamma = GridFunction::new(delta, (0..=100).map(|k| vec![1.0 + 0.3 * k as f64 * delta]).collect()).unwrap();
            let b = Matrix::scalar(0.3);
            (simulate_ensemble(n, |i| simulate_pi0_form(&pi0, &b, &gamma, None, horizon, 304, i)).unwrap(), Box::new(move |k| k as f64 * delta))
        }
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for k in [50, 100] {
        let (ok, d) = mean_check(&format!("E[Xi({})]", k as f64 * delta), paths.iter().map(|p| p.integrated[k][0]).collect(), targets(k));
        pass &= ok;
        detail.push(d);
    }
    Outcome { pass, detail: format!("{scheme}: {}", detail.join(", ")) }
}

fn random_tf(rng: &mut impl Rng, d: usize, delta: f64, horizon: f64) -> TestFunctions {
    let (u, decay, im_f, amp, omega) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..5.0));
    TestFunctions::from_fn(
        d,
        delta,
        horizon,
        move |t| vec![c(-u * (-decay * t).exp(), im_f * (omega * t).sin()); d],
        move |t| vec![c(0.0, amp * (omega * t).cos()); d],
    )
    .unwrap()
}

fn sandwich() -> Outcome {
    let mut rng = path_rng(6, 0);
    let (delta, horizon) = (0.01, 2.0);
    let mut worst: (f64, f64, f64, f64) = (0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for case in 0..5 {
        let a = rng.random_range(0.05..0.9);
        let phi = match case % 3 {
            0 => Kernel::scalar(KernelEntry::Exponential { a, b: rng.random_range(0.3..3.0) }).unwrap(),
            1 => Kernel::scalar(KernelEntry::Gammaish { a, alpha: rng.random_range(0.4..2.0), beta: rng.random_range(0.5..3.0) }).unwrap(),
            _ => Kernel::new(
                2,
                vec![
                    KernelEntry::Exponential { a: 0.5 * a, b: 1.0 },
                    KernelEntry::PowerLaw { a: 0.3 * a, kappa: 1.5, beta: 0.0 },
                    KernelEntry::Uniform { a: 0.2, lo: 0.0, hi: 1.0 },
                    KernelEntry::Exponential { a: 0.4 * a, b: 2.0 },
                ],
            )
            .unwrap(),
        };
        let tf = random_tf(&mut rng, phi.d, delta, horizon);
        let sol = solve_prelimit(&resolvent_grid(&phi, delta, horizon).unwrap(), &tf, horizon).unwrap();
        let (re, im) = prelimit_bound_violation(&phi, &tf, &sol).unwrap();
        let atom = rng.random_range(0.0..1.0);
        let pi = PotentialMeasure::new(delta, Matrix::scalar(atom), exp_cells(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), delta, 200)).unwrap();
        let limit = solve_limit(&pi, &random_tf(&mut rng, 1, delta, horizon), horizon).unwrap();
        worst = (worst.0.max(re), worst.1.max(im), worst.2.max(sol.max_re_v), worst.3.max(limit.max_re_v));
    }
    Outcome {
        pass: worst.0 == 0.0 && worst.1 == 0.0 && worst.2 <= 1e-8 && worst.3 <= 1e-8,
        detail: format!("bound violations re {:.1e} im {:.1e}; max Re V {:.3e}; max Re limit V {:.3e}", worst.0, worst.1, worst.2, worst.3),
    }
}

fn scaling_convergence() -> Outcome {
    let (a_mu, b, cc) = (1.0, 0.5, 1.0);
    let (delta, horizon) = (1e-3, 2.0);
    let k = 2000;
    let pi = PotentialMeasure::new(delta, Matrix::scalar(0.0), exp_cells(b / cc, 1.0 / cc, delta, k)).unwrap();
    let upsilon = GridFunction::new(
        delta,
        (0..=k)
            .map(|j| {
                let t = j as f64 * delta;
                vec![a_mu / b * (t - cc / b * (1.0 - (-b * t / cc).exp()))]
            })
            .collect(),
    )
    .unwrap();
    let tf = TestFunctions::constant(delta, horizon, &[c(-0.5, 0.0)], &[c(0.0, 0.5)]).unwrap();
    let cases: Vec<PrelimitCase> = [100u64, 1000, 10_000]
        .iter()
        .map(|&n| {
            let nf = n as f64;
            PrelimitCase {
                phi_n: Kernel::scalar(KernelEntry::Exponential { a: (1.0 - b / nf) / cc, b: 1.0 / cc }).unwrap(),
                scheme: ScalingScheme::new(n, nf).unwrap(),
                mu_n: ExogenousInput::constant(vec![a_mu]),
            }
        })
        .collect();
    let report = riccati_convergence_report(&cases, &pi, &upsilon, &tf, horizon).unwrap();
    let gaps: Vec<String> = report.rows.iter().map(|r| format!("n={} gap {:.3e}", r.n, r.fl_gap)).collect();
    let last = report.rows.last().unwrap().fl_gap;
    Outcome { pass: report.monotone && last <= 5e-2, detail: gaps.join(", ") }
}

fn potential_cross_validation() -> Outcome {
    let s = build_admissible(&Matrix::scalar(1.0), 1e-12).unwrap();
    let delta = 1e-3;
    let f = ExtendedBernsteinMatrix::scalar_affine(1.0, 1.0).unwrap();
    let gs = potential_inversion_gs(&s, &f, delta, 2.0, DEFAULT_GS_ORDER).unwrap();
    let pi0 = PotentialMeasure::lebesgue(1, delta, 2.0, 1.0).unwrap();
    let pi = potential_from_resolvent_eq(&pi0, &Matrix::scalar(1.0)).unwrap();
    let gap1 = gs.measure.sup_gap(&pi).unwrap();
    let f = ExtendedBernsteinMatrix::scalar_power(0.0, 1.0, 0.5, 0.0).unwrap();
    let gs = potential_inversion_gs(&s, &f, delta, 2.0, DEFAULT_GS_ORDER).unwrap().measure.cumulative();
    let closed = potential_measure_closed_form(&f, delta, 2.0).unwrap().cumulative();
    let gap2 = gs
        .values
        .iter()
        .zip(&closed.values)
        .enumerate()
        .filter(|(k, _)| *k as f64 * delta >= 0.1 - 1e-12)
        .map(|(_, (x, y))| (x[(0, 0)] - y[(0, 0)]).abs())
        .fold(0.0, f64::max);
    Outcome { pass: gap1 <= 1e-3 && gap2 <= 1e-3, detail: format!("1+lambda GS vs resolvent route {gap1:.3e}; lambda^1/2 GS vs closed form {gap2:.3e}") }
}

fn resolvent_equation() -> Outcome {
    let delta = 1e-2;
    let mut triplets = Vec::new();
    triplets.push((PotentialMeasure::lebesgue(1, delta, 5.0, 1.0).unwrap(), Matrix::scalar(1.0)));
    let f = ExtendedBernsteinMatrix::scalar_power(0.4, 1.3, 0.6, 0.5).unwrap();
    triplets.push((potential_measure_closed_form(&f, delta, 5.0).unwrap(), closed_form_drift(&f).unwrap()));
    let sigma = Matrix::from_diag(&[1.0, 2.0]);
    let f = ExtendedBernsteinMatrix::affine(Matrix::from_rows(&[vec![0.3, 0.1], vec![0.2, 0.4]]), sigma).unwrap();
    triplets.push((potential_measure_closed_form(&f, delta, 5.0).unwrap(), f.b.clone()));
    let mut worst: f64 = 0.0;
    for (pi0, b) in &triplets {
        let pi = potential_from_resolvent_eq(pi0, b).unwrap();
        let (r1, r2) = resolvent_eq_residuals(pi0, &pi, b).unwrap();
        worst = worst.max(r1).max(r2);
    }
    Outcome { pass: worst <= 1e-8, detail: format!("largest residual over 3 triplets and both orderings {worst:.3e}") }
}

fn sve_equivalence() -> Outcome {
    let (delta, horizon, n) = (0.01, 1.0, 5000);
    let pi0 = PotentialMeasure::lebesgue(1, delta, horizon, 1.0).unwrap();
    let b = Matrix::scalar(0.3);
    let pi = potential_from_resolvent_eq(&pi0, &b).unwrap();
    let base = LimitBaseline::linear(&[1.0], delta, horizon).unwrap();
    let gamma = GridFunction::new(delta, (0..=100).map(|k| vec![1.0 + 0.3 * k as f64 * delta]).collect()).unwrap();
    let a: Vec<f64> = simulate_ensemble(n, |i| simulate_density_form(&pi, &base, horizon, 1001, i)).unwrap().iter().map(|p| p.integrated[100][0]).collect();
    let b_form: Vec<f64> = simulate_ensemble(n, |i| simulate_pi0_form(&pi0, &b, &gamma, None, horizon, 2002, i)).unwrap().iter().map(|p| p.integrated[100][0]).collect();
    let (d, crit) = ks_two_sample(&a, &b_form);
    Outcome { pass: d <= crit, detail: format!("KS distance {d:.4}, 1% critical value {crit:.4}") }
}

fn matrix_suite() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let cases = [
        (Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]), 1.0),
        (Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]), 0.0),
        (Matrix::from_rows(&[vec![0.6, 0.3], vec![0.2, 0.7]]), 0.9),
    ];
    let worst_rho = cases.iter().map(|(a, r)| (spectral_radius(a, 1e-12).unwrap() - r).abs()).fold(0.0, f64::max);
    ok &= worst_rho <= 1e-8;
    notes.push(format!("spectral radius error {worst_rho:.1e}"));

    let (q, u) = real_schur(&cases[0].0, 1e-12).unwrap();
    let h = 0.5f64.sqrt();
    let rot = Matrix::from_rows(&[vec![h, -h], vec![h, h]]);
    let schur_ex = (&q - &rot).max_abs().max((&u - &Matrix::from_diag(&[1.0, 0.0])).max_abs());
    let tri = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.5]]);
    let (q2, u2) = real_schur(&tri, 1e-12).unwrap();
    let tri_ex = (&q2 - &Matrix::identity(2)).max_abs().max((&u2 - &tri).max_abs());
    ok &= schur_ex <= 1e-12 && tri_ex <= 1e-12;
    let mut rng = path_rng(11, 0);
    let mut worst_rec: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=4);
        let a = Matrix::new(d, d, (0..d * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (q, u) = real_schur(&a, 1e-12).unwrap();
        let rec = (&a - &(&(&q * &u) * &q.transpose())).norm_inf() / a.norm_inf();
        let orth = (&(&q.transpose() * &q) - &Matrix::identity(d)).norm_inf();
        worst_rec = worst_rec.max(rec).max(orth);
    }
    ok &= worst_rec <= 1e-10;
    notes.push(format!("Schur examples {:.1e}, reconstruction {worst_rec:.1e}", schur_ex.max(tri_ex)));

    let one = |x: f64| Matrix::scalar(x);
    let diag = block_inverse_2x2(&one(2.0), &one(0.0), &one(0.0), &one(4.0)).unwrap();
    let mut worst_inv = (&diag - &Matrix::from_diag(&[0.5, 0.25])).max_abs();
    let id = block_inverse_2x2(&Matrix::identity(2), &Matrix::zeros(2, 2), &Matrix::zeros(2, 2), &Matrix::identity(2)).unwrap();
    worst_inv = worst_inv.max((&id - &Matrix::identity(4)).max_abs());
    for _ in 0..20 {
        let mut a = Matrix::new(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for i in 0..4 {
            a[(i, i)] += 5.0;
        }
        let inv = block_inverse_2x2(&a.block(0, 2, 0, 2), &a.block(0, 2, 2, 4), &a.block(2, 4, 0, 2), &a.block(2, 4, 2, 4)).unwrap();
        worst_inv = worst_inv.max((&(&a * &inv) - &Matrix::identity(4)).norm_inf());
    }
    ok &= worst_inv <= 1e-10;
    notes.push(format!("block inverse residual {worst_inv:.1e}"));
    Outcome { pass: ok, detail: notes.join("; ") }
}

fn main() {
    let mut all = true;
    all &= run(1, "resolvent oracle", 5.0, resolvent_oracle);
    all &= run(2, "Riccati tanh oracle", 5.0, tanh_oracle);
    all &= run(3, "atom quadratic oracle", 1.0, atom_oracle);
    all &= run(4, "exponential-affine identity", 60.0, exponential_affine_identity);
    all &= run(5, "moment identity, Hawkes", 60.0, hawkes_moment);
    for scheme in ["density", "atom", "rough_cir", "pi0"] {
        all &= run(5, &format!("moment identity, SVE {scheme}"), 60.0, || sve_moment(scheme));
    }
    all &= run(6, "sandwich bounds and sign", 60.0, sandwich);
    all &= run(7, "deterministic scaling convergence", 120.0, scaling_convergence);
    all &= run(8, "potential measure cross-validation", 10.0, potential_cross_validation);
    all &= run(9, "resolvent equation residuals", 10.0, resolvent_equation);
    all &= run(10, "SVE form equivalence", 120.0, sve_equivalence);
    all &= run(11, "matrix suite", 5.0, matrix_suite);
    if !all {
        std::process::exit(1);
    }
}

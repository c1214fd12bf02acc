//! The five experiment subcommands. Each writes CSV files into the output
//! directory and returns their paths.

use std::path::{Path, PathBuf};

use hawkes_scaling::bernstein::{
    classify_criticality, classify_criticality_heuristic, closed_form_drift, potential_from_resolvent_eq, potential_inversion_gs,
    potential_measure_closed_form, build_prelimit_kernels, is_admissible, lambda_scan_grid, PotentialMeasure,
};
use hawkes_scaling::grid::GridFunction;
use hawkes_scaling::hawkes::{baseline_h, mc_fourier_laplace, simulate_path, ExogenousInput, SimOptions};
use hawkes_scaling::kernels::{l1_norm, laplace_identity_check, resolvent_discrete_residual, resolvent_grid, Kernel, KernelEntry, ScalingScheme};
use hawkes_scaling::matlin::{build_admissible, spectral_radius};
use hawkes_scaling::riccati::{fourier_laplace_hawkes, riccati_convergence_report, solve_prelimit, PrelimitCase};
use hawkes_scaling::sve::{
    cir_mean, ensemble_summary, pi0_form_mean, simulate_atom_form, simulate_density_form, simulate_ensemble, simulate_pi0_form,
    simulate_power_cir, simulate_rough_cir, LimitBaseline, SvePath,
};
use hawkes_scaling::Matrix;

use crate::config::{test_functions, ExperimentConfig, MeasureSpec, PotentialMethod, ScalingFamily, SveScheme};
use crate::output::{header, num, Table};
use crate::CliError;

pub const NEAR_CRITICAL: f64 = 0.999;
pub const TRUNCATION_FLAG: f64 = 0.2;

fn missing(block: &str) -> CliError {
    CliError::Config(format!("config has no `{block}` block"))
}

fn kernel(k: &Kernel) -> Result<Kernel, CliError> {
    Ok(Kernel::new(k.d, k.entries.clone())?)
}

fn entry_names(prefix: &str, d: usize) -> Vec<String> {
    (0..d).flat_map(|i| (0..d).map(move |j| format!("{prefix}_{i}_{j}"))).collect()
}

fn matrix_fields(m: &Matrix) -> impl Iterator<Item = String> + '_ {
    m.data().iter().map(|x| num(*x))
}

fn z_score(gap: f64, se: f64, scale: f64) -> f64 {
    if gap <= 1e-12 * (1.0 + scale.abs()) {
        0.0
    } else if se > 0.0 {
        gap / se
    } else {
        f64::INFINITY
    }
}

/// Cumulative trapezoid integral of matrix grid values.
fn integrate(values: &[Matrix], delta: f64) -> Vec<Matrix> {
    let mut acc = vec![values[0].scale(0.0)];
    for w in values.windows(2) {
        let next = acc.last().expect("nonempty") + &(&w[0] + &w[1]).scale(0.5 * delta);
        acc.push(next);
    }
    acc
}

pub fn resolvent(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rc = cfg.resolvent.as_ref().ok_or_else(|| missing("resolvent"))?;
    let phi = kernel(&rc.kernel)?;
    let (delta, horizon) = (cfg.grid.delta, cfg.grid.horizon);
    let rho = spectral_radius(&l1_norm(&phi)?, 1e-12)?;
    if rho > NEAR_CRITICAL {
        eprintln!("warning: spectral radius of the kernel norm is {rho} > {NEAR_CRITICAL}");
    }
    let r = resolvent_grid(&phi, delta, horizon)?;
    let ir = integrate(&r.values, delta);
    let d = phi.d;
    let mut cols = vec!["t".to_string()];
    cols.extend(entry_names("R", d));
    cols.extend(entry_names("I_R", d));
    let mut table = Table::create(out, "resolvent.csv", &cols)?;
    for (k, (rk, ik)) in r.values.iter().zip(&ir).enumerate() {
        let mut row = vec![num(r.time(k))];
        row.extend(matrix_fields(rk));
        row.extend(matrix_fields(ik));
        table.row(&row)?;
    }
    let mut files = vec![table.finish()?];
    let mut table = Table::create(out, "resolvent_residual.csv", &header(&["lambda", "laplace_residual"]))?;
    for &lambda in &rc.lambdas {
        table.row(&[num(lambda), num(laplace_identity_check(&phi, &r, lambda)?)])?;
    }
    files.push(table.finish()?);
    println!("spectral radius {rho}, discrete residual {:e}", resolvent_discrete_residual(&phi, &r));
    Ok(files)
}

pub fn fl_verify(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let fc = cfg.fl_verify.as_ref().ok_or_else(|| missing("fl_verify"))?;
    let phi = kernel(&fc.kernel)?;
    fc.mu.validate(phi.d)?;
    let delta = cfg.grid.delta;
    let mc_delta = fc.mc_delta.unwrap_or(delta);
    let cols = header(&["case", "horizon", "f", "h", "mc_mean_re", "mc_mean_im", "mc_se", "riccati_re", "riccati_im", "z_score"]);
    let mut table = Table::create(out, "fl_verify.csv", &cols)?;
    let mut log = match fc.event_log_paths {
        0 => None,
        _ => Some(Table::create(out, "events.csv", &header(&["case", "path", "component", "time"]))?),
    };
    for (i, case) in fc.cases.iter().enumerate() {
        let horizon = case.horizon;
        let tf = test_functions(&case.f, &case.h, phi.d, delta, horizon)?;
        let sol = solve_prelimit(&resolvent_grid(&phi, delta, horizon)?, &tf, horizon)?;
        let base = baseline_h(&phi, &fc.mu, delta, horizon)?;
        let exact = fourier_laplace_hawkes(&sol, &base.h, horizon)?;
        let tf_mc = test_functions(&case.f, &case.h, phi.d, mc_delta, horizon)?;
        let est = mc_fourier_laplace(&phi, &fc.mu, &tf_mc, horizon, fc.paths, cfg.seed)?;
        let z = z_score((est.mean - exact).norm(), est.se, exact.norm());
        table.row(&[
            i.to_string(),
            num(horizon),
            case.f.describe(),
            case.h.describe(),
            num(est.mean.re),
            num(est.mean.im),
            num(est.se),
            num(exact.re),
            num(exact.im),
            num(z),
        ])?;
        println!("case {i}: z = {z:.3}");
        if let Some(log) = log.as_mut() {
            write_events(log, i, &phi, &fc.mu, horizon, cfg.seed, fc.event_log_paths.min(fc.paths))?;
        }
    }
    let mut files = vec![table.finish()?];
    if let Some(log) = log {
        files.push(log.finish()?);
    }
    Ok(files)
}

fn write_events(log: &mut Table, case: usize, phi: &Kernel, mu: &ExogenousInput, horizon: f64, seed: u64, n: usize) -> Result<(), CliError> {
    for idx in 0..n as u64 {
        let path = simulate_path(phi, mu, horizon, seed, idx, &SimOptions::default())?;
        for (c, times) in path.events.iter().enumerate() {
            for t in times {
                log.row(&[case.to_string(), idx.to_string(), c.to_string(), num(*t)])?;
            }
        }
    }
    Ok(())
}

pub fn scaling_study(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let sc = cfg.scaling_study.as_ref().ok_or_else(|| missing("scaling_study"))?;
    let (delta, horizon) = (cfg.grid.delta, cfg.grid.horizon);
    let (pi, upsilon, cases) = match &sc.family {
        ScalingFamily::Exponential { a_mu, b, c } => {
            let pi = MeasureSpec::Exponential { atom: 0.0, scale: 1.0 / c, rate: b / c }.build(delta, horizon)?;
            let ups = |t: f64| match *b {
                0.0 => a_mu * t * t / (2.0 * c),
                b => a_mu / b * (t - c / b * (1.0 - (-b * t / c).exp())),
            };
            let k = pi.len();
            let upsilon = GridFunction::new(delta, (0..=k).map(|j| vec![ups(j as f64 * delta)]).collect())?;
            let cases = sc
                .n
                .iter()
                .map(|&n| {
                    let nf = n as f64;
                    Ok(PrelimitCase {
                        phi_n: Kernel::scalar(KernelEntry::Exponential { a: (1.0 - b / nf) / c, b: 1.0 / c })?,
                        scheme: ScalingScheme::new(n, nf)?,
                        mu_n: ExogenousInput::constant(vec![*a_mu]),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            (pi, upsilon, cases)
        }
        ScalingFamily::Ebf { f, a, mu, gs_order } => {
            if mu.len() != f.d {
                return Err(CliError::Config(format!("scaling_study.family.mu needs {} entries", f.d)));
            }
            let s = build_admissible(a, 1e-10).map_err(|e| CliError::Config(format!("target structure is not admissible: {e}")))?;
            let report = is_admissible(&s, f, &lambda_scan_grid(s.lambda_plus, 1e4, 400))?;
            if !report.admissible {
                return Err(CliError::Config(format!("target (K, F) is not admissible near lambda = {:?}", report.near_singular)));
            }
            let pi = potential_inversion_gs(&s, f, delta, horizon, *gs_order)?.measure;
            let cum = pi.cumulative();
            let upsilon = GridFunction::new(delta, integrate(&cum.values, delta).iter().map(|m| m.mat_vec(mu)).collect())?;
            let cases = sc
                .n
                .iter()
                .map(|&n| {
                    let (phi_n, scheme) = build_prelimit_kernels(f, a, n)?;
                    let scale = (scheme.theta / n as f64).sqrt();
                    Ok(PrelimitCase { phi_n, scheme, mu_n: ExogenousInput::constant(mu.iter().map(|m| m * scale).collect()) })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            (pi, upsilon, cases)
        }
    };
    let tf = test_functions(&sc.f, &sc.h, pi.d(), delta, horizon)?;
    let report = riccati_convergence_report(&cases, &pi, &upsilon, &tf, horizon)?;
    let cols = header(&["n", "theta", "v_gap", "gap", "fl_rescaled_re", "fl_rescaled_im", "fl_limit_re", "fl_limit_im"]);
    let mut table = Table::create(out, "scaling_study.csv", &cols)?;
    for (row, case) in report.rows.iter().zip(&cases) {
        table.row(&[
            row.n.to_string(),
            num(case.scheme.theta),
            num(row.v_gap),
            num(row.fl_gap),
            num(row.fl_rescaled_re),
            num(row.fl_rescaled_im),
            num(row.fl_limit_re),
            num(row.fl_limit_im),
        ])?;
    }
    println!("gap strictly decreasing: {}", report.monotone);
    Ok(vec![table.finish()?])
}

fn linear(v0: &[f64], slope: &[f64], delta: f64, horizon: f64) -> Result<GridFunction<Vec<f64>>, CliError> {
    if v0.len() != slope.len() {
        return Err(CliError::Config("gamma0 and gamma_slope must have the same length".into()));
    }
    let k = hawkes_scaling::grid::steps(delta, horizon)?;
    let values = (0..=k).map(|j| v0.iter().zip(slope).map(|(a, b)| a + b * j as f64 * delta).collect()).collect();
    Ok(GridFunction::new(delta, values)?)
}

pub fn sve(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let sc = cfg.sve.as_ref().ok_or_else(|| missing("sve"))?;
    let (delta, horizon, seed) = (cfg.grid.delta, cfg.grid.horizon, cfg.seed);
    let n = sc.paths;
    let (paths, target): (Vec<SvePath>, Vec<Vec<f64>>) = match &sc.scheme {
        SveScheme::Density { measure, upsilon_rate } | SveScheme::Atom { measure, upsilon_rate } => {
            let pi = measure.build(delta, horizon)?;
            let base = LimitBaseline::linear(upsilon_rate, delta, horizon)?;
            let paths = match sc.scheme {
                SveScheme::Density { .. } => simulate_ensemble(n, |i| simulate_density_form(&pi, &base, horizon, seed, i))?,
                _ => simulate_ensemble(n, |i| simulate_atom_form(&pi, &base, horizon, seed, i))?,
            };
            (paths, base.upsilon.values.clone())
        }
        SveScheme::RoughCir { params } | SveScheme::PowerCir { params } => {
            let paths = match sc.scheme {
                SveScheme::RoughCir { .. } => simulate_ensemble(n, |i| simulate_rough_cir(params, horizon, delta, seed, i))?,
                _ => simulate_ensemble(n, |i| simulate_power_cir(params, horizon, delta, seed, i))?,
            };
            let m = cir_mean(params, horizon, delta)?;
            let mut acc = vec![vec![0.0; params.d()]];
            for xi in &m[..m.len() - 1] {
                let last = acc.last().expect("nonempty");
                acc.push(last.iter().zip(xi).map(|(a, x)| a + delta * x).collect());
            }
            (paths, acc)
        }
        SveScheme::Pi0 { pi0, b, gamma0, gamma_slope } => {
            let pi0 = pi0.build(delta, horizon)?;
            let gamma = linear(gamma0, gamma_slope, delta, horizon)?;
            let paths = simulate_ensemble(n, |i| simulate_pi0_form(&pi0, b, &gamma, None, horizon, seed, i))?;
            (paths, pi0_form_mean(&pi0, b, &gamma, horizon)?)
        }
    };
    let mut traj = Table::create(out, "sve_trajectories.csv", &header(&["path", "t", "component", "xi_integrated", "martingale", "density"]))?;
    for p in paths.iter().take(sc.export_paths) {
        for k in 0..p.len() {
            for i in 0..p.d() {
                let density = p.density.as_ref().map_or(String::new(), |x| num(x[k][i]));
                traj.row(&[p.path_index.to_string(), num(k as f64 * delta), i.to_string(), num(p.integrated[k][i]), num(p.martingale[k][i]), density])?;
            }
        }
    }
    let summary = ensemble_summary(&paths)?;
    let cols = header(&["t", "component", "mean_xi", "se_xi", "upsilon", "z_mean", "mean_m", "se_m", "var_m", "var_m_se"]);
    let mut table = Table::create(out, "sve_summary.csv", &cols)?;
    let d = paths[0].d();
    let mut worst_z: f64 = 0.0;
    for (idx, r) in summary.rows.iter().enumerate() {
        let ups = target[idx / d][r.component];
        let z = z_score((r.mean_xi - ups).abs(), r.se_xi, ups);
        worst_z = worst_z.max(z);
        table.row(&[
            num(r.t),
            r.component.to_string(),
            num(r.mean_xi),
            num(r.se_xi),
            num(ups),
            num(z),
            num(r.mean_m),
            num(r.se_m),
            num(r.var_m),
            num(r.var_m_se),
        ])?;
    }
    if summary.truncation_rate > TRUNCATION_FLAG {
        eprintln!("warning: truncation rate {} exceeds {TRUNCATION_FLAG}", summary.truncation_rate);
    }
    println!("truncation rate {}, monotone {}, largest mean z-score {worst_z:.3}", summary.truncation_rate, summary.monotone);
    Ok(vec![traj.finish()?, table.finish()?])
}

pub fn potential(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let pc = cfg.potential.as_ref().ok_or_else(|| missing("potential"))?;
    let (delta, horizon) = (cfg.grid.delta, cfg.grid.horizon);
    let f = &pc.ebf;
    f.validate()?;
    let k = pc.k.clone().unwrap_or_else(|| Matrix::identity(f.d));
    let s = build_admissible(&k, 1e-10)?;
    let mut measures: Vec<(PotentialMethod, PotentialMeasure)> = Vec::new();
    let mut repair = None;
    for &m in &pc.methods {
        let pi = match m {
            PotentialMethod::Gs => {
                let gs = potential_inversion_gs(&s, f, delta, horizon, pc.gs_order)?;
                repair = Some(gs.repair);
                gs.measure
            }
            PotentialMethod::ClosedForm => potential_measure_closed_form(f, delta, horizon)?,
            PotentialMethod::ResolventEq => potential_from_resolvent_eq(&potential_measure_closed_form(f, delta, horizon)?, &closed_form_drift(f)?)?,
        };
        measures.push((m, pi));
    }
    let d = f.d;
    let mut cols = vec!["t".to_string()];
    for (m, _) in &measures {
        cols.extend(entry_names(m.name(), d));
    }
    let mut table = Table::create(out, "potential.csv", &cols)?;
    let cums: Vec<GridFunction<Matrix>> = measures.iter().map(|(_, pi)| pi.cumulative()).collect();
    for k in 0..cums[0].len() {
        let mut row = vec![num(cums[0].time(k))];
        for c in &cums {
            row.extend(matrix_fields(&c.values[k]));
        }
        table.row(&row)?;
    }
    let mut files = vec![table.finish()?];
    let label = match d {
        1 => classify_criticality(f)?,
        _ => classify_criticality_heuristic(&measures[0].1)?.0,
    };
    let mut summary = Table::create(out, "potential_summary.csv", &header(&["quantity", "value"]))?;
    summary.row(&["criticality".into(), label.to_string()])?;
    if let Some(r) = repair {
        summary.row(&["gs_repair".into(), num(r)])?;
    }
    for (i, (a, pa)) in measures.iter().enumerate() {
        for (b, pb) in &measures[i + 1..] {
            summary.row(&[format!("gap_{}_{}", a.name(), b.name()), num(pa.sup_gap(pb)?)])?;
        }
    }
    files.push(summary.finish()?);
    println!("criticality: {label}");
    Ok(files)
}

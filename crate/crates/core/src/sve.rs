//! Simulation of the limit stochastic Volterra equations
//! `Xi = Upsilon + Pi * M`, `M = B o Xi`, in density, atom and
//! drift-separated forms, with rough and classical CIR specializations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, InverseGaussian, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernstein::{pi0_block_condition, potential_measure_closed_form, ExtendedBernsteinMatrix, LevyMeasure, PotentialMeasure, PowerTerm};
use crate::error::{invalid, numerical, Result};
use crate::grid::{steps, GridFunction};
use crate::mc::{mean_se, mean_se_complex, path_rng, variance_se};
use crate::riccati::{fourier_laplace_limit, RiccatiSolution, TestFunctions};
use crate::{AdmissibleStructure, Matrix, C64};

/// Tolerance for the drift-separation block condition.
pub const BLOCK_TOL: f64 = 1e-8;

/// Baseline `Upsilon`, optionally with its derivative and a `Gamma` such that
/// `Upsilon = Pi * Gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitBaseline {
    pub upsilon: GridFunction<Vec<f64>>,
    pub upsilon_prime: Option<GridFunction<Vec<f64>>>,
    pub gamma: Option<GridFunction<Vec<f64>>>,
}

impl LimitBaseline {
    pub fn new(upsilon: GridFunction<Vec<f64>>, upsilon_prime: Option<GridFunction<Vec<f64>>>) -> Result<Self> {
        let b = Self { upsilon, upsilon_prime, gamma: None };
        b.validate()?;
        Ok(b)
    }

    /// `Upsilon(t) = rate * t`.
    pub fn linear(rate: &[f64], delta: f64, horizon: f64) -> Result<Self> {
        let k = steps(delta, horizon)?;
        let up = (0..=k).map(|j| rate.iter().map(|r| r * j as f64 * delta).collect()).collect();
        Self::new(GridFunction::new(delta, up)?, Some(GridFunction::new(delta, vec![rate.to_vec(); k + 1])?))
    }

    /// Samples `upsilon` and `upsilon_prime` on the grid.
    pub fn from_fn(
        delta: f64,
        horizon: f64,
        upsilon: impl Fn(f64) -> Vec<f64>,
        upsilon_prime: impl Fn(f64) -> Vec<f64>,
    ) -> Result<Self> {
        let k = steps(delta, horizon)?;
        let t = |j: usize| j as f64 * delta;
        Self::new(
            GridFunction::new(delta, (0..=k).map(|j| upsilon(t(j))).collect())?,
            Some(GridFunction::new(delta, (0..=k).map(|j| upsilon_prime(t(j))).collect())?),
        )
    }

    pub fn d(&self) -> usize {
        self.upsilon.values.first().map_or(0, |v| v.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 || self.upsilon.values.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
            return invalid("Upsilon must be a finite d-vector grid function");
        }
        if self.upsilon.values[0].iter().any(|x| *x < 0.0) {
            return invalid("Upsilon(0) must be nonnegative");
        }
        if self.upsilon.values.windows(2).any(|p| p[0].iter().zip(&p[1]).any(|(a, b)| b < a)) {
            return invalid("Upsilon must be nondecreasing");
        }
        for g in [&self.upsilon_prime, &self.gamma].into_iter().flatten() {
            if g.delta != self.upsilon.delta || g.values.iter().any(|v| v.len() != d) {
                return invalid("Upsilon' and Gamma must share the Upsilon grid and dimension");
            }
        }
        Ok(())
    }
}

/// One simulated trajectory on the grid `t_k = k delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvePath {
    pub delta: f64,
    /// `Xi(t_k)`.
    pub integrated: Vec<Vec<f64>>,
    /// `M(t_k)`.
    pub martingale: Vec<Vec<f64>>,
    /// `xi(t_k)` after truncation, when the scheme has a density.
    pub density: Option<Vec<Vec<f64>>>,
    /// Steps where truncation or clipping was applied.
    pub truncated: usize,
    pub seed: u64,
    pub path_index: u64,
}

impl SvePath {
    pub fn len(&self) -> usize {
        self.integrated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.integrated.is_empty()
    }

    pub fn d(&self) -> usize {
        self.integrated.first().map_or(0, |v| v.len())
    }

    /// Fraction of (step, component) pairs that were truncated.
    pub fn truncation_rate(&self) -> f64 {
        self.truncated as f64 / ((self.len().max(1)) * self.d().max(1)) as f64
    }

    pub fn is_monotone(&self) -> bool {
        self.integrated.windows(2).all(|p| p[0].iter().zip(&p[1]).all(|(a, b)| b >= a))
    }
}

struct EngineOut {
    xi: Vec<Vec<f64>>,
    dm: Vec<Vec<f64>>,
    truncated: usize,
}

/// `xi_k = g_k + sum_{j<k} (cells[k-1-j] / delta) (inc_j - b xi_j delta + diag(sqrt xi_j) dB_j)`.
///
/// Without noise the scheme is the deterministic linear Volterra solve used as
/// the mean oracle, and no truncation is applied.
fn volterra_engine(
    cells: &[Matrix],
    delta: f64,
    k_max: usize,
    g: &dyn Fn(usize) -> Vec<f64>,
    inc: &dyn Fn(usize) -> Vec<f64>,
    b: Option<&Matrix>,
    mut noise: Option<&mut ChaCha8Rng>,
) -> EngineOut {
    let d = cells.first().map_or(0, |c| c.rows());
    let kern: Vec<Matrix> = cells.iter().map(|c| c.scale(1.0 / delta)).collect();
    let sq = delta.sqrt();
    let mut xi = Vec::with_capacity(k_max + 1);
    let mut dm = Vec::with_capacity(k_max);
    let mut drive: Vec<Vec<f64>> = Vec::with_capacity(k_max);
    let mut truncated = 0;
    for k in 0..=k_max {
        let mut x = g(k);
        for (j, dr) in drive.iter().enumerate() {
            let add = kern[k - 1 - j].mat_vec(dr);
            for i in 0..d {
                x[i] += add[i];
            }
        }
        if noise.is_some() && x.iter().any(|v| *v < 0.0) {
            truncated += 1;
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        if k < k_max {
            let mut dr = inc(k);
            if let Some(b) = b {
                let bx = b.mat_vec(&x);
                for i in 0..d {
                    dr[i] -= bx[i] * delta;
                }
            }
            let step: Vec<f64> = match noise.as_deref_mut() {
                Some(rng) => x
                    .iter()
                    .map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        v.sqrt() * sq * z
                    })
                    .collect(),
                None => vec![0.0; d],
            };
            for i in 0..d {
                dr[i] += step[i];
            }
            dm.push(step);
            drive.push(dr);
        }
        xi.push(x);
    }
    EngineOut { xi, dm, truncated }
}

fn check_pi(pi: &PotentialMeasure, k_max: usize, d: usize) -> Result<()> {
    if pi.atom0.max_abs() != 0.0 {
        return invalid("density and drift-separated forms need an atomless measure");
    }
    if pi.len() < k_max {
        return invalid("potential measure does not cover the horizon");
    }
    if pi.d() != d {
        return invalid("potential measure and baseline dimensions differ");
    }
    Ok(())
}

fn cumulate(start: &[f64], xi: &[Vec<f64>], delta: f64) -> Vec<Vec<f64>> {
    let mut acc = start.to_vec();
    let mut out = Vec::with_capacity(xi.len());
    out.push(acc.clone());
    for x in &xi[..xi.len() - 1] {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += delta * v;
        }
        out.push(acc.clone());
    }
    out
}

fn cumulate_dm(d: usize, dm: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut acc = vec![0.0; d];
    let mut out = vec![acc.clone()];
    for s in dm {
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
        out.push(acc.clone());
    }
    out
}

fn assemble(start: &[f64], out: EngineOut, delta: f64, seed: u64, path_index: u64) -> SvePath {
    let d = start.len();
    SvePath {
        delta,
        integrated: cumulate(start, &out.xi, delta),
        martingale: cumulate_dm(d, &out.dm),
        density: Some(out.xi),
        truncated: out.truncated,
        seed,
        path_index,
    }
}

/// Density form `xi = Upsilon' + pi * diag(sqrt xi) dB` by explicit Volterra
/// Euler with full truncation; `Xi = Upsilon(0) + int xi`.
pub fn simulate_density_form(
    pi: &PotentialMeasure,
    base: &LimitBaseline,
    horizon: f64,
    seed: u64,
    path_index: u64,
) -> Result<SvePath> {
    base.validate()?;
    let delta = pi.delta;
    let k_max = steps(delta, horizon)?;
    let Some(up) = &base.upsilon_prime else {
        return invalid("density form needs Upsilon'");
    };
    if (base.upsilon.delta - delta).abs() > 1e-12 * delta || up.len() < k_max + 1 {
        return invalid("baseline grid does not match the measure grid");
    }
    check_pi(pi, k_max, base.d())?;
    let mut rng = path_rng(seed, path_index);
    let out = volterra_engine(&pi.cells, delta, k_max, &|k| up.values[k].clone(), &|_| vec![0.0; base.d()], None, Some(&mut rng));
    Ok(assemble(&base.upsilon.values[0], out, delta, seed, path_index))
}

/// Rough or classical CIR parameters: `pi_0(t) = t^{alpha-1} e^{-beta t} / (c Gamma(alpha))`
/// and `xi = pi_0 * (a - b xi) + pi_0 * diag(sqrt xi) dB`, all diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirParams {
    pub alpha: f64,
    pub beta: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl CirParams {
    pub fn scalar(alpha: f64, beta: f64, a: f64, b: f64, c: f64) -> Self {
        Self { alpha, beta, a: vec![a], b: vec![b], c: vec![c] }
    }

    pub fn d(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 || self.b.len() != d || self.c.len() != d {
            return invalid("a, b and c must have the same positive length");
        }
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return invalid(format!("alpha = {} outside (1/2, 1]", self.alpha));
        }
        if !(self.beta >= 0.0) || self.a.iter().any(|x| !(*x >= 0.0)) || self.c.iter().any(|x| !(*x > 0.0)) {
            return invalid("need beta >= 0, a >= 0 and c > 0");
        }
        if self.b.iter().any(|x| !x.is_finite()) {
            return invalid("b must be finite");
        }
        Ok(())
    }

    /// Cells of `pi_0`: exact for every `beta`.
    pub fn kernel(&self, delta: f64, horizon: f64) -> Result<PotentialMeasure> {
        self.validate()?;
        let d = self.d();
        let f = ExtendedBernsteinMatrix::new(
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
            LevyMeasure::default(),
            vec![PowerTerm { c: self.c.clone(), alpha: self.alpha, beta: self.beta }],
        )?;
        potential_measure_closed_form(&f, delta, horizon)
    }
}

fn cir_run(p: &CirParams, horizon: f64, delta: f64, rng: Option<&mut ChaCha8Rng>) -> Result<(EngineOut, usize)> {
    let k_max = steps(delta, horizon)?;
    let pi0 = p.kernel(delta, horizon)?;
    let b = Matrix::from_diag(&p.b);
    let a: Vec<f64> = p.a.iter().map(|x| x * delta).collect();
    let zero = vec![0.0; p.d()];
    Ok((volterra_engine(&pi0.cells, delta, k_max, &|_| zero.clone(), &|_| a.clone(), Some(&b), rng), k_max))
}

/// Rough CIR, `alpha` in `(1/2, 1)`.
pub fn simulate_rough_cir(p: &CirParams, horizon: f64, delta: f64, seed: u64, path_index: u64) -> Result<SvePath> {
    if !(p.alpha > 0.5 && p.alpha < 1.0) {
        return invalid(format!("rough CIR needs alpha in (1/2, 1), got {}", p.alpha));
    }
    simulate_power_cir(p, horizon, delta, seed, path_index)
}

/// Power-kernel CIR for `alpha` in `(1/2, 1]`; `alpha = 1` is classical CIR.
pub fn simulate_power_cir(p: &CirParams, horizon: f64, delta: f64, seed: u64, path_index: u64) -> Result<SvePath> {
    let mut rng = path_rng(seed, path_index);
    let (out, _) = cir_run(p, horizon, delta, Some(&mut rng))?;
    Ok(assemble(&vec![0.0; p.d()], out, delta, seed, path_index))
}

/// Mean of `xi` on the grid: the deterministic solve `m = pi_0 * (a - b m)`.
pub fn cir_mean(p: &CirParams, horizon: f64, delta: f64) -> Result<Vec<Vec<f64>>> {
    Ok(cir_run(p, horizon, delta, None)?.0.xi)
}

/// Scalar atom form `Xi = Upsilon + Pi * M` with `Pi = a delta_0 + cells`.
///
/// Each step solves `y = c + a W(y)` for a fresh Brownian motion `W`, where
/// `c` is the baseline increment plus the history term; `y` is the
/// first-passage time of `x - a W(x)` to level `c`, an inverse Gaussian with
/// mean `c` and shape `c^2 / a^2`, and `dM = (y - c) / a`. With `a = 0` the
/// step is `y = c^+`, `dM = sqrt(y) Z`.
pub fn simulate_atom_form(pi: &PotentialMeasure, base: &LimitBaseline, horizon: f64, seed: u64, path_index: u64) -> Result<SvePath> {
    base.validate()?;
    if pi.d() != 1 || base.d() != 1 {
        return invalid("atom form is implemented for d = 1 only");
    }
    let delta = pi.delta;
    let k_max = steps(delta, horizon)?;
    if (base.upsilon.delta - delta).abs() > 1e-12 * delta || base.upsilon.len() < k_max + 1 {
        return invalid("baseline grid does not match the measure grid");
    }
    if pi.len() < k_max {
        return invalid("potential measure does not cover the horizon");
    }
    let a = pi.atom0[(0, 0)];
    if a < 0.0 {
        return invalid("atom must be nonnegative");
    }
    let cells: Vec<f64> = pi.cells.iter().map(|c| c[(0, 0)]).collect();
    let ups: Vec<f64> = base.upsilon.values.iter().map(|v| v[0]).collect();
    let mut rng = path_rng(seed, path_index);
    let mut xi = vec![ups[0]];
    let mut m = vec![0.0];
    let mut dm: Vec<f64> = Vec::with_capacity(k_max);
    let mut clipped = 0;
    for k in 0..k_max {
        let hist: f64 = dm.iter().enumerate().map(|(i, x)| cells[k - 1 - i] * x).sum();
        let c = ups[k + 1] - ups[k] + hist;
        let (y, step) = if a == 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            if c < 0.0 {
                clipped += 1;
            }
            let y = c.max(0.0);
            (y, y.sqrt() * z)
        } else if c <= 0.0 {
            if c < 0.0 {
                clipped += 1;
            }
            (0.0, 0.0)
        } else {
            let ig = InverseGaussian::new(c, c * c / (a * a)).map_err(|e| crate::Error::Numerical(e.to_string()))?;
            let y: f64 = ig.sample(&mut rng);
            if !y.is_finite() {
                return numerical("inverse Gaussian step is not finite");
            }
            (y, (y - c) / a)
        };
        dm.push(step);
        xi.push(xi[k] + y);
        m.push(m[k] + step);
    }
    Ok(SvePath {
        delta,
        integrated: xi.into_iter().map(|x| vec![x]).collect(),
        martingale: m.into_iter().map(|x| vec![x]).collect(),
        density: None,
        truncated: clipped,
        seed,
        path_index,
    })
}

fn pi0_run(
    pi0: &PotentialMeasure,
    b_phi: &Matrix,
    gamma: &GridFunction<Vec<f64>>,
    horizon: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<EngineOut> {
    let delta = pi0.delta;
    let k_max = steps(delta, horizon)?;
    let d = pi0.d();
    check_pi(pi0, k_max, d)?;
    if (gamma.delta - delta).abs() > 1e-12 * delta || gamma.len() < k_max + 1 || gamma.values.iter().any(|v| v.len() != d) {
        return invalid("Gamma must be a d-vector grid function on the measure grid");
    }
    if b_phi.rows() != d || !b_phi.is_square() {
        return invalid("b must be d x d");
    }
    let g0 = gamma.values[0].clone();
    let cells = &pi0.cells;
    let g = |k: usize| cells[k.max(1) - 1].scale(1.0 / delta).mat_vec(&g0);
    let inc = |j: usize| gamma.values[j + 1].iter().zip(&gamma.values[j]).map(|(x, y)| x - y).collect();
    Ok(volterra_engine(cells, delta, k_max, &g, &inc, Some(b_phi), rng))
}

/// `Upsilon'` of the drift-separated form with `b = 0`, i.e. `pi_0 * dGamma`
/// in the discretization of [`simulate_pi0_form`].
pub fn pi0_forcing(pi0: &PotentialMeasure, gamma: &GridFunction<Vec<f64>>, horizon: f64) -> Result<GridFunction<Vec<f64>>> {
    let d = pi0.d();
    let out = pi0_run(pi0, &Matrix::zeros(d, d), gamma, horizon, None)?;
    GridFunction::new(pi0.delta, out.xi)
}

/// Drift-separated form `Xi = Pi_0 * Gamma - Pi_0 * (b Xi) + Pi_0 * M` with the
/// density-form noise contract. `Gamma(0)` acts as a point mass at zero.
/// When `structure` is given, the block condition is checked first.
pub fn simulate_pi0_form(
    pi0: &PotentialMeasure,
    b_phi: &Matrix,
    gamma: &GridFunction<Vec<f64>>,
    structure: Option<&AdmissibleStructure>,
    horizon: f64,
    seed: u64,
    path_index: u64,
) -> Result<SvePath> {
    if let Some(s) = structure {
        let v = pi0_block_condition(s, b_phi)?;
        if v > BLOCK_TOL {
            return invalid(format!("block condition violated: {v:.3e}"));
        }
    }
    let mut rng = path_rng(seed, path_index);
    let out = pi0_run(pi0, b_phi, gamma, horizon, Some(&mut rng))?;
    Ok(assemble(&vec![0.0; pi0.d()], out, pi0.delta, seed, path_index))
}

/// Deterministic mean of `Xi` for the drift-separated form:
/// `x = Pi_0 * Gamma - Pi_0 * (b x)`.
pub fn pi0_form_mean(pi0: &PotentialMeasure, b_phi: &Matrix, gamma: &GridFunction<Vec<f64>>, horizon: f64) -> Result<Vec<Vec<f64>>> {
    let out = pi0_run(pi0, b_phi, gamma, horizon, None)?;
    Ok(cumulate(&vec![0.0; pi0.d()], &out.xi, pi0.delta))
}

/// Simulates `n_paths` trajectories in parallel; the result is in path order.
pub fn simulate_ensemble<F>(n_paths: usize, sim: F) -> Result<Vec<SvePath>>
where
    F: Fn(u64) -> Result<SvePath> + Sync + Send,
{
    if n_paths == 0 {
        return invalid("at least one path is required");
    }
    (0..n_paths as u64).into_par_iter().map(sim).collect()
}

/// Ensemble statistics at one grid time for one component.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub t: f64,
    pub component: usize,
    pub mean_xi: f64,
    pub se_xi: f64,
    pub mean_m: f64,
    pub se_m: f64,
    pub var_m: f64,
    pub var_m_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub rows: Vec<SummaryRow>,
    pub truncation_rate: f64,
    pub monotone: bool,
}

pub fn ensemble_summary(paths: &[SvePath]) -> Result<EnsembleSummary> {
    let Some(first) = paths.first() else {
        return invalid("empty ensemble");
    };
    let (len, d) = (first.len(), first.d());
    if paths.iter().any(|p| p.len() != len || p.d() != d || p.delta != first.delta) {
        return invalid("ensemble paths must share grid and dimension");
    }
    let mut rows = Vec::with_capacity(len * d);
    for k in 0..len {
        for i in 0..d {
            let xs: Vec<f64> = paths.iter().map(|p| p.integrated[k][i]).collect();
            let ms: Vec<f64> = paths.iter().map(|p| p.martingale[k][i]).collect();
            let (mean_xi, se_xi) = mean_se(&xs);
            let (mean_m, se_m) = mean_se(&ms);
            let (var_m, var_m_se) = if paths.len() > 1 { variance_se(&ms) } else { (0.0, 0.0) };
            rows.push(SummaryRow { t: k as f64 * first.delta, component: i, mean_xi, se_xi, mean_m, se_m, var_m, var_m_se });
        }
    }
    let trunc: usize = paths.iter().map(|p| p.truncated).sum();
    Ok(EnsembleSummary {
        rows,
        truncation_rate: trunc as f64 / (paths.len() * len * d) as f64,
        monotone: paths.iter().all(|p| p.is_monotone()),
    })
}

/// Monte Carlo `E exp{f * dXi(T) + h * dM(T)}` against the Riccati value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharacteristicReport {
    pub mc_mean: C64,
    pub se: f64,
    pub riccati: C64,
    pub gap: f64,
}

pub fn limit_characteristic_check(
    paths: &[SvePath],
    tf: &TestFunctions,
    sol: &RiccatiSolution,
    upsilon: &GridFunction<Vec<f64>>,
    horizon: f64,
) -> Result<CharacteristicReport> {
    tf.validate()?;
    let riccati = fourier_laplace_limit(sol, upsilon, horizon)?;
    let Some(first) = paths.first() else {
        return invalid("empty ensemble");
    };
    let delta = first.delta;
    let k = steps(delta, horizon)?;
    if (tf.f.delta - delta).abs() > 1e-12 * delta || tf.f.len() < k + 1 || paths.iter().any(|p| p.len() < k + 1) {
        return invalid("paths and test functions must share a grid covering the horizon");
    }
    let samples: Vec<C64> = paths
        .iter()
        .map(|p| {
            let mut acc: C64 = tf.f.values[k].iter().zip(&p.integrated[0]).map(|(a, x)| a * x).sum();
            for j in 0..k {
                let (f, h) = (&tf.f.values[k - 1 - j], &tf.h.values[k - 1 - j]);
                for i in 0..p.d() {
                    acc += f[i] * (p.integrated[j + 1][i] - p.integrated[j][i]) + h[i] * (p.martingale[j + 1][i] - p.martingale[j][i]);
                }
            }
            acc.exp()
        })
        .collect();
    let (mc_mean, se) = mean_se_complex(&samples);
    Ok(CharacteristicReport { mc_mean, se, riccati, gap: (mc_mean - riccati).norm() })
}

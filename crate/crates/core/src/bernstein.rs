//! Extended Bernstein functions, admissibility, potential measures and the
//! construction of prelimit kernel sequences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Error, Result};
use crate::grid::{check_delta, steps, GridFunction};
use crate::kernels::{gamma_fn, Kernel, KernelEntry, ScalingScheme};
use crate::quad::integrate;
use crate::{AdmissibleStructure, Matrix};

/// One piece of a Lévy measure: an atom when `lo == hi`, otherwise mass spread
/// over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyPiece {
    pub lo: f64,
    pub hi: f64,
    pub mass: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasure {
    pub pieces: Vec<LevyPiece>,
}

impl LevyMeasure {
    pub fn atom(t: f64, mass: Matrix) -> Self {
        Self { pieces: vec![LevyPiece { lo: t, hi: t, mass }] }
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.iter().all(|p| p.mass.max_abs() == 0.0)
    }

    /// Total mass `nu(R_+)` entrywise.
    pub fn total(&self, d: usize) -> Matrix {
        self.pieces.iter().fold(Matrix::zeros(d, d), |acc, p| &acc + &p.mass)
    }

    fn validate(&self, d: usize) -> Result<()> {
        for p in &self.pieces {
            if !(p.lo > 0.0) || !(p.hi >= p.lo) || !p.hi.is_finite() {
                return invalid(format!("Lévy piece [{}, {}] must satisfy 0 < lo <= hi < inf", p.lo, p.hi));
            }
            if p.mass.rows() != d || p.mass.cols() != d || !p.mass.is_nonnegative() {
                return invalid("Lévy masses must be nonnegative d x d matrices");
            }
        }
        Ok(())
    }
}

/// `c_i ((lambda + beta)^alpha - beta^alpha)` on the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTerm {
    pub c: Vec<f64>,
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
}

impl PowerTerm {
    fn value(&self, lambda: f64) -> Matrix {
        let s = (lambda + self.beta).powf(self.alpha) - self.beta.powf(self.alpha);
        Matrix::from_diag(&self.c.iter().map(|c| c * s).collect::<Vec<_>>())
    }
}

/// Matrix-valued extended Bernstein function
/// `F(lambda) = b + sigma lambda + int (1 - e^{-lambda t}) nu(dt) + power terms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedBernsteinMatrix {
    pub d: usize,
    pub b: Matrix,
    pub sigma: Matrix,
    #[serde(default)]
    pub nu: LevyMeasure,
    #[serde(default)]
    pub power: Vec<PowerTerm>,
}

impl ExtendedBernsteinMatrix {
    pub fn new(b: Matrix, sigma: Matrix, nu: LevyMeasure, power: Vec<PowerTerm>) -> Result<Self> {
        let f = Self { d: b.rows(), b, sigma, nu, power };
        f.validate()?;
        Ok(f)
    }

    pub fn affine(b: Matrix, sigma: Matrix) -> Result<Self> {
        Self::new(b, sigma, LevyMeasure::default(), Vec::new())
    }

    pub fn scalar_affine(b: f64, sigma: f64) -> Result<Self> {
        Self::affine(Matrix::scalar(b), Matrix::scalar(sigma))
    }

    /// Scalar `b + c ((lambda + beta)^alpha - beta^alpha)`.
    pub fn scalar_power(b: f64, c: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(
            Matrix::scalar(b),
            Matrix::scalar(0.0),
            LevyMeasure::default(),
            vec![PowerTerm { c: vec![c], alpha, beta }],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 || !self.b.is_square() || self.b.rows() != d || self.sigma.rows() != d || !self.sigma.is_square() {
            return invalid("EBF blocks must all be d x d");
        }
        if !self.sigma.is_nonnegative() {
            return invalid("sigma must be entrywise nonnegative");
        }
        self.nu.validate(d)?;
        for p in &self.power {
            if p.c.len() != d || p.c.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
                return invalid("power term needs d nonnegative coefficients");
            }
            if !(p.alpha > 0.0 && p.alpha <= 1.0) || !(p.beta >= 0.0) || !p.beta.is_finite() {
                return invalid("power term needs alpha in (0, 1] and beta >= 0");
            }
        }
        Ok(())
    }

    /// Entry `(i, j)` as a scalar function.
    pub fn entry(&self, i: usize, j: usize) -> ExtendedBernsteinMatrix {
        let pick = |m: &Matrix| Matrix::scalar(m[(i, j)]);
        ExtendedBernsteinMatrix {
            d: 1,
            b: pick(&self.b),
            sigma: pick(&self.sigma),
            nu: LevyMeasure {
                pieces: self
                    .nu
                    .pieces
                    .iter()
                    .filter(|p| p.mass[(i, j)] > 0.0)
                    .map(|p| LevyPiece { lo: p.lo, hi: p.hi, mass: pick(&p.mass) })
                    .collect(),
            },
            power: if i == j {
                self.power
                    .iter()
                    .filter(|p| p.c[i] > 0.0)
                    .map(|p| PowerTerm { c: vec![p.c[i]], alpha: p.alpha, beta: p.beta })
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        self.b.max_abs() == 0.0 && self.sigma.max_abs() == 0.0 && self.nu.is_empty() && self.power.is_empty()
    }
}

/// `F(lambda)`; spread Lévy pieces use the midpoint rule.
pub fn eval_ebf(f: &ExtendedBernsteinMatrix, lambda: f64) -> Result<Matrix> {
    if !(lambda >= 0.0) {
        return invalid("EBF argument must be nonnegative");
    }
    let mut out = &f.b + &f.sigma.scale(lambda);
    for p in &f.nu.pieces {
        let t = 0.5 * (p.lo + p.hi);
        out = &out + &p.mass.scale(-(-lambda * t).exp_m1());
    }
    for p in &f.power {
        out = &out + &p.value(lambda);
    }
    Ok(out)
}

/// `(Q^T F Q)_II + U_IJ (Id - U_JJ)^{-1} (Q^T F Q)_JI`.
pub fn reduced_varphi(s: &AdmissibleStructure, f: &ExtendedBernsteinMatrix, lambda: f64) -> Result<Matrix> {
    if f.d != s.d() {
        return invalid("EBF and admissible structure dimensions differ");
    }
    let g = &(&s.q.transpose() * &eval_ebf(f, lambda)?) * &s.q;
    let (d, l) = (s.d(), s.ell);
    let g_ii = g.block(0, l, 0, l);
    if l == d {
        return Ok(g_ii);
    }
    let g_ji = g.block(l, d, 0, l);
    Ok(&g_ii + &(&(&s.u_ij() * &s.resolvent_jj()?) * &g_ji))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub min_abs_det: f64,
    /// Grid points where the determinant is below threshold or changes sign
    /// before the next point.
    pub near_singular: Vec<f64>,
}

/// Determinant threshold used by [`is_admissible`].
pub const ADMISSIBLE_DET_TOL: f64 = 1e-10;

/// Scans `lambda_grid` (sorted ascending, starting at `lambda_plus`) for
/// singular values of the reduced function.
pub fn is_admissible(
    s: &AdmissibleStructure,
    f: &ExtendedBernsteinMatrix,
    lambda_grid: &[f64],
) -> Result<AdmissibilityReport> {
    if lambda_grid.is_empty() || lambda_grid.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("lambda grid must be nonempty and strictly increasing");
    }
    let dets: Vec<f64> =
        lambda_grid.iter().map(|&l| reduced_varphi(s, f, l).map(|m| m.det())).collect::<Result<_>>()?;
    let mut near = Vec::new();
    let mut min_abs = f64::INFINITY;
    for (i, (&l, &det)) in lambda_grid.iter().zip(&dets).enumerate() {
        min_abs = min_abs.min(det.abs());
        let flips = dets.get(i + 1).is_some_and(|&next| det * next < 0.0);
        if det.abs() <= ADMISSIBLE_DET_TOL || !det.is_finite() || flips {
            near.push(l);
        }
    }
    Ok(AdmissibilityReport { admissible: near.is_empty(), min_abs_det: min_abs, near_singular: near })
}

/// Log-spaced scan grid on `[lambda_plus, lambda_max]`.
pub fn lambda_scan_grid(lambda_plus: f64, lambda_max: f64, points: usize) -> Vec<f64> {
    let lo = lambda_plus.max(1e-12);
    let points = points.max(2);
    (0..points)
        .map(|i| lo * (lambda_max / lo).powf(i as f64 / (points - 1) as f64))
        .collect()
}

/// Laplace transform of the potential measure:
/// `Q [[phi^{-1}, phi^{-1} U_IJ (Id - U_JJ)^{-1}], [0, 0]] Q^T`.
pub fn potential_laplace(s: &AdmissibleStructure, f: &ExtendedBernsteinMatrix, lambda: f64) -> Result<Matrix> {
    let (d, l) = (s.d(), s.ell);
    let inv = reduced_varphi(s, f, lambda)?
        .inverse()
        .map_err(|_| Error::Numerical(format!("reduced function is singular at lambda = {lambda}")))?;
    let mut m = Matrix::zeros(d, d);
    m.set_block(0, 0, &inv);
    if l < d {
        m.set_block(0, l, &(&(&inv * &s.u_ij()) * &s.resolvent_jj()?));
    }
    Ok(&(&s.q * &m) * &s.q.transpose())
}

/// Measure on `[0, horizon]`: an atom at zero plus masses of the cells
/// `(t_k, t_{k+1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialMeasure {
    pub delta: f64,
    pub atom0: Matrix,
    pub cells: Vec<Matrix>,
}

impl PotentialMeasure {
    pub fn new(delta: f64, atom0: Matrix, cells: Vec<Matrix>) -> Result<Self> {
        check_delta(delta)?;
        let d = atom0.rows();
        if !atom0.is_square() || cells.iter().any(|c| c.rows() != d || c.cols() != d) {
            return invalid("potential measure blocks must be d x d");
        }
        if !atom0.is_diagonal(1e-8) {
            return invalid("atom at zero must be diagonal");
        }
        Ok(Self { delta, atom0, cells })
    }

    /// `scale` times Lebesgue measure.
    pub fn lebesgue(d: usize, delta: f64, horizon: f64, scale: f64) -> Result<Self> {
        let k = steps(delta, horizon)?;
        Self::new(delta, Matrix::zeros(d, d), vec![Matrix::identity(d).scale(scale * delta); k])
    }

    /// `a delta_0`.
    pub fn dirac(delta: f64, horizon: f64, atom: Matrix) -> Result<Self> {
        let k = steps(delta, horizon)?;
        let d = atom.rows();
        Self::new(delta, atom, vec![Matrix::zeros(d, d); k])
    }

    pub fn d(&self) -> usize {
        self.atom0.rows()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.delta * self.cells.len() as f64
    }

    /// `Pi([0, t_k])` for `k = 0..=K`.
    pub fn cumulative(&self) -> GridFunction<Matrix> {
        let mut acc = self.atom0.clone();
        let mut out = Vec::with_capacity(self.cells.len() + 1);
        out.push(acc.clone());
        for c in &self.cells {
            acc = &acc + c;
            out.push(acc.clone());
        }
        GridFunction { delta: self.delta, values: out }
    }

    /// Midpoint Laplace transform over the horizon.
    pub fn laplace(&self, lambda: f64) -> Matrix {
        self.cells.iter().enumerate().fold(self.atom0.clone(), |acc, (k, c)| {
            &acc + &c.scale((-lambda * (k as f64 + 0.5) * self.delta).exp())
        })
    }

    pub fn is_nonnegative(&self, tol: f64) -> bool {
        self.atom0.data().iter().chain(self.cells.iter().flat_map(|c| c.data())).all(|&x| x >= -tol)
    }

    pub fn scale_right(&self, m: &Matrix) -> Self {
        Self { delta: self.delta, atom0: &self.atom0 * m, cells: self.cells.iter().map(|c| c * m).collect() }
    }

    /// Discrete convolution `self * other`; the product of cells `i` and `j`
    /// is split evenly between cells `i + j` and `i + j + 1`.
    pub fn convolve(&self, other: &Self) -> Result<Self> {
        if self.delta != other.delta || self.len() != other.len() || self.d() != other.d() {
            return invalid("convolution needs matching grids");
        }
        let k = self.len();
        let mut cells: Vec<Matrix> = (0..k).map(|j| &(&self.atom0 * &other.cells[j]) + &(&self.cells[j] * &other.atom0)).collect();
        for i in 0..k {
            for j in 0..k - i {
                let p = (&self.cells[i] * &other.cells[j]).scale(0.5);
                cells[i + j] = &cells[i + j] + &p;
                if i + j + 1 < k {
                    cells[i + j + 1] = &cells[i + j + 1] + &p;
                }
            }
        }
        Ok(Self { delta: self.delta, atom0: &self.atom0 * &other.atom0, cells })
    }

    /// Largest entrywise gap between cumulative functions.
    pub fn sup_gap(&self, other: &Self) -> Result<f64> {
        if self.delta != other.delta || self.len() != other.len() {
            return invalid("gap needs matching grids");
        }
        let (a, b) = (self.cumulative(), other.cumulative());
        Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).max_abs()).fold(0.0, f64::max))
    }
}

/// `int_{t0}^{t1} s^{alpha - 1} e^{-beta s} ds`.
fn gamma_density_mass(alpha: f64, beta: f64, t0: f64, t1: f64) -> f64 {
    if t1 <= t0 {
        return 0.0;
    }
    let series = |a: f64, b: f64| {
        let mut sum = 0.0;
        let mut coef = 1.0;
        for m in 0..200 {
            let p = alpha + m as f64;
            let term = coef * (b.powf(p) - a.powf(p)) / p;
            sum += term;
            if term.abs() <= 1e-17 * sum.abs() {
                break;
            }
            coef *= -beta / (m + 1) as f64;
        }
        sum
    };
    if beta == 0.0 || beta * t1 <= 1.0 {
        return series(t0, t1);
    }
    let f = |s: f64| s.powf(alpha - 1.0) * (-beta * s).exp();
    if beta * t0 < 1.0 {
        let split = 1.0 / beta;
        return series(t0, split) + integrate(f, split, t1, 1e-13, 0.0);
    }
    integrate(f, t0, t1, 1e-13, 0.0)
}

/// Split `b` paired with [`potential_measure_closed_form`]: the constant left
/// after removing `c (lambda + beta)^alpha` (or `sigma lambda`) from `F`.
pub fn closed_form_drift(f: &ExtendedBernsteinMatrix) -> Result<Matrix> {
    closed_form_family(f)?;
    let mut b = f.b.clone();
    for p in &f.power {
        if p.alpha < 1.0 {
            b = &b - &Matrix::from_diag(&p.c.iter().map(|c| c * p.beta.powf(p.alpha)).collect::<Vec<_>>());
        }
    }
    Ok(b)
}

enum ClosedFamily {
    Affine(Vec<f64>),
    Power { c: Vec<f64>, alpha: f64, beta: f64 },
}

fn closed_form_family(f: &ExtendedBernsteinMatrix) -> Result<ClosedFamily> {
    f.validate()?;
    if !f.nu.is_empty() {
        return invalid("closed-form potential measure does not support a Lévy measure");
    }
    if !f.sigma.is_diagonal(0.0) {
        return invalid("closed-form potential measure needs diagonal sigma");
    }
    let sigma = f.sigma.diag();
    match f.power.as_slice() {
        [] => {
            if sigma.iter().any(|s| *s <= 0.0) {
                return invalid("affine family needs sigma > 0 on the diagonal");
            }
            Ok(ClosedFamily::Affine(sigma))
        }
        [p] if sigma.iter().all(|s| *s == 0.0) => {
            if p.c.iter().any(|c| *c <= 0.0) {
                return invalid("power family needs c > 0");
            }
            if p.alpha == 1.0 {
                Ok(ClosedFamily::Affine(p.c.clone()))
            } else {
                Ok(ClosedFamily::Power { c: p.c.clone(), alpha: p.alpha, beta: p.beta })
            }
        }
        _ => invalid("closed form supports affine or a single power term only"),
    }
}

/// Potential measure `Pi_0` with Laplace transform `(sigma lambda)^{-1}` or
/// `(c (lambda + beta)^alpha)^{-1}`, i.e. density
/// `t^{alpha - 1} e^{-beta t} / (c Gamma(alpha))`.
pub fn potential_measure_closed_form(f: &ExtendedBernsteinMatrix, delta: f64, horizon: f64) -> Result<PotentialMeasure> {
    let k = steps(delta, horizon)?;
    let d = f.d;
    match closed_form_family(f)? {
        ClosedFamily::Affine(sigma) => {
            let cell = Matrix::from_diag(&sigma.iter().map(|s| delta / s).collect::<Vec<_>>());
            PotentialMeasure::new(delta, Matrix::zeros(d, d), vec![cell; k])
        }
        ClosedFamily::Power { c, alpha, beta } => {
            let g = gamma_fn(alpha);
            let cells = (0..k)
                .into_par_iter()
                .map(|j| {
                    let m = gamma_density_mass(alpha, beta, j as f64 * delta, (j + 1) as f64 * delta) / g;
                    Matrix::from_diag(&c.iter().map(|ci| m / ci).collect::<Vec<_>>())
                })
                .collect();
            PotentialMeasure::new(delta, Matrix::zeros(d, d), cells)
        }
    }
}

pub const DEFAULT_GS_ORDER: usize = 12;

fn stehfest_weights(order: usize) -> Vec<f64> {
    let half = order / 2;
    let fact = |n: usize| (1..=n).fold(1.0f64, |a, i| a * i as f64);
    (1..=order)
        .map(|k| {
            let mut s = 0.0;
            for j in k.div_ceil(2)..=k.min(half) {
                s += (j as f64).powi(half as i32) * fact(2 * j)
                    / (fact(half - j) * fact(j) * fact(j - 1) * fact(k - j) * fact(2 * j - k));
            }
            if (k + half) % 2 == 1 {
                -s
            } else {
                s
            }
        })
        .collect()
}

/// Gaver–Stehfest inversion with the repair applied to reach a nondecreasing
/// cumulative function.
#[derive(Clone, Debug)]
pub struct GsInversion {
    pub measure: PotentialMeasure,
    /// Largest entrywise change made by the monotone repair.
    pub repair: f64,
}

/// Inverts `lambda -> potential_laplace(lambda) / lambda` on the grid.
pub fn potential_inversion_gs(
    s: &AdmissibleStructure,
    f: &ExtendedBernsteinMatrix,
    delta: f64,
    horizon: f64,
    gs_order: usize,
) -> Result<GsInversion> {
    let k = steps(delta, horizon)?;
    if gs_order < 2 || gs_order % 2 == 1 || gs_order > 20 {
        return invalid("Gaver-Stehfest order must be even and in [2, 20]");
    }
    let d = s.d();
    let t_end = delta * k as f64;
    let big = 1e6 / t_end;
    let probes = [big, 10.0 * big, 100.0 * big]
        .iter()
        .map(|&l| potential_laplace(s, f, l))
        .collect::<Result<Vec<_>>>()?;
    let mut atom = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let (x0, x1, x2) = (probes[0][(i, j)], probes[1][(i, j)], probes[2][(i, j)]);
            let den = x2 - 2.0 * x1 + x0;
            let v = if den.abs() > 1e-300 && (x2 - x1).abs() > 1e-15 * x2.abs() {
                x2 - (x2 - x1) * (x2 - x1) / den
            } else {
                x2
            };
            atom[(i, j)] = if v.abs() < 1e-7 { 0.0 } else { v };
        }
    }
    if !atom.is_diagonal(1e-8) {
        return Err(Error::InvalidInput("potential measure has a non-diagonal atom at zero".into()));
    }
    let weights = stehfest_weights(gs_order);
    let ln2 = std::f64::consts::LN_2;
    let raw: Vec<Matrix> = (1..=k)
        .into_par_iter()
        .map(|idx| {
            let t = idx as f64 * delta;
            let mut acc = Matrix::zeros(d, d);
            for (m, w) in weights.iter().enumerate() {
                let lam = (m + 1) as f64 * ln2 / t;
                acc = &acc + &potential_laplace(s, f, lam)?.scale(w / lam);
            }
            Ok(acc.scale(ln2 / t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cum = Vec::with_capacity(k + 1);
    cum.push(atom.clone());
    cum.extend(raw);
    let mut repair: f64 = 0.0;
    let mut running = atom.clone();
    for v in cum.iter_mut().skip(1) {
        let mut fixed = v.clone();
        for i in 0..d {
            for j in 0..d {
                if fixed[(i, j)] < running[(i, j)] {
                    repair = repair.max(running[(i, j)] - fixed[(i, j)]);
                    fixed[(i, j)] = running[(i, j)];
                }
            }
        }
        running = fixed.clone();
        *v = fixed;
    }
    let scale = cum.last().map_or(1.0, |m| m.max_abs()).max(1.0);
    if repair > 1e-3 * scale {
        return numerical(format!("oscillatory Laplace inversion, monotone repair of size {repair:.3e}"));
    }
    let cells = cum.windows(2).map(|w| &w[1] - &w[0]).collect();
    Ok(GsInversion { measure: PotentialMeasure::new(delta, atom, cells)?, repair })
}

/// Solves `Pi_0 = Pi + Pi_0 * (b Pi)` for `Pi` on the grid of `pi0`.
pub fn potential_from_resolvent_eq(pi0: &PotentialMeasure, b: &Matrix) -> Result<PotentialMeasure> {
    let d = pi0.d();
    if b.rows() != d || b.cols() != d {
        return invalid("drift matrix must be d x d");
    }
    let id = Matrix::identity(d);
    let atom_op = &id + &(&pi0.atom0 * b);
    let atom = atom_op
        .inverse_capped(1e13)
        .map_err(|_| Error::Numerical("Id + atom * b is singular".into()))?;
    let atom = &atom * &pi0.atom0;
    let k = pi0.len();
    let lhs = if k > 0 { &atom_op + &(&pi0.cells[0] * b).scale(0.5) } else { atom_op.clone() };
    let lhs_inv = lhs.inverse_capped(1e13).map_err(|_| Error::Numerical("singular resolvent step".into()))?;
    let bc: Vec<Matrix> = pi0.cells.iter().map(|c| c * b).collect();
    let mut cells: Vec<Matrix> = Vec::with_capacity(k);
    for n in 0..k {
        let mut rhs = &pi0.cells[n] - &(&bc[n] * &atom);
        for j in 0..n {
            // cell n receives half of i + j = n and half of i + j = n - 1
            rhs = &rhs - &(&bc[n - j] * &cells[j]).scale(0.5);
            rhs = &rhs - &(&bc[n - 1 - j] * &cells[j]).scale(0.5);
        }
        cells.push(&lhs_inv * &rhs);
    }
    PotentialMeasure::new(pi0.delta, atom, cells)
}

/// Residuals of `Pi_0 = Pi + Pi_0 * (b Pi)` and `Pi_0 = Pi + Pi * (b Pi_0)`,
/// as sup gaps of the cumulative functions.
pub fn resolvent_eq_residuals(pi0: &PotentialMeasure, pi: &PotentialMeasure, b: &Matrix) -> Result<(f64, f64)> {
    let bpi = PotentialMeasure { delta: pi.delta, atom0: b * &pi.atom0, cells: pi.cells.iter().map(|c| b * c).collect() };
    let bpi0 = PotentialMeasure { delta: pi0.delta, atom0: b * &pi0.atom0, cells: pi0.cells.iter().map(|c| b * c).collect() };
    let sum = |x: &PotentialMeasure, y: &PotentialMeasure| PotentialMeasure {
        delta: x.delta,
        atom0: &x.atom0 + &y.atom0,
        cells: x.cells.iter().zip(&y.cells).map(|(a, b)| a + b).collect(),
    };
    let first = sum(pi, &pi0.convolve(&bpi)?);
    let second = sum(pi, &pi.convolve(&bpi0)?);
    Ok((pi0.sup_gap(&first)?, pi0.sup_gap(&second)?))
}

/// Norm of `(Q^T b Q)_IJ + U_IJ (Id - U_JJ)^{-1} (Q^T b Q)_JJ`, which must
/// vanish for the drift-separated form.
pub fn pi0_block_condition(s: &AdmissibleStructure, b: &Matrix) -> Result<f64> {
    let (d, l) = (s.d(), s.ell);
    if l == d {
        return Ok(0.0);
    }
    let g = &(&s.q.transpose() * b) * &s.q;
    let v = &g.block(0, l, l, d) + &(&(&s.u_ij() * &s.resolvent_jj()?) * &g.block(l, d, l, d));
    Ok(v.norm_inf())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

impl std::fmt::Display for Criticality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criticality::Subcritical => "subcritical",
            Criticality::Critical => "critical",
            Criticality::Supercritical => "supercritical",
        })
    }
}

/// Univariate rule: the sign of `b = F(0)`.
pub fn classify_criticality(f: &ExtendedBernsteinMatrix) -> Result<Criticality> {
    if f.d != 1 {
        return invalid("sign rule is univariate; use classify_criticality_heuristic");
    }
    let b = f.b[(0, 0)];
    Ok(if b > 0.0 {
        Criticality::Subcritical
    } else if b == 0.0 {
        Criticality::Critical
    } else {
        Criticality::Supercritical
    })
}

/// Heuristic label from the growth of the cumulative function: ratio of the
/// trace mass in the last quarter of the horizon to the third quarter.
pub fn classify_criticality_heuristic(pi: &PotentialMeasure) -> Result<(Criticality, f64)> {
    let k = pi.len();
    if k < 4 {
        return invalid("heuristic classification needs at least 4 cells");
    }
    let q = k / 4;
    let mass = |r: std::ops::Range<usize>| pi.cells[r].iter().map(|c| c.trace()).sum::<f64>();
    let q3 = mass(k - 2 * q..k - q);
    let q4 = mass(k - q..k);
    let ratio = if q3 > 0.0 { q4 / q3 } else if q4 > 0.0 { f64::INFINITY } else { 0.0 };
    let label = if ratio < 0.9 {
        Criticality::Subcritical
    } else if ratio <= 1.1 {
        Criticality::Critical
    } else {
        Criticality::Supercritical
    };
    Ok((label, ratio))
}

struct EntryConstruction {
    gamma: f64,
    kernel: KernelEntry,
}

fn scalar_prelimit(f: &ExtendedBernsteinMatrix, n: f64) -> Result<EntryConstruction> {
    if !f.power.is_empty() {
        return invalid("prelimit construction needs a finite Lévy measure (power terms unsupported)");
    }
    let b = f.b[(0, 0)];
    let sigma = f.sigma[(0, 0)];
    let total = f.nu.total(1)[(0, 0)];
    let (gamma, eps, beta) = if total < n {
        (n, total / n, if sigma > 0.0 { 1.0 / sigma } else { n })
    } else {
        let gamma = 2.0 * total;
        if sigma > 0.0 {
            (gamma, 0.5, total / (sigma * n))
        } else {
            (gamma, 1.0, f64::INFINITY)
        }
    };
    let lead = 1.0 - b / gamma;
    if lead < 0.0 {
        return numerical(format!("n = {n} is too small for b = {b}"));
    }
    let mut terms = Vec::new();
    if eps < 1.0 {
        terms.push(KernelEntry::Exponential { a: lead * (1.0 - eps) * beta, b: beta });
    }
    if total > 0.0 {
        for p in &f.nu.pieces {
            let m = p.mass[(0, 0)];
            if m == 0.0 {
                continue;
            }
            let lo = p.lo.max(1.0 / n);
            let hi = p.hi.max(lo + 1.0 / n);
            terms.push(KernelEntry::Uniform { a: lead * eps * m / total, lo: n * lo, hi: n * hi });
        }
    }
    let kernel = match terms.len() {
        1 => terms.pop().expect("one term"),
        _ => KernelEntry::Sum { terms },
    };
    Ok(EntryConstruction { gamma, kernel })
}

/// Kernels `psi_n` and scaling `(n, theta_n)` with
/// `gamma_n (A - L_psi_n(lambda / n)) -> f(lambda)`, `gamma_n = sqrt(n theta_n)`.
pub fn build_prelimit_kernels(f: &ExtendedBernsteinMatrix, a: &Matrix, n: u64) -> Result<(Kernel, ScalingScheme)> {
    f.validate()?;
    let d = f.d;
    if a.rows() != d || a.cols() != d || !a.is_nonnegative() {
        return invalid("A must be a nonnegative d x d matrix");
    }
    if n == 0 {
        return invalid("n must be positive");
    }
    let nf = n as f64;
    let mut parts: Vec<Option<EntryConstruction>> = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let fij = f.entry(i, j);
            let aij = a[(i, j)];
            if aij == 0.0 {
                if !fij.is_zero() {
                    return invalid(format!("entry ({i}, {j}) has A = 0 but a nonzero target"));
                }
                parts.push(None);
                continue;
            }
            let scaled = ExtendedBernsteinMatrix {
                d: 1,
                b: fij.b.scale(1.0 / aij),
                sigma: fij.sigma.scale(1.0 / aij),
                nu: LevyMeasure {
                    pieces: fij
                        .nu
                        .pieces
                        .iter()
                        .map(|p| LevyPiece { lo: p.lo, hi: p.hi, mass: p.mass.scale(1.0 / aij) })
                        .collect(),
                },
                power: fij.power.clone(),
            };
            if scaled.is_zero() {
                parts.push(Some(EntryConstruction { gamma: f64::NAN, kernel: KernelEntry::Exponential { a: nf, b: nf } }));
            } else {
                parts.push(Some(scalar_prelimit(&scaled, nf)?));
            }
        }
    }
    let gammas: Vec<f64> = parts.iter().flatten().map(|p| p.gamma).filter(|g| !g.is_nan()).collect();
    let gmax = gammas.iter().cloned().fold(nf, f64::max);
    let equal = gammas.iter().all(|g| (g - gmax).abs() <= 1e-12 * gmax);
    let gamma = if equal { gmax } else { 2.0 * gmax };
    let entries = parts
        .into_iter()
        .enumerate()
        .map(|(idx, p)| {
            let aij = a.data()[idx];
            match p {
                None => KernelEntry::Zero,
                Some(EntryConstruction { gamma: g, kernel }) => {
                    let weight = if g.is_nan() { 0.0 } else { g / gamma };
                    let scaled = scale_entry(&kernel, aij * if g.is_nan() { 1.0 } else { weight });
                    if g.is_nan() || weight == 1.0 {
                        scaled
                    } else {
                        KernelEntry::Sum {
                            terms: vec![KernelEntry::Exponential { a: (1.0 - weight) * aij * nf, b: nf }, scaled],
                        }
                    }
                }
            }
        })
        .collect();
    let kernel = Kernel::new(d, entries)?;
    Ok((kernel, ScalingScheme::new(n, gamma * gamma / nf)?))
}

fn scale_entry(e: &KernelEntry, s: f64) -> KernelEntry {
    match e {
        KernelEntry::Zero => KernelEntry::Zero,
        KernelEntry::Exponential { a, b } => KernelEntry::Exponential { a: a * s, b: *b },
        KernelEntry::PowerLaw { a, kappa, beta } => KernelEntry::PowerLaw { a: a * s, kappa: *kappa, beta: *beta },
        KernelEntry::Gammaish { a, alpha, beta } => KernelEntry::Gammaish { a: a * s, alpha: *alpha, beta: *beta },
        KernelEntry::Uniform { a, lo, hi } => KernelEntry::Uniform { a: a * s, lo: *lo, hi: *hi },
        KernelEntry::Sum { terms } => KernelEntry::Sum { terms: terms.iter().map(|t| scale_entry(t, s)).collect() },
    }
}

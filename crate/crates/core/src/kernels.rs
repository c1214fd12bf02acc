//! Parametric exciting kernels, Laplace transforms, discretized resolvents and
//! the rescaled diagnostics.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_lr};

use crate::error::{invalid, numerical, Error, Result};
use crate::grid::{steps, GridFunction};
use crate::matlin::spectral_radius;
use crate::quad::{integrate, integrate_to_inf};
use crate::Matrix;

const QUAD_REL: f64 = 1e-12;

/// One entry `phi_ij` of an exciting kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelEntry {
    Zero,
    /// `a * exp(-b t)`.
    Exponential { a: f64, b: f64 },
    /// `a * kappa * (1 + t)^(-kappa - 1) * exp(-beta t)`.
    PowerLaw { a: f64, kappa: f64, beta: f64 },
    /// `a * beta^alpha * t^(alpha - 1) * exp(-beta t) / Gamma(alpha)`.
    Gammaish { a: f64, alpha: f64, beta: f64 },
    /// `a / (hi - lo)` on `[lo, hi]`.
    Uniform { a: f64, lo: f64, hi: f64 },
    Sum { terms: Vec<KernelEntry> },
}

impl KernelEntry {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, x: f64| {
            if x >= 0.0 && x.is_finite() {
                Ok(())
            } else {
                invalid(format!("kernel parameter {name} must be finite and nonnegative, got {x}"))
            }
        };
        match *self {
            KernelEntry::Zero => Ok(()),
            KernelEntry::Exponential { a, b } => {
                nonneg("a", a)?;
                nonneg("b", b)?;
                if a > 0.0 && b == 0.0 {
                    return invalid("exponential kernel with b = 0 is not integrable");
                }
                Ok(())
            }
            KernelEntry::PowerLaw { a, kappa, beta } => {
                nonneg("a", a)?;
                nonneg("beta", beta)?;
                if !(kappa > 0.0) || !kappa.is_finite() {
                    return invalid("power-law kernel needs kappa > 0");
                }
                Ok(())
            }
            KernelEntry::Gammaish { a, alpha, beta } => {
                nonneg("a", a)?;
                if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
                    return invalid("gamma-type kernel needs alpha > 0 and beta > 0");
                }
                Ok(())
            }
            KernelEntry::Uniform { a, lo, hi } => {
                nonneg("a", a)?;
                nonneg("lo", lo)?;
                if !(hi > lo) || !hi.is_finite() {
                    return invalid("uniform kernel needs hi > lo");
                }
                Ok(())
            }
            KernelEntry::Sum { ref terms } => terms.iter().try_for_each(|t| t.validate()),
        }
    }

    /// Pointwise value; `+inf` at `t = 0` for singular gamma-type entries.
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match *self {
            KernelEntry::Zero => 0.0,
            KernelEntry::Exponential { a, b } => a * (-b * t).exp(),
            KernelEntry::PowerLaw { a, kappa, beta } => {
                a * kappa * (1.0 + t).powf(-kappa - 1.0) * (-beta * t).exp()
            }
            KernelEntry::Gammaish { a, alpha, beta } => {
                if a == 0.0 {
                    return 0.0;
                }
                if t == 0.0 {
                    return if alpha < 1.0 {
                        f64::INFINITY
                    } else if alpha == 1.0 {
                        a * beta
                    } else {
                        0.0
                    };
                }
                a * (alpha * beta.ln() + (alpha - 1.0) * t.ln() - beta * t - statrs::function::gamma::ln_gamma(alpha))
                    .exp()
            }
            KernelEntry::Uniform { a, lo, hi } => {
                if t >= lo && t <= hi {
                    a / (hi - lo)
                } else {
                    0.0
                }
            }
            KernelEntry::Sum { ref terms } => terms.iter().map(|e| e.eval(t)).sum(),
        }
    }

    /// `int_0^t phi`.
    pub fn cumulative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match *self {
            KernelEntry::Zero => 0.0,
            KernelEntry::Exponential { a, b } => {
                if a == 0.0 {
                    0.0
                } else {
                    -a * (-b * t).exp_m1() / b
                }
            }
            KernelEntry::PowerLaw { a, kappa, beta } => {
                if beta == 0.0 {
                    -a * (-kappa * t.ln_1p()).exp_m1()
                } else {
                    integrate(|s| self.eval(s), 0.0, t, QUAD_REL, 0.0)
                }
            }
            KernelEntry::Gammaish { a, alpha, beta } => a * gamma_lr(alpha, beta * t),
            KernelEntry::Uniform { a, lo, hi } => a * ((t.min(hi) - lo) / (hi - lo)).max(0.0),
            KernelEntry::Sum { ref terms } => terms.iter().map(|e| e.cumulative(t)).sum(),
        }
    }

    /// `int_{t0}^{t1} phi`.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        match *self {
            KernelEntry::Exponential { a, b } if t0 >= 0.0 && a > 0.0 => {
                a * (-b * t0).exp() * -(-b * (t1 - t0)).exp_m1() / b
            }
            KernelEntry::Sum { ref terms } => terms.iter().map(|e| e.integral(t0, t1)).sum(),
            _ => self.cumulative(t1) - self.cumulative(t0),
        }
    }

    /// `int_0^inf phi`.
    pub fn l1(&self) -> f64 {
        match *self {
            KernelEntry::Zero => 0.0,
            KernelEntry::Exponential { a, b } => {
                if a == 0.0 {
                    0.0
                } else {
                    a / b
                }
            }
            KernelEntry::PowerLaw { a, beta, .. } => {
                if beta == 0.0 || a == 0.0 {
                    a
                } else {
                    integrate_to_inf(|s| self.eval(s), 0.0, QUAD_REL, 0.0)
                }
            }
            KernelEntry::Gammaish { a, .. } | KernelEntry::Uniform { a, .. } => a,
            KernelEntry::Sum { ref terms } => terms.iter().map(|e| e.l1()).sum(),
        }
    }

    /// `int_0^inf exp(-lambda t) phi(t) dt`.
    pub fn laplace(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return self.l1();
        }
        match *self {
            KernelEntry::Zero => 0.0,
            KernelEntry::Exponential { a, b } => a / (b + lambda),
            KernelEntry::PowerLaw { a, kappa, beta } => {
                KernelEntry::PowerLaw { a, kappa, beta: beta + lambda }.l1()
            }
            KernelEntry::Gammaish { a, alpha, beta } => a * (beta / (beta + lambda)).powf(alpha),
            KernelEntry::Uniform { a, lo, hi } => {
                a * (-lambda * lo).exp() * -(-lambda * (hi - lo)).exp_m1() / (lambda * (hi - lo))
            }
            KernelEntry::Sum { ref terms } => terms.iter().map(|e| e.laplace(lambda)).sum(),
        }
    }

    /// Upper bound of `phi` on the lag window `[lo, hi]`.
    pub fn sup_on(&self, lo: f64, hi: f64) -> f64 {
        let lo = lo.max(0.0);
        if hi < lo {
            return 0.0;
        }
        match *self {
            KernelEntry::Zero => 0.0,
            KernelEntry::Exponential { .. } | KernelEntry::PowerLaw { .. } => self.eval(lo),
            KernelEntry::Gammaish { alpha, beta, .. } => {
                if alpha <= 1.0 {
                    self.eval(lo)
                } else {
                    let mode = (alpha - 1.0) / beta;
                    if mode >= lo && mode <= hi {
                        self.eval(mode)
                    } else {
                        self.eval(lo).max(self.eval(hi))
                    }
                }
            }
            KernelEntry::Uniform { a, lo: l, hi: h } => {
                if hi >= l && lo <= h {
                    a / (h - l)
                } else {
                    0.0
                }
            }
            KernelEntry::Sum { ref terms } => terms.iter().map(|e| e.sup_on(lo, hi)).sum(),
        }
    }

    pub fn is_singular(&self) -> bool {
        match *self {
            KernelEntry::Gammaish { a, alpha, .. } => a > 0.0 && alpha < 1.0,
            KernelEntry::Sum { ref terms } => terms.iter().any(|e| e.is_singular()),
            _ => false,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.l1() == 0.0
    }

    /// `(a, b)` when the entry is `a * exp(-b t)` (zero counts with any rate).
    pub fn as_exponential(&self) -> Option<(f64, Option<f64>)> {
        match *self {
            KernelEntry::Zero => Some((0.0, None)),
            KernelEntry::Exponential { a, b } => Some((a, if a == 0.0 { None } else { Some(b) })),
            _ => None,
        }
    }

    /// Draws a lag from the normalized density `phi / ||phi||_1`.
    pub fn sample_lag<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            KernelEntry::Zero => f64::INFINITY,
            KernelEntry::Exponential { b, .. } => Exp::new(b).expect("positive rate").sample(rng),
            KernelEntry::PowerLaw { kappa, beta, .. } => loop {
                let u: f64 = 1.0 - rng.random::<f64>();
                let t = u.powf(-1.0 / kappa) - 1.0;
                if beta == 0.0 || rng.random::<f64>() < (-beta * t).exp() {
                    break t;
                }
            },
            KernelEntry::Gammaish { alpha, beta, .. } => {
                Gamma::new(alpha, 1.0 / beta).expect("valid gamma").sample(rng)
            }
            KernelEntry::Uniform { lo, hi, .. } => lo + (hi - lo) * rng.random::<f64>(),
            KernelEntry::Sum { ref terms } => {
                let total: f64 = terms.iter().map(|e| e.l1()).sum();
                let mut u = rng.random::<f64>() * total;
                for e in terms {
                    let w = e.l1();
                    if u < w {
                        return e.sample_lag(rng);
                    }
                    u -= w;
                }
                terms.iter().rev().find(|e| e.l1() > 0.0).map_or(f64::INFINITY, |e| e.sample_lag(rng))
            }
        }
    }
}

/// `d x d` matrix of kernel entries, row-major: entry `(i, j)` is the
/// excitation of component `i` by events of type `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub d: usize,
    pub entries: Vec<KernelEntry>,
}

impl Kernel {
    pub fn new(d: usize, entries: Vec<KernelEntry>) -> Result<Self> {
        if d == 0 || entries.len() != d * d {
            return invalid(format!("kernel of dimension {d} needs {} entries, got {}", d * d, entries.len()));
        }
        entries.iter().try_for_each(|e| e.validate())?;
        Ok(Self { d, entries })
    }

    pub fn scalar(entry: KernelEntry) -> Result<Self> {
        Self::new(1, vec![entry])
    }

    pub fn zero(d: usize) -> Self {
        Self { d, entries: vec![KernelEntry::Zero; d * d] }
    }

    pub fn entry(&self, i: usize, j: usize) -> &KernelEntry {
        &self.entries[i * self.d + j]
    }

    fn matrix_of(&self, f: impl Fn(&KernelEntry) -> f64) -> Matrix {
        Matrix::new(self.d, self.d, self.entries.iter().map(f).collect()).expect("finite kernel values")
    }

    pub fn eval(&self, t: f64) -> Matrix {
        self.matrix_of(|e| e.eval(t))
    }

    pub fn integral(&self, t0: f64, t1: f64) -> Matrix {
        self.matrix_of(|e| e.integral(t0, t1))
    }

    /// `(A, b)` when every nonzero entry is exponential with a common rate `b`.
    pub fn common_rate_exponential(&self) -> Option<(Matrix, f64)> {
        let mut rate = None;
        let mut a = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let (ai, bi) = e.as_exponential()?;
            if let Some(b) = bi {
                match rate {
                    None => rate = Some(b),
                    Some(r) if (r - b).abs() <= 1e-15 * r => {}
                    Some(_) => return None,
                }
            }
            a.push(ai);
        }
        Some((Matrix::new(self.d, self.d, a).ok()?, rate.unwrap_or(1.0)))
    }
}

/// Scaling pair `(n, theta_n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingScheme {
    pub n: u64,
    pub theta: f64,
}

impl ScalingScheme {
    pub fn new(n: u64, theta: f64) -> Result<Self> {
        if n == 0 || !(theta > 0.0) || !theta.is_finite() {
            return invalid("scaling scheme needs n >= 1 and theta > 0");
        }
        Ok(Self { n, theta })
    }

    pub fn nf(&self) -> f64 {
        self.n as f64
    }

    /// `sqrt(n * theta_n)`.
    pub fn gamma(&self) -> f64 {
        (self.nf() * self.theta).sqrt()
    }
}

/// Entrywise `||phi_ij||_1`.
pub fn l1_norm(phi: &Kernel) -> Result<Matrix> {
    phi.entries.iter().try_for_each(|e| e.validate())?;
    let m = phi.matrix_of(|e| e.l1());
    if m.data().iter().any(|x| !x.is_finite()) {
        return numerical("kernel integral diverges");
    }
    Ok(m)
}

/// Entrywise Laplace transform at `lambda >= 0`.
pub fn laplace_kernel(phi: &Kernel, lambda: f64) -> Result<Matrix> {
    if !(lambda >= 0.0) {
        return invalid("Laplace argument must be nonnegative");
    }
    if lambda == 0.0 {
        return l1_norm(phi);
    }
    Ok(phi.matrix_of(|e| e.laplace(lambda)))
}

/// Lag weights `w_m`, `m = 0..=K`: `delta * phi(t_m)` for regular entries and
/// the cell mass over `((m - 1) delta, m delta]` for singular ones.
fn lag_weights(phi: &Kernel, delta: f64, k: usize) -> Vec<Vec<f64>> {
    (0..=k)
        .map(|m| {
            phi.entries
                .iter()
                .map(|e| {
                    if m == 0 {
                        0.0
                    } else if e.is_singular() {
                        e.integral((m - 1) as f64 * delta, m as f64 * delta)
                    } else {
                        delta * e.eval(m as f64 * delta)
                    }
                })
                .collect()
        })
        .collect()
}

/// Resolvent `R = phi + phi * R` on the grid `t_k = k delta`.
///
/// Forward Volterra stepping with lags on the open grid,
/// `R_k = phi(t_k) + delta * sum_{j=1}^{k-1} phi(t_k - t_j) R_j`;
/// the value at `t = 0` is reported as `phi(0)` and never enters a sum.
pub fn resolvent_grid(phi: &Kernel, delta: f64, horizon: f64) -> Result<GridFunction<Matrix>> {
    let k_max = steps(delta, horizon)?;
    phi.entries.iter().try_for_each(|e| e.validate())?;
    let d = phi.d;
    let w = lag_weights(phi, delta, k_max);
    let mut r: Vec<Vec<f64>> = Vec::with_capacity(k_max + 1);
    let r0: Vec<f64> = phi
        .entries
        .iter()
        .enumerate()
        .map(|(idx, e)| {
            let v = e.eval(0.0);
            if v.is_finite() {
                v
            } else {
                w.get(1).map_or(0.0, |w1| w1[idx] / delta)
            }
        })
        .collect();
    r.push(r0);
    for k in 1..=k_max {
        let mut acc: Vec<f64> = w[k].iter().map(|x| x / delta).collect();
        if d == 1 {
            let mut s = 0.0;
            for j in 1..k {
                s += w[k - j][0] * r[j][0];
            }
            acc[0] += s;
        } else {
            for j in 1..k {
                let wl = &w[k - j];
                let rj = &r[j];
                for a in 0..d {
                    for c in 0..d {
                        let wac = wl[a * d + c];
                        if wac == 0.0 {
                            continue;
                        }
                        for b in 0..d {
                            acc[a * d + b] += wac * rj[c * d + b];
                        }
                    }
                }
            }
        }
        r.push(acc);
    }
    let values = r.into_iter().map(|v| Matrix::new(d, d, v)).collect::<Result<Vec<_>>>()?;
    GridFunction::new(delta, values)
}

/// Discrete fixed-point residual of [`resolvent_grid`] output (zero up to
/// rounding by construction).
pub fn resolvent_discrete_residual(phi: &Kernel, r: &GridFunction<Matrix>) -> f64 {
    let delta = r.delta;
    let k_max = r.last();
    let w = lag_weights(phi, delta, k_max);
    let d = phi.d;
    let mut worst: f64 = 0.0;
    for k in 1..=k_max {
        let mut rhs = Matrix::new(d, d, w[k].iter().map(|x| x / delta).collect()).expect("finite");
        for j in 1..k {
            let wl = Matrix::new(d, d, w[k - j].clone()).expect("finite");
            rhs = &rhs + &(&wl * &r.values[j]);
        }
        let scale = rhs.max_abs().max(1.0);
        worst = worst.max((&rhs - &r.values[k]).max_abs() / scale);
    }
    worst
}

/// `|| L_R(lambda) (Id - L_phi(lambda)) - L_phi(lambda) ||_inf` with `L_R` by
/// trapezoidal quadrature of the grid resolvent.
pub fn laplace_identity_check(phi: &Kernel, r: &GridFunction<Matrix>, lambda: f64) -> Result<f64> {
    let d = phi.d;
    let mut lr = Matrix::zeros(d, d);
    let last = r.last();
    for (k, rk) in r.values.iter().enumerate() {
        let w = if k == 0 || k == last { 0.5 } else { 1.0 };
        lr = &lr + &rk.scale(w * r.delta * (-lambda * r.time(k)).exp());
    }
    let lphi = laplace_kernel(phi, lambda)?;
    let lhs = &lr * &(&Matrix::identity(d) - &lphi);
    Ok((&lhs - &lphi).norm_inf())
}

/// `Psi^(n)(lambda) = sqrt(n theta_n) (Id - L_phi_n(lambda / n))`.
pub fn psi_n(phi_n: &Kernel, scheme: &ScalingScheme, lambda: f64) -> Result<Matrix> {
    let l = laplace_kernel(phi_n, lambda / scheme.nf())?;
    Ok((&Matrix::identity(phi_n.d) - &l).scale(scheme.gamma()))
}

/// Whether `Psi^(n)(lambda)` is a nonsingular M-matrix, decided by
/// `rho(L_phi_n(lambda / n)) < 1`.
pub fn psi_n_is_m_matrix(phi_n: &Kernel, scheme: &ScalingScheme, lambda: f64) -> Result<bool> {
    let l = laplace_kernel(phi_n, lambda / scheme.nf())?;
    Ok(spectral_radius(&l, 1e-12)? < 1.0)
}

/// `Phi^(n)(lambda) = sqrt(n theta_n) (K - L_phi_n(lambda / n))` for each `n`.
pub fn varphi_n_limit(
    phi_n_seq: &[Kernel],
    k: &Matrix,
    schemes: &[ScalingScheme],
    lambda: f64,
) -> Result<Vec<Matrix>> {
    if phi_n_seq.len() != schemes.len() {
        return invalid("one scaling scheme per kernel is required");
    }
    phi_n_seq
        .iter()
        .zip(schemes)
        .map(|(phi, s)| {
            let l = laplace_kernel(phi, lambda / s.nf())?;
            Ok((k - &l).scale(s.gamma()))
        })
        .collect()
}

/// Rescaled resolvent `R^(n)(t) = sqrt(n / theta_n) R_n(n t)` and its integral.
#[derive(Clone, Debug)]
pub struct RescaledResolvent {
    pub r: GridFunction<Matrix>,
    pub integrated: GridFunction<Matrix>,
}

impl RescaledResolvent {
    /// Cell masses `I_R(t_{k+1}) - I_R(t_k)`.
    pub fn cell_masses(&self) -> Vec<Matrix> {
        self.integrated.values.windows(2).map(|w| &w[1] - &w[0]).collect()
    }
}

/// Upper bound on fine-grid points for kernels without a closed-form resolvent.
pub const RESCALED_FINE_CAP: usize = 20_000;

/// [`rescaled_resolvent_with`] with an original-time fine step of `0.01`.
pub fn rescaled_resolvent(
    phi_n: &Kernel,
    scheme: &ScalingScheme,
    delta: f64,
    horizon: f64,
) -> Result<RescaledResolvent> {
    rescaled_resolvent_with(phi_n, scheme, delta, horizon, 0.01, RESCALED_FINE_CAP)
}

/// Rescaled resolvent on the grid `k delta`.
///
/// Exponential kernels with a common rate use the closed form
/// `R_n(t) = A exp(-(b Id - A) t)`. Other kernels are resolved on a fine
/// original-time grid of step at most `fine_step`; more than `cap` fine points
/// is an error.
pub fn rescaled_resolvent_with(
    phi_n: &Kernel,
    scheme: &ScalingScheme,
    delta: f64,
    horizon: f64,
    fine_step: f64,
    cap: usize,
) -> Result<RescaledResolvent> {
    let k_max = steps(delta, horizon)?;
    let d = phi_n.d;
    let n = scheme.nf();
    let c = (n / scheme.theta).sqrt();
    if let Some((a, b)) = phi_n.common_rate_exponential() {
        let m = &Matrix::identity(d).scale(b) - &a;
        let h = n * delta;
        let step = m.scale(-h).expm();
        // int_0^h exp(-M s) ds from the exponential of [[-M, Id], [0, 0]] h.
        let mut aug = Matrix::zeros(2 * d, 2 * d);
        aug.set_block(0, 0, &m.scale(-h));
        aug.set_block(0, d, &Matrix::identity(d).scale(h));
        let cell = aug.expm().block(0, d, d, 2 * d);
        let mut e = Matrix::identity(d);
        let mut acc = Matrix::zeros(d, d);
        let mut r = Vec::with_capacity(k_max + 1);
        let mut ir = Vec::with_capacity(k_max + 1);
        for _ in 0..=k_max {
            r.push((&a * &e).scale(c));
            ir.push((&a * &acc).scale(c / n));
            acc = &acc + &(&e * &cell);
            e = &e * &step;
        }
        return Ok(RescaledResolvent { r: GridFunction::new(delta, r)?, integrated: GridFunction::new(delta, ir)? });
    }
    let sub = ((n * delta) / fine_step).ceil().max(1.0) as usize;
    let fine = n * delta / sub as f64;
    let points = k_max * sub + 1;
    if points > cap {
        return Err(Error::Numerical(format!(
            "rescaled resolvent needs {points} fine grid points, above the cap {cap}"
        )));
    }
    let rf = resolvent_grid(phi_n, fine, fine * (k_max * sub) as f64)?;
    let mut r = Vec::with_capacity(k_max + 1);
    let mut ir = Vec::with_capacity(k_max + 1);
    let mut acc = Matrix::zeros(d, d);
    for k in 0..=k_max {
        if k > 0 {
            for j in (k - 1) * sub..k * sub {
                let trap = (&rf.values[j] + &rf.values[j + 1]).scale(0.5 * fine);
                acc = &acc + &trap;
            }
        }
        r.push(rf.values[k * sub].scale(c));
        ir.push(acc.scale(c / n));
    }
    Ok(RescaledResolvent { r: GridFunction::new(delta, r)?, integrated: GridFunction::new(delta, ir)? })
}

/// `Gamma(x)` re-exported for closed-form densities.
pub(crate) fn gamma_fn(x: f64) -> f64 {
    gamma(x)
}

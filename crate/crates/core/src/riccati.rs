//! Prelimit, rescaled and limit Riccati–Volterra equations and their
//! exponential-affine Fourier–Laplace formulas.

use serde::{Deserialize, Serialize};

use crate::bernstein::PotentialMeasure;
use crate::error::{invalid, Error, Result};
use crate::grid::{steps, GridFunction};
use crate::hawkes::ExogenousInput;
use crate::kernels::{rescaled_resolvent, Kernel, RescaledResolvent, ScalingScheme};
use crate::{Matrix, C64};

/// Tolerance of the `Re V <= 0` checks.
pub const TOL_POS: f64 = 1e-8;

/// Row-vector test functions `f` (Re <= 0) and `h` (purely imaginary).
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunctions {
    pub f: GridFunction<Vec<C64>>,
    pub h: GridFunction<Vec<C64>>,
}

impl TestFunctions {
    pub fn new(f: GridFunction<Vec<C64>>, h: GridFunction<Vec<C64>>) -> Result<Self> {
        let tf = Self { f, h };
        tf.validate()?;
        Ok(tf)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f.delta != self.h.delta || self.f.len() != self.h.len() {
            return invalid("f and h must share a grid");
        }
        let d = self.d();
        for (fv, hv) in self.f.values.iter().zip(&self.h.values) {
            if fv.len() != d || hv.len() != d {
                return invalid("test functions must keep a fixed dimension");
            }
            if fv.iter().any(|z| z.re > 1e-14 || !z.is_finite()) {
                return invalid("Re f must be nonpositive");
            }
            if hv.iter().any(|z| z.re.abs() > 1e-14 || !z.is_finite()) {
                return invalid("h must be purely imaginary");
            }
        }
        Ok(())
    }

    pub fn from_fn(
        d: usize,
        delta: f64,
        horizon: f64,
        f: impl Fn(f64) -> Vec<C64>,
        h: impl Fn(f64) -> Vec<C64>,
    ) -> Result<Self> {
        let k = steps(delta, horizon)?;
        let grid = |g: &dyn Fn(f64) -> Vec<C64>| GridFunction::new(delta, (0..=k).map(|i| g(i as f64 * delta)).collect());
        let tf = Self::new(grid(&f)?, grid(&h)?)?;
        if tf.d() != d {
            return invalid("test function dimension mismatch");
        }
        Ok(tf)
    }

    pub fn constant(delta: f64, horizon: f64, f: &[C64], h: &[C64]) -> Result<Self> {
        if f.len() != h.len() {
            return invalid("f and h must have the same dimension");
        }
        Self::from_fn(f.len(), delta, horizon, |_| f.to_vec(), |_| h.to_vec())
    }

    pub fn zero(d: usize, delta: f64, horizon: f64) -> Result<Self> {
        let z = vec![C64::new(0.0, 0.0); d];
        Self::constant(delta, horizon, &z, &z)
    }

    pub fn d(&self) -> usize {
        self.f.values[0].len()
    }

    pub fn is_zero(&self) -> bool {
        self.f.values.iter().chain(&self.h.values).all(|v| v.iter().all(|z| z.norm() == 0.0))
    }

    fn covers(&self, delta: f64, k: usize, d: usize) -> Result<()> {
        if (self.f.delta - delta).abs() > 1e-12 * delta {
            return invalid(format!("test functions use step {} but the solver uses {delta}", self.f.delta));
        }
        if self.f.len() < k + 1 {
            return invalid("test functions do not cover the horizon");
        }
        if self.d() != d {
            return invalid("test function dimension does not match the kernel");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiccatiKind {
    Prelimit,
    Rescaled { n: u64, theta: f64 },
    Limit,
}

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub v: GridFunction<Vec<C64>>,
    pub w: GridFunction<Vec<C64>>,
    pub kind: RiccatiKind,
    /// Steps where the discarded quadratic root also had `Re <= 0`.
    pub flagged_steps: Vec<usize>,
    pub max_re_v: f64,
}

/// `e^x - 1 - x`, componentwise.
pub fn w_exp(x: &[C64]) -> Vec<C64> {
    x.iter().map(|&z| w_exp_scalar(z)).collect()
}

fn w_exp_scalar(z: C64) -> C64 {
    if z.norm() < 0.1 {
        let mut term = z * z / 2.0;
        let mut sum = term;
        for k in 3..=12 {
            term = term * z / k as f64;
            sum += term;
        }
        sum
    } else {
        z.exp() - 1.0 - z
    }
}

fn check_re(v: &[C64], k: usize, max_re: &mut f64) -> Result<()> {
    for z in v {
        *max_re = max_re.max(z.re);
        if z.re > TOL_POS || !z.is_finite() {
            return Err(Error::Numerical(format!("Re V = {:.3e} > 0 at step {k}: grid too coarse or invalid input", z.re)));
        }
    }
    Ok(())
}

/// Solves `V = W * R`, `W = f + w_exp(V + h)` on the grid of `r`:
/// `V_k = delta * sum_{m=0}^{k-1} W_m R_{k-m}`.
pub fn solve_prelimit(r: &GridFunction<Matrix>, tf: &TestFunctions, horizon: f64) -> Result<RiccatiSolution> {
    tf.validate()?;
    let delta = r.delta;
    let k_max = steps(delta, horizon)?;
    if r.len() < k_max + 1 {
        return invalid("resolvent grid does not cover the horizon");
    }
    let d = r.values[0].rows();
    tf.covers(delta, k_max, d)?;
    let mut v: Vec<Vec<C64>> = Vec::with_capacity(k_max + 1);
    let mut w: Vec<Vec<C64>> = Vec::with_capacity(k_max + 1);
    let mut max_re = f64::NEG_INFINITY;
    for k in 0..=k_max {
        let mut vk = vec![C64::new(0.0, 0.0); d];
        for (m, wm) in w.iter().enumerate() {
            let rm = &r.values[k - m];
            for j in 0..d {
                for i in 0..d {
                    vk[j] += wm[i] * rm[(i, j)];
                }
            }
        }
        for z in vk.iter_mut() {
            *z *= delta;
        }
        check_re(&vk, k, &mut max_re)?;
        let x: Vec<C64> = vk.iter().zip(&tf.h.values[k]).map(|(a, b)| a + b).collect();
        let wk: Vec<C64> = tf.f.values[k].iter().zip(w_exp(&x)).map(|(a, b)| a + b).collect();
        v.push(vk);
        w.push(wk);
    }
    Ok(RiccatiSolution {
        v: GridFunction::new(delta, v)?,
        w: GridFunction::new(delta, w)?,
        kind: RiccatiKind::Prelimit,
        flagged_steps: Vec::new(),
        max_re_v: max_re,
    })
}

/// `exp{delta * sum_{j=1}^{K} W_{K-j} H_j}`.
pub fn fourier_laplace_hawkes(sol: &RiccatiSolution, h: &GridFunction<Vec<f64>>, horizon: f64) -> Result<C64> {
    let delta = sol.w.delta;
    if (h.delta - delta).abs() > 1e-12 * delta {
        return invalid("baseline grid does not match the solution grid");
    }
    let k = steps(delta, horizon)?;
    if sol.w.len() < k + 1 || h.len() < k + 1 {
        return invalid("grids do not cover the horizon");
    }
    let mut acc = C64::new(0.0, 0.0);
    for j in 1..=k {
        acc += sol.w.values[k - j].iter().zip(&h.values[j]).map(|(w, x)| w * x).sum::<C64>();
    }
    Ok((acc * delta).exp())
}

/// Discrete kernel convolutions entering the prelimit bounds, on the grid of
/// `r`: returns `(Re(f * phi), Im((f - h) * phi), 1 * phi)` per step.
pub fn prelimit_bounds(phi: &Kernel, tf: &TestFunctions, k_max: usize) -> Result<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> {
    let delta = tf.f.delta;
    let d = phi.d;
    tf.covers(delta, k_max, d)?;
    let weights: Vec<Matrix> = (0..=k_max)
        .map(|m| {
            if m == 0 {
                Matrix::zeros(d, d)
            } else {
                Matrix::new(
                    d,
                    d,
                    phi.entries
                        .iter()
                        .map(|e| {
                            if e.is_singular() {
                                e.integral((m - 1) as f64 * delta, m as f64 * delta)
                            } else {
                                delta * e.eval(m as f64 * delta)
                            }
                        })
                        .collect(),
                )
                .expect("finite weights")
            }
        })
        .collect();
    let mut out = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut re_f = vec![0.0; d];
        let mut im_fh = vec![0.0; d];
        let mut ones = vec![0.0; d];
        for m in 0..k {
            let wgt = &weights[k - m];
            for j in 0..d {
                for i in 0..d {
                    let x = wgt[(i, j)];
                    re_f[j] += tf.f.values[m][i].re * x;
                    im_fh[j] += (tf.f.values[m][i].im - tf.h.values[m][i].im) * x;
                    ones[j] += x;
                }
            }
        }
        out.push((re_f, im_fh, ones));
    }
    Ok(out)
}

/// Largest violations of `Re(f*phi) - 2 (1*phi) <= Re V <= Re(f*phi)` and
/// `|Im V| <= |Im((f - h)*phi)| + 1*phi` (zero when both hold).
pub fn prelimit_bound_violation(phi: &Kernel, tf: &TestFunctions, sol: &RiccatiSolution) -> Result<(f64, f64)> {
    let k_max = sol.v.last();
    let bounds = prelimit_bounds(phi, tf, k_max)?;
    let mut re_viol: f64 = 0.0;
    let mut im_viol: f64 = 0.0;
    for (k, (re_f, im_fh, ones)) in bounds.iter().enumerate() {
        for (j, z) in sol.v.values[k].iter().enumerate() {
            let slack = 1e-12 * (1.0 + ones[j] + re_f[j].abs());
            re_viol = re_viol.max(z.re - re_f[j] - slack).max(re_f[j] - 2.0 * ones[j] - z.re - slack);
            im_viol = im_viol.max(z.im.abs() - im_fh[j].abs() - ones[j] - slack);
        }
    }
    Ok((re_viol.max(0.0), im_viol.max(0.0)))
}

fn solve_measure_kernel(
    atom: &[f64],
    cells: &[Matrix],
    tf: &TestFunctions,
    delta: f64,
    k_max: usize,
    kind: RiccatiKind,
    nonlinearity: impl Fn(C64) -> C64,
) -> Result<RiccatiSolution> {
    let d = atom.len();
    tf.covers(delta, k_max, d)?;
    let mut v: Vec<Vec<C64>> = Vec::with_capacity(k_max + 1);
    let mut w: Vec<Vec<C64>> = Vec::with_capacity(k_max + 1);
    let mut flagged = Vec::new();
    let mut max_re = f64::NEG_INFINITY;
    for k in 0..=k_max {
        let mut c = vec![C64::new(0.0, 0.0); d];
        for j in 0..k.min(cells.len()) {
            let wl = &w[k - 1 - j];
            let p = &cells[j];
            for col in 0..d {
                for i in 0..d {
                    c[col] += wl[i] * p[(i, col)];
                }
            }
        }
        let f = &tf.f.values[k];
        let h = &tf.h.values[k];
        let mut vk = Vec::with_capacity(d);
        for i in 0..d {
            let a = atom[i];
            if a == 0.0 {
                vk.push(c[i]);
                continue;
            }
            let one_ah = C64::new(1.0, 0.0) - h[i] * a;
            let cc = f[i] * a + h[i] * h[i] * (a / 2.0) + c[i];
            let disc = one_ah * one_ah - cc * (2.0 * a);
            let sq = disc.sqrt();
            let den = one_ah + sq;
            if den.norm() == 0.0 {
                return Err(Error::Numerical(format!("degenerate quadratic at step {k}")));
            }
            let root = cc * 2.0 / den;
            let other = (one_ah + sq) / a;
            if other.re <= TOL_POS {
                flagged.push(k);
            }
            vk.push(root);
        }
        check_re(&vk, k, &mut max_re)?;
        let wk: Vec<C64> = (0..d).map(|i| f[i] + nonlinearity(vk[i] + h[i])).collect();
        v.push(vk);
        w.push(wk);
    }
    flagged.dedup();
    Ok(RiccatiSolution {
        v: GridFunction::new(delta, v)?,
        w: GridFunction::new(delta, w)?,
        kind,
        flagged_steps: flagged,
        max_re_v: max_re,
    })
}

/// Solves `V = W * Pi`, `W = f + (V + h)^2 / 2` with left-boundary lags and the
/// atom of `Pi` handled implicitly through the stable quadratic root.
pub fn solve_limit(pi: &PotentialMeasure, tf: &TestFunctions, horizon: f64) -> Result<RiccatiSolution> {
    tf.validate()?;
    if !pi.atom0.is_diagonal(0.0) {
        return invalid("limit Riccati needs a diagonal atom at zero");
    }
    let k_max = steps(pi.delta, horizon)?;
    if pi.len() < k_max {
        return invalid("potential measure does not cover the horizon");
    }
    solve_measure_kernel(&pi.atom0.diag(), &pi.cells, tf, pi.delta, k_max, RiccatiKind::Limit, |x| x * x / 2.0)
}

/// `exp{sum_j W_{K-1-j} (Y_{j+1} - Y_j) + W_K Y_0}` for the nondecreasing
/// baseline `Y`.
pub fn fourier_laplace_limit(sol: &RiccatiSolution, upsilon: &GridFunction<Vec<f64>>, horizon: f64) -> Result<C64> {
    let delta = sol.w.delta;
    if (upsilon.delta - delta).abs() > 1e-12 * delta {
        return invalid("baseline grid does not match the solution grid");
    }
    let k = steps(delta, horizon)?;
    if sol.w.len() < k + 1 || upsilon.len() < k + 1 {
        return invalid("grids do not cover the horizon");
    }
    if upsilon.values.windows(2).any(|p| p[0].iter().zip(&p[1]).any(|(a, b)| b < a))
        || upsilon.values[0].iter().any(|x| *x < 0.0)
    {
        return invalid("baseline must be nonnegative and nondecreasing");
    }
    Ok(stieltjes(&sol.w, upsilon, k).exp())
}

fn stieltjes(w: &GridFunction<Vec<C64>>, y: &GridFunction<Vec<f64>>, k: usize) -> C64 {
    let mut acc: C64 = w.values[k].iter().zip(&y.values[0]).map(|(a, b)| a * b).sum();
    for j in 0..k {
        let wl = &w.values[k - 1 - j];
        acc += wl.iter().zip(y.values[j + 1].iter().zip(&y.values[j])).map(|(a, (y1, y0))| a * (y1 - y0)).sum::<C64>();
    }
    acc
}

/// Solves the rescaled equation `V = W * R^(n)`,
/// `W = f + n theta w_exp((V + h) / sqrt(n theta))`, using the cell masses of
/// the integrated rescaled resolvent.
pub fn solve_rescaled(
    phi_n: &Kernel,
    scheme: &ScalingScheme,
    tf: &TestFunctions,
    horizon: f64,
) -> Result<(RiccatiSolution, RescaledResolvent)> {
    tf.validate()?;
    let delta = tf.f.delta;
    let rr = rescaled_resolvent(phi_n, scheme, delta, horizon)?;
    let sol = solve_rescaled_with(&rr, scheme, tf, horizon)?;
    Ok((sol, rr))
}

/// [`solve_rescaled`] with a precomputed rescaled resolvent.
pub fn solve_rescaled_with(
    rr: &RescaledResolvent,
    scheme: &ScalingScheme,
    tf: &TestFunctions,
    horizon: f64,
) -> Result<RiccatiSolution> {
    let delta = rr.integrated.delta;
    let k_max = steps(delta, horizon)?;
    let d = rr.r.values[0].rows();
    let cells = rr.cell_masses();
    let g = scheme.gamma();
    let g2 = g * g;
    solve_measure_kernel(
        &vec![0.0; d],
        &cells,
        tf,
        delta,
        k_max,
        RiccatiKind::Rescaled { n: scheme.n, theta: scheme.theta },
        move |x| w_exp_scalar(x / g) * g2,
    )
}

/// `I_{H^(n)}` on the rescaled grid for exogenous input `mu_n` of the prelimit
/// model: `I_{mu^(n)} / sqrt(n theta) + I_{R^(n)} * dI_{mu^(n)}` with
/// `I_{mu^(n)}(t) = I_{mu_n}(n t) / sqrt(n theta)`.
pub fn rescaled_baseline(rr: &RescaledResolvent, scheme: &ScalingScheme, mu_n: &ExogenousInput) -> Result<GridFunction<Vec<f64>>> {
    let delta = rr.integrated.delta;
    let k = rr.integrated.last();
    let d = rr.r.values[0].rows();
    mu_n.validate(d)?;
    let g = scheme.gamma();
    let n = scheme.nf();
    let imu: Vec<Vec<f64>> = (0..=k).map(|j| mu_n.cumulative(n * j as f64 * delta).iter().map(|x| x / g).collect()).collect();
    let dmu: Vec<Vec<f64>> = imu.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect();
    let cells = rr.cell_masses();
    let mut out = Vec::with_capacity(k + 1);
    out.push(imu[0].iter().map(|x| x / g).collect::<Vec<f64>>());
    let mut acc = out[0].clone();
    let mut conv = vec![vec![0.0; d]; k];
    for i in 0..k {
        for j in 0..k - i {
            let p = cells[i].mat_vec(&dmu[j]);
            for c in 0..d {
                conv[i + j][c] += 0.5 * p[c];
                if i + j + 1 < k {
                    conv[i + j + 1][c] += 0.5 * p[c];
                }
            }
        }
    }
    for m in 0..k {
        for c in 0..d {
            acc[c] += dmu[m][c] / g + conv[m][c];
        }
        out.push(acc.clone());
    }
    GridFunction::new(delta, out)
}

/// `exp{sum_j W_{K-1-j} (I_{j+1} - I_j) + W_K I_0}` for the rescaled solution
/// and integrated baseline `I_{H^(n)}`.
pub fn fourier_laplace_rescaled(sol: &RiccatiSolution, i_h: &GridFunction<Vec<f64>>, horizon: f64) -> Result<C64> {
    let k = steps(sol.w.delta, horizon)?;
    if sol.w.len() < k + 1 || i_h.len() < k + 1 {
        return invalid("grids do not cover the horizon");
    }
    Ok(stieltjes(&sol.w, i_h, k).exp())
}

/// One prelimit model in a convergence study.
#[derive(Clone, Debug)]
pub struct PrelimitCase {
    pub phi_n: Kernel,
    pub scheme: ScalingScheme,
    pub mu_n: ExogenousInput,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: u64,
    pub v_gap: f64,
    pub fl_gap: f64,
    pub fl_rescaled_re: f64,
    pub fl_rescaled_im: f64,
    pub fl_limit_re: f64,
    pub fl_limit_im: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Functional gaps strictly decrease along the sequence.
    pub monotone: bool,
}

/// Gaps `sup |V^(n) - V|` and `|exp{W^(n) * dI_{H^(n)}(T)} - exp{W * dY(T)}|`
/// for each prelimit case.
pub fn riccati_convergence_report(
    cases: &[PrelimitCase],
    pi: &PotentialMeasure,
    upsilon: &GridFunction<Vec<f64>>,
    tf: &TestFunctions,
    horizon: f64,
) -> Result<ConvergenceReport> {
    let limit = solve_limit(pi, tf, horizon)?;
    let target = fourier_laplace_limit(&limit, upsilon, horizon)?;
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let (sol, rr) = solve_rescaled(&case.phi_n, &case.scheme, tf, horizon)?;
        let i_h = rescaled_baseline(&rr, &case.scheme, &case.mu_n)?;
        let fl = fourier_laplace_rescaled(&sol, &i_h, horizon)?;
        let v_gap = sol
            .v
            .values
            .iter()
            .zip(&limit.v.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max);
        rows.push(ConvergenceRow {
            n: case.scheme.n,
            v_gap,
            fl_gap: (fl - target).norm(),
            fl_rescaled_re: fl.re,
            fl_rescaled_im: fl.im,
            fl_limit_re: target.re,
            fl_limit_im: target.im,
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].fl_gap < w[0].fl_gap);
    Ok(ConvergenceReport { rows, monotone })
}

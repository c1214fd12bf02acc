//! Multivariate Hawkes processes: intensity, exact simulation, the mean
//! intensity `H = mu + R * mu`, rescaled paths and Monte Carlo functionals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{index_of, interp, steps, GridFunction};
use crate::kernels::{resolvent_grid, Kernel, ScalingScheme};
use crate::mc::{mean_se_complex, path_rng};
use crate::riccati::TestFunctions;
use crate::C64;

/// Exogenous intensity `mu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ExogenousInput {
    Constant { mu: Vec<f64> },
    /// Piecewise-linear samples on `k delta`, held constant past the end.
    Grid { delta: f64, values: Vec<Vec<f64>> },
    /// `mu(t) = phi(t) c`: the impact of `c_j` type-`j` events at time zero.
    Impact { kernel: Kernel, weights: Vec<f64> },
}

impl ExogenousInput {
    pub fn constant(mu: Vec<f64>) -> Self {
        Self::Constant { mu }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Constant { mu } => mu.len(),
            Self::Grid { values, .. } => values.first().map_or(0, |v| v.len()),
            Self::Impact { kernel, .. } => kernel.d,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return invalid(format!("exogenous input has dimension {} but the kernel has {d}", self.dim()));
        }
        let bad = |x: &f64| !(*x >= 0.0) || !x.is_finite();
        match self {
            Self::Constant { mu } => {
                if mu.iter().any(bad) {
                    return invalid("mu must be finite and nonnegative");
                }
            }
            Self::Grid { delta, values } => {
                if !(*delta > 0.0) || values.iter().any(|v| v.len() != d || v.iter().any(bad)) {
                    return invalid("grid exogenous input needs delta > 0 and nonnegative rows of length d");
                }
            }
            Self::Impact { kernel, weights } => {
                if weights.len() != d || weights.iter().any(bad) {
                    return invalid("impact weights must be d nonnegative numbers");
                }
                kernel.entries.iter().try_for_each(|e| e.validate())?;
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        match self {
            Self::Constant { mu } => mu.clone(),
            Self::Grid { delta, values } => {
                let d = values[0].len();
                (0..d)
                    .map(|i| {
                        let col: Vec<f64> = values.iter().map(|v| v[i]).collect();
                        interp(*delta, &col, t)
                    })
                    .collect()
            }
            Self::Impact { kernel, weights } => kernel.eval(t).mat_vec(weights),
        }
    }

    /// `int_0^t mu`.
    pub fn cumulative(&self, t: f64) -> Vec<f64> {
        if t <= 0.0 {
            return vec![0.0; self.dim()];
        }
        match self {
            Self::Constant { mu } => mu.iter().map(|m| m * t).collect(),
            Self::Grid { delta, values } => {
                let d = values[0].len();
                let mut acc = vec![0.0; d];
                let last = values.len() - 1;
                let mut k = 0;
                while k < last && (k + 1) as f64 * delta <= t {
                    for i in 0..d {
                        acc[i] += 0.5 * delta * (values[k][i] + values[k + 1][i]);
                    }
                    k += 1;
                }
                let t0 = k as f64 * delta;
                let tail = self.eval(t);
                for i in 0..d {
                    acc[i] += 0.5 * (t - t0) * (values[k][i] + tail[i]);
                }
                acc
            }
            Self::Impact { kernel, weights } => kernel.integral(0.0, t).mat_vec(weights),
        }
    }

    /// Upper bound of each component on `[lo, hi]`.
    pub fn sup_on(&self, lo: f64, hi: f64) -> Vec<f64> {
        match self {
            Self::Constant { mu } => mu.clone(),
            Self::Grid { delta, values } => {
                let d = values[0].len();
                let mut out = self.eval(lo);
                let end = self.eval(hi);
                for i in 0..d {
                    out[i] = out[i].max(end[i]);
                }
                let k0 = (lo / delta).ceil().max(0.0) as usize;
                let k1 = ((hi / delta).floor() as usize).min(values.len() - 1);
                for v in values.iter().take(k1 + 1).skip(k0) {
                    for i in 0..d {
                        out[i] = out[i].max(v[i]);
                    }
                }
                out
            }
            Self::Impact { kernel, weights } => (0..kernel.d)
                .map(|i| (0..kernel.d).map(|j| weights[j] * kernel.entry(i, j).sup_on(lo, hi)).sum())
                .collect(),
        }
    }
}

/// Simulated event times per component on `(0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesPath {
    pub horizon: f64,
    pub events: Vec<Vec<f64>>,
    pub seed: u64,
    pub path_index: u64,
}

impl HawkesPath {
    pub fn d(&self) -> usize {
        self.events.len()
    }

    /// `N_i(t)` for every component.
    pub fn counts_at(&self, t: f64) -> Vec<u64> {
        self.events.iter().map(|ev| ev.partition_point(|&s| s <= t) as u64).collect()
    }

    pub fn total_events(&self) -> usize {
        self.events.iter().map(|e| e.len()).sum()
    }
}

/// `Lambda_i(t) = mu_i(t) + sum_j sum_{tau < t} phi_ij(t - tau)`.
pub fn intensity_at(phi: &Kernel, mu: &ExogenousInput, events: &[Vec<f64>], t: f64) -> Vec<f64> {
    let mut out = mu.eval(t);
    for (i, o) in out.iter_mut().enumerate() {
        for (j, ev) in events.iter().enumerate() {
            let e = phi.entry(i, j);
            if e.is_zero() {
                continue;
            }
            *o += ev.iter().take_while(|&&s| s < t).map(|&s| e.eval(t - s)).sum::<f64>();
        }
    }
    out
}

/// `I_Lambda(t) = int_0^t Lambda`, exact through integrated kernels.
pub fn compensator(phi: &Kernel, mu: &ExogenousInput, path: &HawkesPath, t: f64) -> Vec<f64> {
    let mut out = mu.cumulative(t);
    for (i, o) in out.iter_mut().enumerate() {
        for (j, ev) in path.events.iter().enumerate() {
            let e = phi.entry(i, j);
            if e.is_zero() {
                continue;
            }
            *o += ev.iter().take_while(|&&s| s < t).map(|&s| e.cumulative(t - s)).sum::<f64>();
        }
    }
    out
}

/// `I_Lambda` at every grid point `k delta`, `k = 0..=K`.
pub fn compensator_grid(phi: &Kernel, mu: &ExogenousInput, path: &HawkesPath, delta: f64, k_max: usize) -> Vec<Vec<f64>> {
    let d = phi.d;
    let mut out: Vec<Vec<f64>> = (0..=k_max).map(|k| mu.cumulative(k as f64 * delta)).collect();
    for (j, ev) in path.events.iter().enumerate() {
        for &s in ev {
            let k0 = (s / delta).floor() as usize;
            for (k, row) in out.iter_mut().enumerate().skip(k0) {
                let lag = k as f64 * delta - s;
                if lag <= 0.0 {
                    continue;
                }
                for (i, x) in row.iter_mut().enumerate().take(d) {
                    let e = phi.entry(i, j);
                    if !e.is_zero() {
                        *x += e.cumulative(lag);
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimOptions {
    /// Refresh interval of the thinning bound.
    pub dom_window: f64,
    /// Explosion guard on the total number of events.
    pub event_cap: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { dom_window: 0.1, event_cap: 1_000_000 }
    }
}

/// [`simulate_path`] for path index 0 with default options.
pub fn simulate(phi: &Kernel, mu: &ExogenousInput, horizon: f64, seed: u64) -> Result<HawkesPath> {
    simulate_path(phi, mu, horizon, seed, 0, &SimOptions::default())
}

/// Exact sample on `(0, horizon]` from the stream `(seed, path_index)`.
///
/// Singular kernels use the cluster representation; everything else uses
/// Ogata thinning with bounds refreshed at events and every `dom_window`.
pub fn simulate_path(
    phi: &Kernel,
    mu: &ExogenousInput,
    horizon: f64,
    seed: u64,
    path_index: u64,
    opts: &SimOptions,
) -> Result<HawkesPath> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return invalid("horizon must be positive");
    }
    if !(opts.dom_window > 0.0) {
        return invalid("thinning window must be positive");
    }
    phi.entries.iter().try_for_each(|e| e.validate())?;
    mu.validate(phi.d)?;
    let mut rng = path_rng(seed, path_index);
    let singular = phi.entries.iter().any(|e| e.is_singular())
        || matches!(mu, ExogenousInput::Impact { kernel, .. } if kernel.entries.iter().any(|e| e.is_singular()));
    let events = if singular {
        simulate_cluster(phi, mu, horizon, opts, &mut rng)?
    } else if let Some(rates) = exponential_rates(phi) {
        simulate_exponential(phi, &rates, mu, horizon, opts, &mut rng)?
    } else {
        simulate_thinning(phi, mu, horizon, opts, &mut rng)?
    };
    Ok(HawkesPath { horizon, events, seed, path_index })
}

fn exponential_rates(phi: &Kernel) -> Option<Vec<(f64, f64)>> {
    phi.entries
        .iter()
        .map(|e| e.as_exponential().map(|(a, b)| (a, b.unwrap_or(0.0))))
        .collect()
}

fn cap_error(cap: usize) -> Error {
    Error::Numerical(format!("event cap {cap} exceeded: the model is likely supercritical"))
}

fn pick(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn simulate_exponential(
    phi: &Kernel,
    rates: &[(f64, f64)],
    mu: &ExogenousInput,
    horizon: f64,
    opts: &SimOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let d = phi.d;
    let mut events = vec![Vec::new(); d];
    let mut state = vec![0.0; d * d];
    let mut t = 0.0;
    let mut total = 0usize;
    while t < horizon {
        let w_end = (t + opts.dom_window).min(horizon);
        let mu_sup = mu.sup_on(t, w_end);
        let bound: f64 = mu_sup.iter().sum::<f64>() + state.iter().sum::<f64>();
        if bound <= 0.0 {
            t = w_end;
            continue;
        }
        let s = t + Exp::new(bound).expect("positive bound").sample(rng);
        if s > w_end {
            decay(&mut state, rates, w_end - t);
            t = w_end;
            continue;
        }
        decay(&mut state, rates, s - t);
        t = s;
        let m = mu.eval(s);
        let lam: Vec<f64> = (0..d).map(|i| m[i] + state[i * d..(i + 1) * d].iter().sum::<f64>()).collect();
        let lam_total: f64 = lam.iter().sum();
        if rng.random::<f64>() * bound <= lam_total {
            let j = pick(&lam, lam_total, rng);
            events[j].push(s);
            total += 1;
            if total > opts.event_cap {
                return Err(cap_error(opts.event_cap));
            }
            for i in 0..d {
                state[i * d + j] += rates[i * d + j].0;
            }
        }
    }
    Ok(events)
}

fn decay(state: &mut [f64], rates: &[(f64, f64)], dt: f64) {
    for (s, (_, b)) in state.iter_mut().zip(rates) {
        if *s != 0.0 {
            *s *= (-b * dt).exp();
        }
    }
}

fn simulate_thinning(
    phi: &Kernel,
    mu: &ExogenousInput,
    horizon: f64,
    opts: &SimOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let d = phi.d;
    let mut events: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut t = 0.0;
    let mut total = 0usize;
    while t < horizon {
        let w_end = (t + opts.dom_window).min(horizon);
        let mut bound: f64 = mu.sup_on(t, w_end).iter().sum();
        for (j, ev) in events.iter().enumerate() {
            for &s in ev {
                for i in 0..d {
                    bound += phi.entry(i, j).sup_on(t - s, w_end - s);
                }
            }
        }
        if bound <= 0.0 {
            t = w_end;
            continue;
        }
        let s = t + Exp::new(bound).expect("positive bound").sample(rng);
        if s > w_end {
            t = w_end;
            continue;
        }
        t = s;
        let lam = intensity_at(phi, mu, &events, s);
        let lam_total: f64 = lam.iter().sum();
        if lam_total > bound * (1.0 + 1e-12) {
            return Err(Error::Numerical(format!("thinning bound {bound} below intensity {lam_total}")));
        }
        if rng.random::<f64>() * bound <= lam_total {
            let j = pick(&lam, lam_total, rng);
            events[j].push(s);
            total += 1;
            if total > opts.event_cap {
                return Err(cap_error(opts.event_cap));
            }
        }
    }
    Ok(events)
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("finite mean").sample(rng) as u64
    }
}

fn simulate_cluster(
    phi: &Kernel,
    mu: &ExogenousInput,
    horizon: f64,
    opts: &SimOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let d = phi.d;
    let mut queue: Vec<(usize, f64)> = Vec::new();
    match mu {
        ExogenousInput::Constant { mu } => {
            for (i, &m) in mu.iter().enumerate() {
                for _ in 0..poisson(m * horizon, rng) {
                    queue.push((i, horizon * (1.0 - rng.random::<f64>())));
                }
            }
        }
        ExogenousInput::Grid { .. } => {
            let mut t = 0.0;
            while t < horizon {
                let w_end = (t + 1.0).min(horizon);
                let sup = mu.sup_on(t, w_end);
                let total: f64 = sup.iter().sum();
                if total <= 0.0 {
                    t = w_end;
                    continue;
                }
                let s = t + Exp::new(total).expect("positive").sample(rng);
                if s > w_end {
                    t = w_end;
                    continue;
                }
                t = s;
                let m = mu.eval(s);
                let mt: f64 = m.iter().sum();
                if rng.random::<f64>() * total <= mt {
                    queue.push((pick(&m, mt, rng), s));
                }
            }
        }
        ExogenousInput::Impact { kernel, weights } => {
            for j in 0..d {
                for i in 0..d {
                    let e = kernel.entry(i, j);
                    for _ in 0..poisson(weights[j] * e.l1(), rng) {
                        let lag = e.sample_lag(rng);
                        if lag <= horizon {
                            queue.push((i, lag));
                        }
                    }
                }
            }
        }
    }
    let mut events: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut total = 0usize;
    while let Some((j, s)) = queue.pop() {
        if s <= 0.0 || s > horizon {
            continue;
        }
        events[j].push(s);
        total += 1;
        if total > opts.event_cap {
            return Err(cap_error(opts.event_cap));
        }
        for i in 0..d {
            let e = phi.entry(i, j);
            let m = e.l1();
            for _ in 0..poisson(m, rng) {
                let c = s + e.sample_lag(rng);
                if c <= horizon {
                    queue.push((i, c));
                }
            }
        }
    }
    for ev in events.iter_mut() {
        ev.sort_by(f64::total_cmp);
    }
    Ok(events)
}

/// Mean intensity `H = mu + R * mu` and its integral on the grid.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub h: GridFunction<Vec<f64>>,
    pub integrated: GridFunction<Vec<f64>>,
}

/// `H_k = mu_k + delta * sum_{j=0}^{k-1} R_{k-j} mu_j`, `I_H` by the trapezoid
/// rule. For an impact input `phi c` the identity `H = R c` is used directly.
pub fn baseline_h(phi: &Kernel, mu: &ExogenousInput, delta: f64, horizon: f64) -> Result<Baseline> {
    mu.validate(phi.d)?;
    let k_max = steps(delta, horizon)?;
    let d = phi.d;
    let h: Vec<Vec<f64>> = match mu {
        ExogenousInput::Impact { kernel, weights } if kernel == phi => {
            let r = resolvent_grid(phi, delta, horizon)?;
            r.values.iter().map(|m| m.mat_vec(weights)).collect()
        }
        _ => {
            let r = resolvent_grid(phi, delta, horizon)?;
            let mus: Vec<Vec<f64>> = (0..=k_max).map(|k| mu.eval(k as f64 * delta)).collect();
            (0..=k_max)
                .map(|k| {
                    let mut out = mus[k].clone();
                    for j in 0..k {
                        let rm = r.values[k - j].mat_vec(&mus[j]);
                        for i in 0..d {
                            out[i] += delta * rm[i];
                        }
                    }
                    out
                })
                .collect()
        }
    };
    let mut integrated = Vec::with_capacity(k_max + 1);
    let mut acc = vec![0.0; d];
    integrated.push(acc.clone());
    for k in 1..=k_max {
        for i in 0..d {
            acc[i] += 0.5 * delta * (h[k - 1][i] + h[k][i]);
        }
        integrated.push(acc.clone());
    }
    Ok(Baseline { h: GridFunction::new(delta, h)?, integrated: GridFunction::new(delta, integrated)? })
}

fn interp_complex(g: &GridFunction<Vec<C64>>, i: usize, t: f64) -> C64 {
    let x = (t / g.delta).max(0.0);
    let k = x.floor() as usize;
    if k + 1 >= g.len() {
        return g.values[g.last()][i];
    }
    let w = x - k as f64;
    g.values[k][i] * (1.0 - w) + g.values[k + 1][i] * w
}

/// `f * Lambda(T) + h * dN~(T)` along one path.
///
/// The Lebesgue parts use trapezoid averages of the test functions against the
/// exact compensator increments; the jump part sums `h(T - tau)` over events.
pub fn functional_sample(
    phi: &Kernel,
    mu: &ExogenousInput,
    path: &HawkesPath,
    tf: &TestFunctions,
    horizon: f64,
) -> Result<C64> {
    tf.validate()?;
    let delta = tf.f.delta;
    let k = index_of(delta, horizon)?;
    if tf.f.len() < k + 1 || tf.d() != phi.d {
        return invalid("test functions do not cover the horizon or have the wrong dimension");
    }
    if horizon > path.horizon * (1.0 + 1e-12) {
        return invalid("path is shorter than the functional horizon");
    }
    let d = phi.d;
    let comp = compensator_grid(phi, mu, path, delta, k);
    let mut acc = C64::new(0.0, 0.0);
    for m in 0..k {
        let fm = &tf.f.values[k - m];
        let fm1 = &tf.f.values[k - m - 1];
        let hm = &tf.h.values[k - m];
        let hm1 = &tf.h.values[k - m - 1];
        for i in 0..d {
            let inc = comp[m + 1][i] - comp[m][i];
            acc += (fm[i] + fm1[i] - hm[i] - hm1[i]) * (0.5 * inc);
        }
    }
    for (i, ev) in path.events.iter().enumerate() {
        for &s in ev.iter().take_while(|&&s| s <= horizon) {
            acc += interp_complex(&tf.h, i, horizon - s);
        }
    }
    Ok(acc)
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: C64,
    pub se: f64,
}

/// Monte Carlo mean of `exp{f * Lambda(T) + h * dN~(T)}` over `n_paths`
/// independent streams of `seed`.
pub fn mc_fourier_laplace(
    phi: &Kernel,
    mu: &ExogenousInput,
    tf: &TestFunctions,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_paths == 0 {
        return invalid("at least one path is required");
    }
    if tf.is_zero() {
        return Ok(McEstimate { mean: C64::new(1.0, 0.0), se: 0.0 });
    }
    let opts = SimOptions::default();
    let samples = (0..n_paths as u64)
        .into_par_iter()
        .map(|idx| {
            let path = simulate_path(phi, mu, horizon, seed, idx, &opts)?;
            Ok(functional_sample(phi, mu, &path, tf, horizon)?.exp())
        })
        .collect::<Result<Vec<C64>>>()?;
    let (mean, se) = mean_se_complex(&samples);
    Ok(McEstimate { mean, se })
}

/// Paths of the rescaled processes `N^(n)`, `N~^(n)`, `I_{Lambda^(n)}`.
#[derive(Clone, Debug)]
pub struct RescaledPath {
    pub scheme: ScalingScheme,
    pub base: HawkesPath,
    pub phi: Kernel,
    pub mu: ExogenousInput,
}

pub fn rescale(phi: &Kernel, mu: &ExogenousInput, path: HawkesPath, scheme: ScalingScheme) -> RescaledPath {
    RescaledPath { scheme, base: path, phi: phi.clone(), mu: mu.clone() }
}

impl RescaledPath {
    fn original_time(&self, t: f64) -> Result<f64> {
        let s = t * self.scheme.nf();
        if !(t >= 0.0) || s > self.base.horizon * (1.0 + 1e-12) {
            return invalid(format!("time {t} is beyond the rescaled horizon {}", self.base.horizon / self.scheme.nf()));
        }
        Ok(s.min(self.base.horizon))
    }

    /// `N(n t) / (n theta)`.
    pub fn n_at(&self, t: f64) -> Result<Vec<f64>> {
        let s = self.original_time(t)?;
        let c = self.scheme.nf() * self.scheme.theta;
        Ok(self.base.counts_at(s).iter().map(|&k| k as f64 / c).collect())
    }

    /// `I_Lambda(n t) / (n theta)`.
    pub fn i_lambda_at(&self, t: f64) -> Result<Vec<f64>> {
        let s = self.original_time(t)?;
        let c = self.scheme.nf() * self.scheme.theta;
        Ok(compensator(&self.phi, &self.mu, &self.base, s).iter().map(|x| x / c).collect())
    }

    /// `(N(n t) - I_Lambda(n t)) / sqrt(n theta)`.
    pub fn n_tilde_at(&self, t: f64) -> Result<Vec<f64>> {
        let s = self.original_time(t)?;
        let g = self.scheme.gamma();
        let comp = compensator(&self.phi, &self.mu, &self.base, s);
        Ok(self.base.counts_at(s).iter().zip(comp).map(|(&k, c)| (k as f64 - c) / g).collect())
    }
}

//! Reproducible per-path random streams and Monte Carlo summaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::C64;

/// Independent stream for path `index` under the master `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Complex mean with standard error `sqrt((Var Re + Var Im) / n)`.
pub fn mean_se_complex(zs: &[C64]) -> (C64, f64) {
    let re: Vec<f64> = zs.iter().map(|z| z.re).collect();
    let im: Vec<f64> = zs.iter().map(|z| z.im).collect();
    let (mr, sr) = mean_se(&re);
    let (mi, si) = mean_se(&im);
    (C64::new(mr, mi), (sr * sr + si * si).sqrt())
}

/// Unbiased sample variance and its approximate standard error
/// `sqrt((m4 - s^4) / n)`.
pub fn variance_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    (var, ((m4 - m2 * m2).max(0.0) / n).sqrt())
}

/// Two-sample Kolmogorov–Smirnov statistic and its 1% critical value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = x[i].min(y[j]);
        while i < n && x[i] <= t {
            i += 1;
        }
        while j < m && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let (nf, mf) = (n as f64, m as f64);
    (d, 1.628 * ((nf + mf) / (nf * mf)).sqrt())
}

/// One-sample KS distance between integer counts and a reference CDF on the
/// integers, with the 1% critical value `1.628 / sqrt(n)`.
pub fn ks_counts(counts: &[u64], cdf: impl Fn(u64) -> f64) -> (f64, f64) {
    let n = counts.len();
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let max = sorted.last().copied().unwrap_or(0);
    let mut d: f64 = 0.0;
    let mut idx = 0;
    for k in 0..=max + 1 {
        while idx < n && sorted[idx] <= k {
            idx += 1;
        }
        d = d.max((idx as f64 / n as f64 - cdf(k)).abs());
    }
    (d, 1.628 / (n as f64).sqrt())
}

//! Uniform time grids and functions sampled on them.

use crate::error::{invalid, Result};

/// Values sampled at `t_k = k * delta`, `k = 0..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction<V> {
    pub delta: f64,
    pub values: Vec<V>,
}

impl<V> GridFunction<V> {
    pub fn new(delta: f64, values: Vec<V>) -> Result<Self> {
        check_delta(delta)?;
        if values.is_empty() {
            return invalid("grid function needs at least one value");
        }
        Ok(Self { delta, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the last grid point.
    pub fn last(&self) -> usize {
        self.values.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.delta
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.last())
    }

    pub fn map<W>(&self, f: impl Fn(&V) -> W) -> GridFunction<W> {
        GridFunction { delta: self.delta, values: self.values.iter().map(f).collect() }
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return invalid(format!("grid step must be positive, got {delta}"));
    }
    Ok(())
}

/// Number of steps `K` so that `K * delta` covers `horizon`.
pub fn steps(delta: f64, horizon: f64) -> Result<usize> {
    check_delta(delta)?;
    if !(horizon >= delta) || !horizon.is_finite() {
        return invalid(format!("horizon {horizon} must be at least the step {delta}"));
    }
    Ok((horizon / delta - 1e-9).ceil() as usize)
}

/// Index of the grid point `t`, which must sit on the grid.
pub fn index_of(delta: f64, t: f64) -> Result<usize> {
    let k = (t / delta).round();
    if (k * delta - t).abs() > 1e-9 * t.abs().max(delta) {
        return invalid(format!("time {t} is not a multiple of the step {delta}"));
    }
    Ok(k as usize)
}

/// Linear interpolation of scalar grid samples at `t`, clamped to the grid.
pub fn interp(delta: f64, values: &[f64], t: f64) -> f64 {
    let x = (t / delta).max(0.0);
    let k = x.floor() as usize;
    if k + 1 >= values.len() {
        return values[values.len() - 1];
    }
    let w = x - k as f64;
    values[k] * (1.0 - w) + values[k + 1] * w
}

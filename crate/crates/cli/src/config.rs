//! Experiment configuration: one JSON object with a shared grid and one block
//! per subcommand.

use std::path::Path;

use hawkes_scaling::bernstein::{
    closed_form_drift, potential_from_resolvent_eq, potential_measure_closed_form, ExtendedBernsteinMatrix, PotentialMeasure,
    DEFAULT_GS_ORDER,
};
use hawkes_scaling::grid::steps;
use hawkes_scaling::hawkes::ExogenousInput;
use hawkes_scaling::kernels::Kernel;
use hawkes_scaling::riccati::TestFunctions;
use hawkes_scaling::sve::CirParams;
use hawkes_scaling::{Matrix, C64};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub grid: GridConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub resolvent: Option<ResolventConfig>,
    pub fl_verify: Option<FlVerifyConfig>,
    pub scaling_study: Option<ScalingConfig>,
    pub sve: Option<SveConfig>,
    pub potential: Option<PotentialConfig>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub delta: f64,
    pub horizon: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

fn default_dir() -> String {
    ".".into()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventConfig {
    pub kernel: Kernel,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlVerifyConfig {
    pub kernel: Kernel,
    pub mu: ExogenousInput,
    pub paths: usize,
    /// Grid of the sampled functional; defaults to the shared grid step.
    pub mc_delta: Option<f64>,
    pub cases: Vec<FlCase>,
    /// Number of leading paths per case written to the event log.
    #[serde(default)]
    pub event_log_paths: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlCase {
    pub f: TestFnSpec,
    pub h: TestFnSpec,
    pub horizon: f64,
}

/// Parametric test function, identical in every component.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFnSpec {
    Zero,
    Constant {
        #[serde(default)]
        re: f64,
        #[serde(default)]
        im: f64,
    },
    /// `(re + i im) exp(-rate t)`.
    ExponentialDecay {
        #[serde(default)]
        re: f64,
        #[serde(default)]
        im: f64,
        rate: f64,
    },
    /// `i amplitude sin(omega t + phase)`.
    SinusoidalImaginary {
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl TestFnSpec {
    pub fn eval(&self, t: f64) -> C64 {
        match *self {
            TestFnSpec::Zero => C64::new(0.0, 0.0),
            TestFnSpec::Constant { re, im } => C64::new(re, im),
            TestFnSpec::ExponentialDecay { re, im, rate } => C64::new(re, im) * (-rate * t).exp(),
            TestFnSpec::SinusoidalImaginary { amplitude, omega, phase } => C64::new(0.0, amplitude * (omega * t + phase).sin()),
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            TestFnSpec::Zero => "0".into(),
            TestFnSpec::Constant { re, im } => format!("{re}{im:+}i"),
            TestFnSpec::ExponentialDecay { re, im, rate } => format!("({re}{im:+}i)exp(-{rate}t)"),
            TestFnSpec::SinusoidalImaginary { amplitude, omega, phase } => format!("{amplitude}i sin({omega}t{phase:+})"),
        }
    }
}

pub fn test_functions(f: &TestFnSpec, h: &TestFnSpec, d: usize, delta: f64, horizon: f64) -> Result<TestFunctions, CliError> {
    Ok(TestFunctions::from_fn(d, delta, horizon, |t| vec![f.eval(t); d], |t| vec![h.eval(t); d])?)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub family: ScalingFamily,
    pub n: Vec<u64>,
    pub f: TestFnSpec,
    pub h: TestFnSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalingFamily {
    /// Scalar `phi_n = (1 - b/n)/c exp(-t/c)`, `theta_n = n`, constant
    /// `mu_n = a_mu`; the limit has `Phi(lambda) = b + c lambda`.
    Exponential { a_mu: f64, b: f64, c: f64 },
    /// Prelimit kernels built from an extended Bernstein matrix and `K = a`;
    /// `mu_n = mu sqrt(theta_n / n)`.
    Ebf {
        f: ExtendedBernsteinMatrix,
        a: Matrix,
        mu: Vec<f64>,
        #[serde(default = "default_gs_order")]
        gs_order: usize,
    },
}

fn default_gs_order() -> usize {
    DEFAULT_GS_ORDER
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SveConfig {
    pub scheme: SveScheme,
    pub paths: usize,
    /// Number of leading paths written to the trajectory file.
    #[serde(default = "default_export")]
    pub export_paths: usize,
}

fn default_export() -> usize {
    10
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum SveScheme {
    Density { measure: MeasureSpec, upsilon_rate: Vec<f64> },
    Atom { measure: MeasureSpec, upsilon_rate: Vec<f64> },
    RoughCir { params: CirParams },
    PowerCir { params: CirParams },
    Pi0 { pi0: MeasureSpec, b: Matrix, gamma0: Vec<f64>, gamma_slope: Vec<f64> },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Zero { d: usize },
    Lebesgue { d: usize, scale: f64 },
    Dirac { atom: Matrix },
    /// Scalar `atom delta_0 + scale e^{-rate t} dt`.
    Exponential {
        #[serde(default)]
        atom: f64,
        scale: f64,
        rate: f64,
    },
    /// Closed-form `Pi` of an affine or single-power extended Bernstein
    /// function, including its drift.
    ClosedForm { ebf: ExtendedBernsteinMatrix },
}

impl MeasureSpec {
    pub fn build(&self, delta: f64, horizon: f64) -> Result<PotentialMeasure, CliError> {
        let k = steps(delta, horizon)?;
        Ok(match self {
            MeasureSpec::Zero { d } => {
                if *d == 0 {
                    return Err(CliError::Config("measure.d must be positive".into()));
                }
                PotentialMeasure::new(delta, Matrix::zeros(*d, *d), vec![Matrix::zeros(*d, *d); k])?
            }
            MeasureSpec::Lebesgue { d, scale } => PotentialMeasure::lebesgue(*d, delta, horizon, *scale)?,
            MeasureSpec::Dirac { atom } => PotentialMeasure::dirac(delta, horizon, atom.clone())?,
            MeasureSpec::Exponential { atom, scale, rate } => {
                let cells = (0..k)
                    .map(|j| {
                        let (t0, t1) = (j as f64 * delta, (j + 1) as f64 * delta);
                        let m = if *rate == 0.0 { delta } else { ((-rate * t0).exp() - (-rate * t1).exp()) / rate };
                        Matrix::scalar(scale * m)
                    })
                    .collect();
                PotentialMeasure::new(delta, Matrix::scalar(*atom), cells)?
            }
            MeasureSpec::ClosedForm { ebf } => {
                let pi0 = potential_measure_closed_form(ebf, delta, horizon)?;
                potential_from_resolvent_eq(&pi0, &closed_form_drift(ebf)?)?
            }
        })
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub ebf: ExtendedBernsteinMatrix,
    /// Admissible structure matrix; defaults to the identity.
    pub k: Option<Matrix>,
    #[serde(default = "default_methods")]
    pub methods: Vec<PotentialMethod>,
    #[serde(default = "default_gs_order")]
    pub gs_order: usize,
}

fn default_methods() -> Vec<PotentialMethod> {
    vec![PotentialMethod::Gs, PotentialMethod::ResolventEq]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialMethod {
    /// Closed-form density of `1 / (F - b)`; equals `Pi` only when `b = 0`.
    ClosedForm,
    Gs,
    /// Closed-form `Pi_0` plus the drift through the resolvent equation.
    ResolventEq,
}

impl PotentialMethod {
    pub fn name(self) -> &'static str {
        match self {
            PotentialMethod::ClosedForm => "closed_form",
            PotentialMethod::Gs => "gs",
            PotentialMethod::ResolventEq => "resolvent_eq",
        }
    }
}

fn config_err(msg: String) -> CliError {
    CliError::Config(msg)
}

fn positive(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{name} must be positive and finite, got {x}")))
    }
}

fn at_least_one(name: &str, n: usize) -> Result<(), CliError> {
    if n >= 1 {
        Ok(())
    } else {
        Err(config_err(format!("{name} must be at least 1")))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        positive("grid.delta", self.grid.delta)?;
        positive("grid.horizon", self.grid.horizon)?;
        if self.grid.horizon < self.grid.delta {
            return Err(config_err(format!("grid.horizon {} is below grid.delta {}", self.grid.horizon, self.grid.delta)));
        }
        if let Some(r) = &self.resolvent {
            r.lambdas.iter().try_for_each(|l| positive("resolvent.lambdas", *l))?;
        }
        if let Some(fl) = &self.fl_verify {
            at_least_one("fl_verify.paths", fl.paths)?;
            at_least_one("fl_verify.cases", fl.cases.len())?;
            if let Some(d) = fl.mc_delta {
                positive("fl_verify.mc_delta", d)?;
            }
            for (i, c) in fl.cases.iter().enumerate() {
                positive(&format!("fl_verify.cases[{i}].horizon"), c.horizon)?;
            }
        }
        if let Some(s) = &self.scaling_study {
            at_least_one("scaling_study.n", s.n.len())?;
            if s.n.contains(&0) {
                return Err(config_err("scaling_study.n entries must be positive".into()));
            }
            if let ScalingFamily::Exponential { c, .. } = s.family {
                positive("scaling_study.family.c", c)?;
            }
        }
        if let Some(s) = &self.sve {
            at_least_one("sve.paths", s.paths)?;
        }
        if let Some(p) = &self.potential {
            at_least_one("potential.methods", p.methods.len())?;
        }
        Ok(())
    }
}

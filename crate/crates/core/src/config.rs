//! The TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{BinSpec, FluctuationKind};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fields::{FieldConfig, TemperatureField};
use crate::verification::VerificationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Evolve an ensemble and record observables.
    Simulate,
    /// Stationary flux by power iteration.
    Stationary,
    /// Estimate and write the bounce kernel.
    Kernel,
    /// Zero-mass fluctuation decay with fits and window ratios.
    Decay,
    /// Measure-estimate verification suite.
    Verify,
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulate" => Ok(Experiment::Simulate),
            "stationary" => Ok(Experiment::Stationary),
            "kernel" => Ok(Experiment::Kernel),
            "decay" => Ok(Experiment::Decay),
            "verify" => Ok(Experiment::Verify),
            _ => Err(Error::Config(format!("unknown experiment `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureConfig {
    pub expr: Expr,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    0.01
}

impl TemperatureConfig {
    pub fn build(&self) -> Result<TemperatureField> {
        TemperatureField::new(self.expr.clone(), self.margin)
    }
}

/// Kernel estimation and power iteration; also supplies `F_s` for ensembles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationaryConfig {
    pub grid_n: usize,
    pub samples_per_cell: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Relative spread below which an isothermal `J` is reported uniform.
    pub uniform_tol: f64,
    /// Monte-Carlo samples for the mass in the perturbed regime.
    pub mass_samples: usize,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        StationaryConfig {
            grid_n: 32,
            samples_per_cell: 4000,
            tol: 1e-10,
            max_iter: 10_000,
            uniform_tol: 1e-3,
            mass_samples: 200_000,
        }
    }
}

/// Ensemble evolution, shared by `simulate` and `decay`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub particles: usize,
    pub initial: FluctuationKind,
    pub amplitude: f64,
    pub t0: f64,
    pub delta: f64,
    /// Moment exponent; defaults to `theta_prime / 2`.
    pub theta: Option<f64>,
    /// Admissibility exponent; defaults to `0.9 / (2b)`.
    pub theta_prime: Option<f64>,
    pub horizon: f64,
    /// Explicit output times; a uniform grid of step `output_dt` otherwise.
    pub output_times: Option<Vec<f64>>,
    pub output_dt: f64,
    pub fit_range: [f64; 2],
    pub bins: BinSpec,
    /// Constant in the weighted energy estimate, used only by the rate formula.
    pub lambda_constant: Option<f64>,
    pub doeblin_samples: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            particles: 200_000,
            initial: FluctuationKind::Modulated,
            amplitude: 0.5,
            t0: 2.0,
            delta: 1.0,
            theta: None,
            theta_prime: None,
            horizon: 20.0,
            output_times: None,
            output_dt: 0.5,
            fit_range: [2.0, 20.0],
            bins: BinSpec::default(),
            lambda_constant: None,
            doeblin_samples: 100_000,
        }
    }
}

impl DynamicsConfig {
    /// `(theta, theta')` with defaults filled in for wall maximum `b`.
    pub fn exponents(&self, b: f64) -> (f64, f64) {
        let tp = self.theta_prime.unwrap_or(0.9 / (2.0 * b));
        (self.theta.unwrap_or(0.5 * tp), tp)
    }

    pub fn times(&self) -> Vec<f64> {
        match &self.output_times {
            Some(t) => t.clone(),
            None => {
                let n = (self.horizon / self.output_dt + 1e-9).floor() as usize;
                (0..=n).map(|i| i as f64 * self.output_dt).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; `None` keeps the rayon default.
    #[serde(default)]
    pub workers: Option<usize>,
    pub field: FieldConfig,
    pub temperature: TemperatureConfig,
    #[serde(default)]
    pub stationary: StationaryConfig,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub verify: VerificationConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&src)
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go and how
    /// many workers run (neither changes the results).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Structural checks beyond the field and temperature validators.
    pub fn validate(&self, theta: &TemperatureField) -> Result<()> {
        let s = &self.stationary;
        if s.grid_n < 1 || s.samples_per_cell < 1 || s.max_iter < 1 {
            return Err(Error::Config("stationary counts must be at least 1".into()));
        }
        if matches!(self.experiment, Experiment::Simulate | Experiment::Decay) {
            let d = &self.dynamics;
            if d.particles < 2 {
                return Err(Error::Config("dynamics.particles must be at least 2".into()));
            }
            if !(d.t0 > 0.0) || !(d.delta > 0.0) || !(d.horizon > 0.0) || !(d.output_dt > 0.0) {
                return Err(Error::Config("t0, delta, horizon and output_dt must be positive".into()));
            }
            let (th, tp) = d.exponents(theta.b());
            let cap = 0.5 / theta.b();
            if !(0.0 <= th && th < tp && tp < cap) {
                return Err(Error::Config(format!(
                    "moment exponents must satisfy theta < theta' < 1/(2b) = {cap}, got theta = {th}, theta' = {tp}"
                )));
            }
            if self.experiment == Experiment::Decay && !(d.delta * d.t0 > 1.0) {
                return Err(Error::Config(format!(
                    "window condition delta * T0 > 1 violated (delta = {}, T0 = {})",
                    d.delta, d.t0
                )));
            }
            let t = d.times();
            if t.is_empty() || !t.windows(2).all(|w| w[0] < w[1]) || t[0] < 0.0 {
                return Err(Error::Config("output times must be non-negative and increasing".into()));
            }
            if d.bins.nx1 < 1 || d.bins.nx2 < 1 || d.bins.n_energy < 1 {
                return Err(Error::Config("bin counts must be at least 1".into()));
            }
        }
        if self.experiment == Experiment::Verify {
            self.verify.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
experiment = "stationary"
seed = 7

[field]
regime = "gravity_only"
g = 10.0

[temperature]
expr = "1.0"
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_toml(BASIC).unwrap();
        assert_eq!(c.experiment, Experiment::Stationary);
        assert_eq!(c.stationary.grid_n, 32);
        assert_eq!(c.dynamics.t0, 2.0);
        assert_eq!(c.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = RunConfig::from_toml(BASIC).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.workers = Some(3);
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn window_condition_is_enforced_for_decay() {
        let mut c = RunConfig::from_toml(BASIC).unwrap();
        c.experiment = Experiment::Decay;
        c.dynamics.delta = 0.4;
        let th = c.temperature.build().unwrap();
        let e = c.validate(&th).unwrap_err().to_string();
        assert!(e.contains("delta * T0 > 1"), "{e}");
        c.experiment = Experiment::Simulate;
        assert!(c.validate(&th).is_ok());
    }

    #[test]
    fn moment_exponent_order() {
        let mut c = RunConfig::from_toml(BASIC).unwrap();
        c.experiment = Experiment::Simulate;
        c.dynamics.theta_prime = Some(0.6);
        let th = c.temperature.build().unwrap();
        assert!(c.validate(&th).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = format!("{BASIC}\n[stationary]\ngrid = 3\n");
        assert!(RunConfig::from_toml(&src).is_err());
    }
}

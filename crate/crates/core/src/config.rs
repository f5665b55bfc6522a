//! Run configuration files for the command-line frontend.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backstepping::SynthesisParams;
use crate::certification::{DEFAULT_AG_TOL, DEFAULT_TAIL_FRACTION, DEFAULT_UGS_TOL};
use crate::obstruction::DEFAULT_SAMPLES;
use crate::simulation::{DisturbanceFamily, DEFAULT_BLOWUP_RADIUS};
use crate::system::{GtfSystem, SystemError, SystemSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid system in {path}: {source}")]
    System { path: PathBuf, source: SystemError },
    #[error("missing [{0}] section")]
    MissingSection(&'static str),
    #[error("{field} must be positive, got {value}")]
    NotPositive { field: &'static str, value: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// One run: a plant file plus the sections of the commands that use it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Plant file, relative to the config file.
    pub system: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub synthesize: SynthesisParams,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub certify: Option<CertifySection>,
    #[serde(default)]
    pub obstruct: Option<ObstructSection>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Static feedback expression in `x1..xn`; the synthesized law when absent.
    #[serde(default)]
    pub feedback: Option<String>,
    /// Single initial state; overrides `center`, `radius` and `count`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Centre of the initial ball; the equilibrium when absent.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "ten")]
    pub count: usize,
    #[serde(default)]
    pub t0: f64,
    pub horizon: f64,
    pub h: f64,
    #[serde(default = "blowup")]
    pub blowup_radius: f64,
    #[serde(default = "DisturbanceFamily::zero")]
    pub disturbance: DisturbanceFamily,
}

fn one() -> f64 {
    1.0
}

fn ten() -> usize {
    10
}

fn blowup() -> f64 {
    DEFAULT_BLOWUP_RADIUS
}

/// Gain used by the stability or asymptotic-gain check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GainChoice {
    Identity,
    Linear {
        slope: f64,
    },
    /// Minimal monotone envelope of the data plus `strictness · s`.
    Fit {
        #[serde(default = "strictness")]
        strictness: f64,
    },
    /// The synthesized dissipation gain mapped to plant coordinates.
    Certified,
}

fn strictness() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(default = "fit_choice")]
    pub upsilon: GainChoice,
    #[serde(default = "certified_choice")]
    pub gamma: GainChoice,
    #[serde(default = "tail_fraction")]
    pub tail_fraction: f64,
    #[serde(default = "ugs_tol")]
    pub tol_ugs: f64,
    #[serde(default = "ag_tol")]
    pub tol_ag: f64,
}

fn fit_choice() -> GainChoice {
    GainChoice::Fit { strictness: strictness() }
}

fn certified_choice() -> GainChoice {
    GainChoice::Certified
}

fn tail_fraction() -> f64 {
    DEFAULT_TAIL_FRACTION
}

fn ugs_tol() -> f64 {
    DEFAULT_UGS_TOL
}

fn ag_tol() -> f64 {
    DEFAULT_AG_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstructSection {
    /// Static feedback `u(x1, x2)`; time atoms are rejected.
    pub feedback: String,
    #[serde(default = "samples")]
    pub m: usize,
}

fn samples() -> usize {
    DEFAULT_SAMPLES
}

/// A loaded config with its plant.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub system_path: PathBuf,
    pub spec: SystemSpec,
    pub system: GtfSystem,
}

impl RunConfig {
    pub fn from_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive =
            |field, value: f64| if value > 0.0 { Ok(()) } else { Err(ConfigError::NotPositive { field, value }) };
        let p = &self.synthesize;
        positive("synthesize.dissipation.tol", p.dissipation.tol)?;
        positive("synthesize.cover.tol_p", p.cover.tol_p)?;
        positive("synthesize.h_diff", p.h_diff)?;
        if let Some(s) = &self.simulate {
            positive("simulate.h", s.h)?;
            positive("simulate.blowup_radius", s.blowup_radius)?;
            if !(s.horizon >= 0.0) {
                return Err(ConfigError::Invalid(format!("simulate.horizon must be non-negative, got {}", s.horizon)));
            }
            if !(s.radius >= 0.0) {
                return Err(ConfigError::Invalid(format!("simulate.radius must be non-negative, got {}", s.radius)));
            }
        }
        if let Some(c) = &self.certify {
            positive("certify.tol_ugs", c.tol_ugs)?;
            positive("certify.tol_ag", c.tol_ag)?;
            positive("certify.tail_fraction", c.tail_fraction)?;
            for g in [&c.upsilon, &c.gamma] {
                match g {
                    GainChoice::Linear { slope } => positive("certify slope", *slope)?,
                    GainChoice::Fit { strictness } => positive("certify strictness", *strictness)?,
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Reads the config and the plant file it references.
    pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let config = RunConfig::from_str(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let system_path = base.join(&config.system);
        let text = fs::read_to_string(&system_path)
            .map_err(|source| ConfigError::Read { path: system_path.clone(), source })?;
        let spec: SystemSpec =
            toml::from_str(&text).map_err(|source| ConfigError::Parse { path: system_path.clone(), source })?;
        let system =
            GtfSystem::from_spec(&spec).map_err(|source| ConfigError::System { path: system_path.clone(), source })?;
        Ok(LoadedConfig { config, system_path, spec, system })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    const CHAIN: &str = "n = 2\nT = 10.0\nf = [\"x2\", \"u\"]\nPhi = [\"1\", \"1\"]\n";

    #[test]
    fn loads_sections_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "chain.toml", CHAIN);
        let cfg = write(
            dir.path(),
            "run.toml",
            r#"
system = "chain.toml"
seed = 3

[synthesize.cover]
q_hi = 4

[simulate]
horizon = 5.0
h = 0.01
disturbance = { kind = "piecewise_random", amplitude = 0.1, dwell = 0.5 }

[certify]
upsilon = { kind = "identity" }

[obstruct]
feedback = "1"
"#,
        );
        let loaded = RunConfig::load(&cfg).unwrap();
        let c = &loaded.config;
        assert_eq!(c.seed, 3);
        assert_eq!(c.out, PathBuf::from("out"));
        assert_eq!(c.synthesize.cover.q_hi, 4);
        assert_eq!(c.synthesize.cover.q_lo, -3);
        let sim = c.simulate.as_ref().unwrap();
        assert_eq!((sim.radius, sim.count), (1.0, 10));
        let cert = c.certify.as_ref().unwrap();
        assert_eq!(cert.upsilon, GainChoice::Identity);
        assert_eq!(cert.gamma, GainChoice::Certified);
        assert_eq!(c.obstruct.as_ref().unwrap().m, DEFAULT_SAMPLES);
        assert_eq!(loaded.system.n(), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let missing = write(dir.path(), "a.toml", "system = \"nope.toml\"\n");
        assert!(matches!(RunConfig::load(&missing), Err(ConfigError::Read { .. })));
        let typo = write(dir.path(), "b.toml", "system = \"x\"\nsed = 1\n");
        assert!(matches!(RunConfig::load(&typo), Err(ConfigError::Parse { .. })));
        let step = write(dir.path(), "c.toml", "system = \"x\"\n[simulate]\nhorizon = 1.0\nh = 0.0\n");
        assert!(matches!(RunConfig::load(&step), Err(ConfigError::NotPositive { field: "simulate.h", .. })));
        let tol = write(dir.path(), "d.toml", "system = \"x\"\n[certify]\ntol_ag = -1.0\n");
        assert!(matches!(RunConfig::load(&tol), Err(ConfigError::NotPositive { .. })));
    }
}

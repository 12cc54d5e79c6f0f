//! Experiment files and run manifests.
//!
//! A config names one command and carries the blocks that command needs.
//! Unknown keys are rejected at every level. After flag overrides and
//! defaults are applied the resolved config is written back out inside a
//! [`Manifest`], which is itself accepted as a config.

use std::path::Path;

use gradlab::decimation::ScanSpec;
use gradlab::lattice::Geometry;
use gradlab::observables::{ConvexitySpec, TestFunction};
use gradlab::par::Parallelism;
use gradlab::potentials::Potential;
use gradlab::sampler::{Algorithm, ChainConfig, CouplingConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const TOOL: &str = "gradlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Check,
    Rwr,
    Bk,
    Sample,
    Decay,
    Clt,
    Sigma,
    Couple,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Rwr => "rwr",
            Command::Bk => "bk",
            Command::Sample => "sample",
            Command::Decay => "decay",
            Command::Clt => "clt",
            Command::Sigma => "sigma",
            Command::Couple => "couple",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    #[serde(default = "heat_bath")]
    pub algorithm: Algorithm,
    pub sweeps: u64,
    #[serde(default)]
    pub burn_in: u64,
    #[serde(default = "one")]
    pub thinning: u64,
    /// Defaults to zero tilt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bond_weight: Option<f64>,
    #[serde(default)]
    pub parallelism: Parallelism,
    /// Write a field dump every this many retained sweeps (`sample` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_every: Option<u64>,
}

fn heat_bath() -> Algorithm {
    Algorithm::HeatBath
}

fn one() -> u64 {
    1
}

/// Closed-form mixture covariances against quadrature.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BkBlock {
    pub p: f64,
    pub k1: f64,
    pub k2: f64,
    pub d: usize,
    #[serde(default)]
    pub stencils: Vec<Vec<f64>>,
    /// Extra stencils drawn uniformly from `[-radius, radius]`.
    #[serde(default)]
    pub random: usize,
    #[serde(default = "default_bk_radius")]
    pub radius: f64,
}

fn default_bk_radius() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayBlock {
    pub max_r: usize,
    #[serde(default = "default_min_ess")]
    pub min_ess: f64,
}

fn default_min_ess() -> f64 {
    1e4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltBlock {
    pub f: TestFunction,
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt_a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt_b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bond_weight: Option<f64>,
    /// Amplitude of the uniform perturbation added to the first chain's
    /// free heights at time zero.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    pub coupling: CouplingConfig,
}

fn default_perturbation() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<Potential>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bk: Option<BkBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clt: Option<CltBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<ConvexitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub couple: Option<CoupleBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let mut msg = e.inner().to_string();
        // Library validation errors name the offending field; append it.
        if let Some(rest) = msg.strip_prefix("invalid parameter `") {
            if let Some((key, tail)) = rest.split_once("`: ") {
                path = format!("{path}.{key}");
                msg = tail.to_string();
            }
        }
        CliError::Validation(format!("config key `{path}`: {msg}"))
    })
}

/// Reads a config or a manifest.
pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = parse(&text)?;
    if value.get("tool").is_some() {
        let m: Manifest = parse(&text)?;
        if m.tool != TOOL {
            return Err(CliError::Validation(format!("config key `tool`: expected {TOOL}, got {}", m.tool)));
        }
        Ok(m.config)
    } else {
        parse(&text)
    }
}

fn missing(block: &str, cmd: Command) -> CliError {
    CliError::Validation(format!("config key `{block}`: required by `{}`", cmd.name()))
}

impl ExperimentConfig {
    pub fn potential(&self) -> Result<&Potential, CliError> {
        self.potential.as_ref().ok_or_else(|| missing("potential", self.command))
    }

    pub fn geometry(&self) -> Result<Geometry, CliError> {
        self.geometry.ok_or_else(|| missing("geometry", self.command))
    }

    pub fn d(&self) -> Result<usize, CliError> {
        self.d.ok_or_else(|| missing("d", self.command))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Applies flag overrides and fills defaults so that the result
    /// reproduces the run on its own.
    pub fn resolve(mut self, seed: Option<u64>, tol: Option<f64>) -> Result<Self, CliError> {
        let seed = seed.or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        let tol = tol.or(self.tol);
        if let Some(t) = tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Validation("config key `tol`: must be positive".into()));
            }
        }
        let cmd = self.command;
        match cmd {
            Command::Check => {
                self.potential()?;
                self.d()?;
                self.q = Some(self.q.unwrap_or(1.0));
                self.tol = Some(tol.unwrap_or(1e-10));
            }
            Command::Rwr => {
                self.potential()?;
                let scan = self.scan.as_mut().ok_or_else(|| missing("scan", cmd))?;
                scan.seed = seed;
                if let Some(t) = tol {
                    scan.tol = t;
                }
                self.tol = Some(scan.tol);
            }
            Command::Bk => {
                self.bk.as_ref().ok_or_else(|| missing("bk", cmd))?;
                self.tol = Some(tol.unwrap_or(1e-6));
            }
            Command::Sample | Command::Decay | Command::Clt => {
                self.potential()?;
                let d = self.geometry()?.d();
                let s = self.sampler.as_mut().ok_or_else(|| missing("sampler", cmd))?;
                s.tilt.get_or_insert_with(|| vec![0.0; d]);
                match cmd {
                    Command::Decay => {
                        self.decay.as_ref().ok_or_else(|| missing("decay", cmd))?;
                    }
                    Command::Clt => {
                        self.clt.as_ref().ok_or_else(|| missing("clt", cmd))?;
                    }
                    _ => {}
                }
                self.tol = tol;
            }
            Command::Sigma => {
                self.potential()?;
                self.d()?;
                let spec = self.sigma.as_mut().ok_or_else(|| missing("sigma", cmd))?;
                if let Some(mc) = spec.mc.as_mut() {
                    mc.seed = seed;
                }
                self.tol = Some(tol.unwrap_or(1e-4));
            }
            Command::Couple => {
                self.potential()?;
                let d = self.geometry()?.d();
                let c = self.couple.as_mut().ok_or_else(|| missing("couple", cmd))?;
                c.tilt_a.get_or_insert_with(|| vec![0.0; d]);
                c.tilt_b.get_or_insert_with(|| vec![0.0; d]);
                c.coupling.seed = seed;
                if let Some(t) = tol {
                    c.coupling.tol = t;
                }
                self.tol = Some(c.coupling.tol);
            }
        }
        Ok(self)
    }

    pub fn chain(&self) -> Result<ChainConfig, CliError> {
        let s = self.sampler.as_ref().ok_or_else(|| missing("sampler", self.command))?;
        let geometry = self.geometry()?;
        Ok(ChainConfig {
            potential: self.potential()?.clone(),
            geometry,
            tilt: s.tilt.clone().unwrap_or_else(|| vec![0.0; geometry.d()]),
            sweeps: s.sweeps,
            burn_in: s.burn_in,
            thinning: s.thinning,
            seed: self.seed(),
            algorithm: s.algorithm,
            bond_weight: s.bond_weight,
            parallelism: s.parallelism,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            config: self.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let text = r#"{"command":"check","d":1,"potential":{"kind":"quadratic","k":1,"beta":1},"extra":3}"#;
        let err = parse::<ExperimentConfig>(text).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
        let text = r#"{"command":"sample","geometry":{"kind":"torus","d":1,"n":8},
            "potential":{"kind":"quadratic","k":1,"beta":1},"sampler":{"sweeps":10,"sweep":3}}"#;
        let err = parse::<ExperimentConfig>(text).unwrap_err().to_string();
        assert!(err.contains("sampler"), "{err}");
    }

    #[test]
    fn resolution_fills_defaults_and_overrides_seed() {
        let text = r#"{"command":"rwr","potential":{"kind":"quadratic","k":1,"beta":1},"scan":{"d":1,"seed":4}}"#;
        let cfg = parse::<ExperimentConfig>(text).unwrap().resolve(Some(9), None).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.scan.as_ref().unwrap().seed, 9);
        assert_eq!(cfg.tol, Some(cfg.scan.as_ref().unwrap().tol));
        let again = serde_json::to_string(&cfg).unwrap();
        let back = parse::<ExperimentConfig>(&again).unwrap().resolve(None, None).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), again);
    }

    #[test]
    fn missing_block_is_a_validation_error() {
        let text = r#"{"command":"decay","potential":{"kind":"quadratic","k":1,"beta":1}}"#;
        let err = parse::<ExperimentConfig>(text).unwrap().resolve(None, None).unwrap_err();
        assert!(matches!(err, CliError::Validation(ref m) if m.contains("geometry")));
    }
}

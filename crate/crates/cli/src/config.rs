//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use symctl::integrate::DEFAULT_STEPS;
use symctl::sysmodel::{LyapunovCertificate, SampleGrid};
use symctl::{AbstractionParams, ControlSystem, Expression, KinfGain, Rect, SequenceSpec, StabilityCertificate};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<StabilityCertificate>,
    pub params: ParamsBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SequenceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<LyapunovBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub n: usize,
    pub m: usize,
    pub f: Vec<String>,
    #[serde(rename = "U")]
    pub u: Rect,
    #[serde(rename = "X")]
    pub x: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsBlock {
    pub eps: f64,
    pub tau: f64,
    pub eta: f64,
    pub mu: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub x0: Vec<f64>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovBlock {
    #[serde(rename = "V")]
    pub v: String,
    pub alpha1: KinfGain,
    pub alpha2: KinfGain,
    pub rho: KinfGain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<KinfGain>,
    #[serde(default)]
    pub norm2: bool,
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_grid() -> usize {
    9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_label_samples")]
    pub label_samples: usize,
}

fn default_samples() -> usize {
    50
}

fn default_horizon() -> usize {
    3
}

fn default_label_samples() -> usize {
    11
}

impl Default for VerifyBlock {
    fn default() -> Self {
        VerifyBlock {
            samples: default_samples(),
            horizon: default_horizon(),
            seed: 0,
            label_samples: default_label_samples(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Config, CliError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let s = &self.system;
        if s.f.len() != s.n || s.x.dim() != s.n || s.u.dim() != s.m {
            return Err(CliError::Config(format!(
                "system block: n = {}, m = {} but f has {}, X has {}, U has {} entries",
                s.n,
                s.m,
                s.f.len(),
                s.x.dim(),
                s.u.dim()
            )));
        }
        self.abstraction_params().validate_signs().map_err(|e| CliError::Config(e.to_string()))?;
        if self.params.steps == 0 {
            return Err(CliError::Config("params.steps must be at least 1".into()));
        }
        if let Some(sim) = &self.sim {
            if sim.x0.len() != s.n || sim.substeps == 0 {
                return Err(CliError::Config("sim block: x0 must have n entries and substeps >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<ControlSystem, CliError> {
        let f: Vec<&str> = self.system.f.iter().map(String::as_str).collect();
        ControlSystem::parse(&f, self.system.u.clone(), self.system.x.clone())
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn abstraction_params(&self) -> AbstractionParams {
        let p = &self.params;
        AbstractionParams { tau: p.tau, eta: p.eta, mu: p.mu, eps: p.eps, nu: p.nu }
    }

    pub fn lyapunov(&self) -> Result<(LyapunovCertificate, SampleGrid), CliError> {
        let b = self.lyapunov.as_ref().ok_or_else(|| CliError::Config("missing lyapunov block".into()))?;
        let v = Expression::parse(&b.v).map_err(|e| CliError::Config(format!("lyapunov.V: {e}")))?;
        let cert =
            LyapunovCertificate { v, alpha1: b.alpha1, alpha2: b.alpha2, rho: b.rho, sigma: b.sigma, norm2: b.norm2 };
        Ok((cert, SampleGrid { per_axis: b.grid }))
    }
}

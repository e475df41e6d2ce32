use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ModelKind, Pattern};
use crate::engine::DEFAULT_DIVERGENCE_GUARD;
use crate::error::{NgdError, Result};
use crate::topology::{Connectivity, TopologyKind, FIXED_DEGREE_MAX_ATTEMPTS};

/// How the per-replicate sidecar obtains the contraction radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralSetting {
    #[default]
    Off,
    Auto,
    Dense,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivitySetting {
    /// Keep whatever the fixed-degree sampler draws.
    #[default]
    Unconstrained,
    /// Redraw until the graph is strongly connected.
    Resample,
}

impl ConnectivitySetting {
    pub fn policy(self) -> Connectivity {
        match self {
            ConnectivitySetting::Unconstrained => Connectivity::Unconstrained,
            ConnectivitySetting::Resample => Connectivity::Resample { max_attempts: FIXED_DEGREE_MAX_ATTEMPTS },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub degrees: Vec<usize>,
    /// Overrides the per-model default learning rate.
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub n_total: usize,
    pub m_clients: usize,
    pub pattern: Pattern,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub iterations: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub alpha_list: Vec<f64>,
    /// Stop a run once successive iterates differ by less than this (max-abs).
    #[serde(default)]
    pub early_stop: Option<f64>,
    /// Dimension of the linear design; extra coefficients are zero.
    #[serde(default)]
    pub p: Option<usize>,
    #[serde(default = "default_guard")]
    pub divergence_guard: f64,
    #[serde(default)]
    pub spectral_radius: SpectralSetting,
    #[serde(default)]
    pub connectivity: ConnectivitySetting,
    pub topology: TopologyKind,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_replicates() -> usize {
    100
}

fn default_record_every() -> usize {
    10
}

fn default_guard() -> f64 {
    DEFAULT_DIVERGENCE_GUARD
}

/// Learning rates used by the degree sweep when the config gives none.
pub fn default_sweep_alpha(model: ModelKind) -> f64 {
    match model {
        ModelKind::Linear => 2e-3,
        ModelKind::Logistic => 2e-2,
        ModelKind::Poisson => 2e-4,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| NgdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NgdError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            NgdError::Config(msg) => NgdError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NgdError::Config(msg));
        if self.m_clients < 2 {
            return bad(format!("m_clients must be at least 2, got {}", self.m_clients));
        }
        if self.n_total == 0 || !self.n_total.is_multiple_of(self.m_clients) {
            return bad(format!("m_clients = {} must divide n_total = {}", self.m_clients, self.n_total));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.record_every == 0 {
            return bad("record_every must be at least 1".into());
        }
        if let Some(a) = self.alpha_list.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return bad(format!("learning rates must be positive, got {a}"));
        }
        if self.early_stop.is_some_and(|t| !(t > 0.0)) {
            return bad("early_stop must be positive".into());
        }
        if !(self.divergence_guard > 0.0) {
            return bad("divergence_guard must be positive".into());
        }
        match self.p {
            Some(0) => return bad("p must be at least 1".into()),
            Some(_) if self.model != ModelKind::Linear => {
                return bad("p can only be set for the linear model".into());
            }
            _ => {}
        }
        let degree_ok = |d: usize| d >= 1 && d < self.m_clients;
        match self.topology {
            TopologyKind::Circle { degree } | TopologyKind::FixedDegree { degree } if !degree_ok(degree) => {
                return bad(format!("degree must lie in [1, {}], got {degree}", self.m_clients - 1));
            }
            _ => {}
        }
        if let Some(sw) = &self.sweep {
            if sw.degrees.is_empty() || sw.degrees.iter().any(|&d| !degree_ok(d)) {
                return bad(format!("sweep degrees must be non-empty and lie in [1, {}]", self.m_clients - 1));
            }
            if sw.alpha.is_some_and(|a| !(a > 0.0 && a.is_finite())) {
                return bad("sweep alpha must be positive".into());
            }
        }
        Ok(())
    }

    pub fn shard_size(&self) -> usize {
        self.n_total / self.m_clients
    }

    pub fn p(&self) -> usize {
        match self.model {
            ModelKind::Linear => self.p.unwrap_or(8),
            ModelKind::Logistic => 6,
            ModelKind::Poisson => 8,
        }
    }

    /// SHA-256 of the canonical JSON form; any field change alters it.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        self.base_seed.wrapping_add(replicate as u64)
    }
}

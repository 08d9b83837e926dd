use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::comm::ChannelKind;
use crate::env::GridConfig;
use crate::seeds::derive_seed;
use crate::trainer::TrainConfig;

use super::HarnessError;

/// The six baseline configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Independent agents: no channel, single policy.
    I,
    /// Pairwise attention channel, single policy.
    P,
    /// Pairwise channel with the shared policy pool.
    PSp,
    /// Slot-memory facilitator, single policy.
    Saf,
    /// Facilitator with the shared policy pool.
    SafSp,
    /// Facilitator, pool and independence penalty.
    SafSpKl,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::I, Variant::P, Variant::PSp, Variant::Saf, Variant::SafSp, Variant::SafSpKl];

    pub fn label(self) -> &'static str {
        match self {
            Variant::I => "I",
            Variant::P => "P",
            Variant::PSp => "P+SP",
            Variant::Saf => "SAF",
            Variant::SafSp => "SAF+SP",
            Variant::SafSpKl => "SAF+SP+KL",
        }
    }

    /// File-system friendly form of the label.
    pub fn slug(self) -> String {
        self.label().to_ascii_lowercase().replace('+', "-")
    }

    /// `(channel, uses the pool, penalized)`.
    pub fn shape(self) -> (ChannelKind, bool, bool) {
        match self {
            Variant::I => (ChannelKind::Null, false, false),
            Variant::P => (ChannelKind::Pairwise, false, false),
            Variant::PSp => (ChannelKind::Pairwise, true, false),
            Variant::Saf => (ChannelKind::Saf, false, false),
            Variant::SafSp => (ChannelKind::Saf, true, false),
            Variant::SafSpKl => (ChannelKind::Saf, true, true),
        }
    }

    /// Overrides channel, pool size and β of `base`. Pool variants keep
    /// `base.pool_size`; the penalized variant keeps `base.beta`, which must
    /// then be positive.
    pub fn apply(self, base: &TrainConfig) -> Result<TrainConfig, HarnessError> {
        let (channel, pooled, penalized) = self.shape();
        let mut cfg = base.clone();
        cfg.channel = channel;
        if !pooled {
            cfg.pool_size = 1;
        }
        if penalized {
            if !(cfg.beta > 0.0) {
                return Err(HarnessError::Config(format!("variant {} requires beta > 0, got {}", self, cfg.beta)));
            }
        } else {
            cfg.beta = 0.0;
        }
        Ok(cfg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| HarnessError::Config(format!("unknown variant `{s}`")))
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated variant list such as `SAF+SP,I`.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>, HarnessError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: GridConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: GridConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::SafSpKl,
            seeds: (0..5).collect(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.resolved_train()?.validate().map_err(HarnessError::Config)
    }

    /// Training configuration after the variant mapping.
    pub fn resolved_train(&self) -> Result<TrainConfig, HarnessError> {
        self.variant.apply(&self.train)
    }

    /// Same experiment with another variant.
    pub fn with_variant(&self, variant: Variant) -> Self {
        ExperimentConfig { variant, ..self.clone() }
    }

    /// Same experiment with `n` agents; `ghost_scale` optionally sets the
    /// ghost count to `ghost_scale * n`.
    pub fn with_agents(&self, n: usize, ghost_scale: Option<usize>) -> Self {
        let mut cfg = self.clone();
        cfg.env.n_agents = n;
        if let Some(k) = ghost_scale {
            cfg.env.n_ghosts = k * n;
        }
        cfg
    }

    /// Canonical bytes of everything that determines a run except the seed:
    /// the grid, the resolved training config and the variant, as JSON with
    /// keys sorted.
    pub fn canonical_json(&self) -> Result<String, HarnessError> {
        let doc = serde_json::json!({
            "env": self.env,
            "train": self.resolved_train()?,
            "variant": self.variant,
        });
        // serde_json maps are ordered by key, so this is stable
        serde_json::to_string(&doc).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> Result<String, HarnessError> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    /// Seed of run `seed` under the master seed `train.seed`. Independent
    /// of variant and agent count, so runs across variants are paired.
    pub fn run_seed(&self, seed: u64) -> u64 {
        derive_seed(self.train.seed, seed)
    }
}

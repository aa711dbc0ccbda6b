use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hub::HubManifest;
use crate::numerics::OptimizerKind;
use crate::objectives::MergeWeights;
use crate::routing::TransferStrategy;
use crate::synth::HoldoutRule;
use crate::vlm::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    L2,
    Lm,
    LmL2,
}

impl MergeStrategy {
    pub fn weights(self) -> MergeWeights {
        match self {
            MergeStrategy::L2 => MergeWeights { lm: 0.0, gap: 1.0 },
            MergeStrategy::Lm => MergeWeights { lm: 1.0, gap: 0.0 },
            MergeStrategy::LmL2 => MergeWeights { lm: 1.0, gap: 1.0 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::L2 => "l2",
            MergeStrategy::Lm => "lm",
            MergeStrategy::LmL2 => "lm_l2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    None,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub holdout: Holdout,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 400,
            holdout: Holdout::Novel,
        }
    }
}

impl DataConfig {
    pub fn rule(&self) -> HoldoutRule {
        match self.holdout {
            Holdout::None => HoldoutRule::None,
            Holdout::Novel => HoldoutRule::default_novel(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub lambda: f64,
    pub alpha0: f64,
    pub noise: bool,
    pub aux: bool,
    pub strategy: TransferStrategy,
    /// Experts used; all when absent.
    pub retained: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            optimizer: OptimizerKind::AdamW,
            batch_size: 16,
            lambda: 0.1,
            alpha0: 0.01,
            noise: true,
            aux: true,
            strategy: TransferStrategy::Residual,
            retained: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub strategy: MergeStrategy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-2,
            strategy: MergeStrategy::LmL2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 2, lr: 1e-3 }
    }
}

/// Everything a command needs besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Train the expert pathway; `false` gives the plain captioner.
    pub experts: bool,
    /// Hub manifest file; the built-in catalogue when absent.
    pub hub_manifest: Option<String>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub merge: MergeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            experts: true,
            hub_manifest: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            merge: MergeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        self.model.validate()?;
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.lambda) {
            return bad(format!("lambda {} outside [0, 1]", t.lambda));
        }
        if t.epochs == 0 || self.merge.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if t.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for lr in [t.lr, self.merge.lr, self.finetune.lr] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr} must be finite and non-negative"));
            }
        }
        if !(t.alpha0 >= 0.0) {
            return bad(format!("alpha0 {} must be non-negative", t.alpha0));
        }
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return bad("dataset splits must be non-empty".into());
        }
        if let Some(r) = &t.retained {
            if r.is_empty() {
                return Err(Error::EmptyRetainedSet);
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The hub manifest, or `None` for the plain captioner.
    pub fn manifest(&self) -> Result<Option<HubManifest>> {
        if !self.experts {
            return Ok(None);
        }
        match &self.hub_manifest {
            None => Ok(Some(HubManifest::default_catalogue(self.model.grid))),
            Some(p) => Ok(Some(HubManifest::from_toml(&std::fs::read_to_string(p)?)?)),
        }
    }

    pub fn retained(&self, k: usize) -> Vec<usize> {
        self.train.retained.clone().unwrap_or_else(|| (0..k).collect())
    }
}

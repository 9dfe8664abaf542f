//! Run configuration: a TOML key-value file with one table per concern.
//!
//! ```toml
//! [model]
//! modalities = ["flair", "t1", "t2"]
//! stem_width = 8
//!
//! [train]
//! lr0 = 1e-4
//! max_epochs = 20
//!
//! [eval]
//! connectivity = 26
//! fusion = "majority"
//!
//! [crossval]
//! protocol = "loso-ensemble"
//! test_ids = ["phantom-5"]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::fusion::FusionMethod;
use crate::metrics::Connectivity;
use crate::network::ModelConfig;
use crate::training::TrainConfig;
use crate::volio::PhantomSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    pub eval: EvalConfig,
    pub crossval: CrossvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Sets every seed (model init, batch shuffles, phantom generation).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self.phantom.seed = seed;
        self
    }

    /// Uses one fusion method for validation and test-time reconstruction.
    pub fn with_fusion(mut self, method: FusionMethod) -> Self {
        self.eval.fusion = method;
        self.train.fusion = method;
        self
    }

    pub fn connectivity(&self) -> Result<Connectivity, HarnessError> {
        Connectivity::try_from(self.eval.connectivity).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// Synthetic dataset shape; case `i` uses phantom seed `seed + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub count: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub lesion_count: [usize; 2],
    pub lesion_radius_mm: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let s = PhantomSpec::default();
        Self {
            count: 12,
            dims: [s.dims.0, s.dims.1, s.dims.2],
            spacing: [s.spacing.0, s.spacing.1, s.spacing.2],
            lesion_count: [s.lesion_count_range.0, s.lesion_count_range.1],
            lesion_radius_mm: [s.lesion_radius_range_mm.0, s.lesion_radius_range_mm.1],
            noise_sigma: s.noise_sigma,
            seed: 1,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self, index: usize) -> PhantomSpec {
        PhantomSpec {
            dims: (self.dims[0], self.dims[1], self.dims[2]),
            spacing: (self.spacing[0], self.spacing[1], self.spacing[2]),
            lesion_count_range: (self.lesion_count[0], self.lesion_count[1]),
            lesion_radius_range_mm: (self.lesion_radius_mm[0], self.lesion_radius_mm[1]),
            noise_sigma: self.noise_sigma,
            seed: self.seed.wrapping_add(index as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Lesion connectivity: 6, 18 or 26.
    pub connectivity: usize,
    pub fusion: FusionMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            connectivity: 26,
            fusion: FusionMethod::MajorityVote,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Every (test, validation) pair; the rest trains.
    #[default]
    NestedLoso,
    /// Every validation choice among the training ids, sharing a fixed test set.
    LosoEnsemble,
    /// Outer k-fold test partition, `k` inner validation folds each.
    NestedKfold,
}

impl std::str::FromStr for Protocol {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nested-loso" => Ok(Protocol::NestedLoso),
            "loso-ensemble" => Ok(Protocol::LosoEnsemble),
            "nested-kfold" => Ok(Protocol::NestedKfold),
            other => Err(HarnessError::Config(format!(
                "unknown protocol {other:?}; use nested-loso, loso-ensemble or nested-kfold"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub protocol: Protocol,
    pub k: usize,
    /// Subset of manifest ids to use; empty means all.
    pub ids: Vec<String>,
    /// Fixed external test set for `loso-ensemble`.
    pub test_ids: Vec<String>,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::NestedLoso,
            k: 4,
            ids: Vec::new(),
            test_ids: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// `SB:<modality>[+...]` (single branch; several modalities are stacked
    /// as channels) or `MB:<m1>+<m2>[+...]` (one branch per modality).
    pub variants: Vec<String>,
    /// Explicit split; when all three are empty a seeded random split with
    /// the 21/7/9 train/validation/test proportions is drawn.
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: ["SB:flair", "SB:t1", "SB:t2", "SB:flair+t1+t2", "MB:flair+t1+t2"]
                .map(String::from)
                .to_vec(),
            train_ids: Vec::new(),
            val_ids: Vec::new(),
            test_ids: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let p = RunConfig::from_toml("[train]\nmax_epochs = 3\n[eval]\nfusion = \"staple\"\n").unwrap();
        assert_eq!(p.train.max_epochs, 3);
        assert_eq!(p.eval.fusion, FusionMethod::Staple);
        assert_eq!(p.model, ModelConfig::default());
        assert!(RunConfig::from_toml("[train]\nmax_epoch = 3\n").is_err());
        let k = RunConfig::from_toml("[crossval]\nprotocol = \"nested-kfold\"\n").unwrap();
        assert_eq!(k.crossval.protocol, Protocol::NestedKfold);
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{PegoError, Result};
use crate::pego::{Objective, DEFAULT_ALPHA};
use crate::vit::VitConfig;

/// Iteration count of the full-scale recipe; the desk-scale default is 500.
pub const FULL_SCALE_ITERATIONS: usize = 5000;
pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_LR: f64 = 5e-4;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;
pub const N_SEARCH_SPACE: [usize; 3] = [2, 4, 6];

/// Training of the frozen stand-in base on the style-randomized stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            lr: 3e-3,
            batch: 32,
            classes: 8,
            seed: 20_240,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub rank: usize,
    pub group_n: usize,
    pub n_search: Vec<usize>,
    pub lr: f64,
    pub iterations: usize,
    pub batch_per_domain: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub eval_every: usize,
    pub preserve: bool,
    pub diversify: bool,
    pub vit: VitConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            rank: DEFAULT_RANK,
            group_n: 4,
            n_search: N_SEARCH_SPACE.to_vec(),
            lr: DEFAULT_LR,
            iterations: 500,
            batch_per_domain: 32,
            seed: 0,
            val_fraction: DEFAULT_VAL_FRACTION,
            eval_every: 50,
            preserve: true,
            diversify: true,
            vit: VitConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The desk-scale experiment: default data and backbone, 500 iterations,
    /// 8 images per source domain.
    pub fn canonical() -> Self {
        Self {
            batch_per_domain: 8,
            ..Self::default()
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            preserve: self.preserve,
            diversify: self.diversify,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        let fail = |m: String| Err(PegoError::Config(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.rank == 0 || self.group_n == 0 {
            return fail("rank and group_n must be positive".into());
        }
        if self.n_search.is_empty() || self.n_search.contains(&0) {
            return fail("n_search must be a nonempty list of positive sizes".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if self.batch_per_domain == 0 || self.eval_every == 0 {
            return fail("batch_per_domain and eval_every must be positive".into());
        }
        if self.vit.image_size != self.data.image_size {
            return fail(format!(
                "vit.image_size {} differs from data.image_size {}",
                self.vit.image_size, self.data.image_size
            ));
        }
        if self.pretrain.batch == 0 || !(2..=crate::data::SHAPE_FAMILIES.len()).contains(&self.pretrain.classes) {
            return fail("pretrain needs a positive batch and 2..=8 classes".into());
        }
        self.vit.validate()?;
        self.data.validate()
    }

    /// Departures from the recommended defaults worth a warning.
    pub fn default_deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.alpha != DEFAULT_ALPHA {
            out.push(format!("alpha = {} (default {DEFAULT_ALPHA})", self.alpha));
        }
        if self.rank != DEFAULT_RANK {
            out.push(format!("rank = {} (default {DEFAULT_RANK})", self.rank));
        }
        out
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| PegoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PegoError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        crate::checkpoint::sha256_hex(self.to_toml_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_values() {
        let c = TrainConfig::default();
        assert_eq!(c.alpha, 1e-3);
        assert_eq!(c.rank, 4);
        assert_eq!(c.lr, 5e-4);
        assert_eq!(c.val_fraction, 0.2);
        assert_eq!(c.n_search, vec![2, 4, 6]);
        assert_eq!(c.batch_per_domain, 32);
        assert_eq!(FULL_SCALE_ITERATIONS, 5000);
        assert!(c.default_deviations().is_empty());
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::canonical();
        let back = TrainConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = TrainConfig::from_toml_str("alpha = 0.01\n[data]\ndomains = 5\n[pretrain]\nbatch = 4\n").unwrap();
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.data.domains, 5);
        assert_eq!(c.data.per_class, DataConfig::default().per_class);
        assert_eq!(c.pretrain.batch, 4);
        assert_eq!(c.pretrain.iterations, PretrainConfig::default().iterations);
        assert_eq!(c.rank, 4);
        assert_eq!(c.default_deviations().len(), 1);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "alpha = -1.0",
            "val_fraction = 1.0",
            "rank = 0",
            "n_search = []",
            "bogus = 1",
            "[data]\nbogus = 1",
        ] {
            assert!(
                matches!(TrainConfig::from_toml_str(text), Err(PegoError::Config(_))),
                "{text}"
            );
        }
    }
}

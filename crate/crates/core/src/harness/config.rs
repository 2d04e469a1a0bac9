//! Training configuration, loadable from TOML with every section optional.
//!
//! ```toml
//! seed = 7
//! steps = 500
//! lr_start = 1e-3
//!
//! [strategy]
//! kind = "lora_fixed"
//! rank = 16
//!
//! [task]
//! max_depth = 1
//! kinds = ["noise"]
//! noise_sigma = [25.0, 30.0]
//! poisson_noise = false
//!
//! [model]
//! width = 8
//! enc_blocks = [1, 1]
//! middle_blocks = 2
//! dec_blocks = [1, 1]
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::degrade::DegradeConfig;
use crate::error::{Error, Result};
use crate::net::ModelSpec;

/// How fine-tuning chooses its trainable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Full,
    Colora,
    LoraFixed { rank: usize },
    DecoderOnly,
    BiasNormOnly,
}

impl Strategy {
    pub fn uses_adapters(self) -> bool {
        matches!(self, Strategy::Colora | Strategy::LoraFixed { .. })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Full => f.write_str("full"),
            Strategy::Colora => f.write_str("colora"),
            Strategy::LoraFixed { rank } => write!(f, "lora_fixed({rank})"),
            Strategy::DecoderOnly => f.write_str("decoder_only"),
            Strategy::BiasNormOnly => f.write_str("bias_norm_only"),
        }
    }
}

/// Accepts `full`, `colora`, `lora_fixed(16)`, `lora_fixed:16`, `decoder_only`, `bias_norm_only`.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        let bad = || Error::InvalidArgument(format!("unknown strategy {s:?}"));
        Ok(match s.as_str() {
            "full" => Strategy::Full,
            "colora" => Strategy::Colora,
            "decoder_only" => Strategy::DecoderOnly,
            "bias_norm_only" => Strategy::BiasNormOnly,
            "lora" | "lora_fixed" => Strategy::LoraFixed { rank: 16 },
            other => {
                let rank = other
                    .strip_prefix("lora_fixed")
                    .map(|r| r.trim_matches(|c| matches!(c, '(' | ')' | ':' | '=')))
                    .ok_or_else(bad)?;
                Strategy::LoraFixed {
                    rank: rank.parse().map_err(|_| bad())?,
                }
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Psnr,
    L1,
}

/// Rank planning parameters for the colora strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColoraConfig {
    pub alpha: f64,
    pub beta: f64,
    pub min_rank: usize,
}

impl Default for ColoraConfig {
    fn default() -> Self {
        ColoraConfig {
            alpha: 1.0,
            beta: 0.2,
            min_rank: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaigConfig {
    /// Integration steps `M`.
    pub steps: usize,
    pub probe_pairs: usize,
}

impl Default for FaigConfig {
    fn default() -> Self {
        FaigConfig {
            steps: crate::faig::DEFAULT_STEPS,
            probe_pairs: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_start: f64,
    pub lr_min: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub eps: f64,
    pub loss: LossKind,
    /// Random flips and 90° rotations of training crops.
    pub augment: bool,
    pub strategy: Strategy,
    /// Degradations sampled during pre-training, or used to synthesize a task.
    pub task: DegradeConfig,
    pub model: ModelSpec,
    pub colora: ColoraConfig,
    pub faig: FaigConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            patch_size: 32,
            lr_start: 1e-3,
            lr_min: 1e-6,
            betas: [0.9, 0.9],
            weight_decay: 1e-3,
            eps: 1e-8,
            loss: LossKind::Psnr,
            augment: true,
            strategy: Strategy::Full,
            task: DegradeConfig::default(),
            model: ModelSpec::default(),
            colora: ColoraConfig::default(),
            faig: FaigConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.task.validate()?;
        if self.steps < 1 {
            return bad("steps must be ≥ 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be ≥ 1".into());
        }
        let factor = self.model.downsampling();
        if self.patch_size == 0 || self.patch_size % factor != 0 {
            return bad(format!("patch_size {} must be a positive multiple of {factor}", self.patch_size));
        }
        if !(self.lr_min > 0.0 && self.lr_start >= self.lr_min && self.lr_start.is_finite()) {
            return bad(format!("need lr_start ≥ lr_min > 0, got {} and {}", self.lr_start, self.lr_min));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("weight_decay must be ≥ 0 and eps > 0".into());
        }
        if let Strategy::LoraFixed { rank: 0 } = self.strategy {
            return bad("lora_fixed rank must be ≥ 1".into());
        }
        if !(self.colora.alpha > 0.0 && self.colora.beta > 0.0) {
            return bad("colora alpha and beta must be > 0".into());
        }
        if self.faig.steps < 1 || self.faig.probe_pairs < 1 {
            return bad("faig steps and probe_pairs must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

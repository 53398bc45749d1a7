//! Run configuration, loaded from TOML. Every key is optional and falls back to its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gen_synthetic, load_dataset, AugmentConfig, SamplePair, SynthConfig};
use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the random training crop; `0` trains on whole samples.
    pub patch: usize,
    pub augment: bool,
    /// Skip validation before this epoch (1-based); useful for long runs.
    pub val_from_epoch: usize,
    pub schedule: LrSchedule,
    /// Linear ramp from 0 over this many optimizer steps.
    pub warmup_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl TrainConfig {
    /// Learning-rate multiplier for optimizer step `step` (0-based) of `total`.
    pub fn lr_factor(&self, step: usize, total: usize) -> f64 {
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        };
        warm * decay
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            patch: 0,
            augment: true,
            val_from_epoch: 1,
            schedule: LrSchedule::Constant,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub patch: usize,
    /// `0` means `patch / 2`.
    pub stride: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { patch: 64, stride: 0 }
    }
}

impl InferConfig {
    pub fn effective_stride(&self) -> usize {
        if self.stride == 0 {
            (self.patch / 2).max(1)
        } else {
            self.stride
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directories in the `A/ B/ label/` layout. Unset splits are generated.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            val_dir: None,
            test_dir: None,
            train_count: 200,
            val_count: 40,
            test_count: 40,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl DataConfig {
    /// Load a split from its directory, or generate it. Generated splits take consecutive,
    /// disjoint index ranges (train, then val, then test) from the same seed.
    pub fn load_split(&self, split: Split, seed: u64) -> Result<Vec<SamplePair>> {
        let (dir, first, count) = match split {
            Split::Train => (&self.train_dir, 0, self.train_count),
            Split::Val => (&self.val_dir, self.train_count, self.val_count),
            Split::Test => (&self.test_dir, self.train_count + self.val_count, self.test_count),
        };
        match dir {
            Some(dir) => load_dataset(dir),
            None => gen_synthetic(&self.synth, seed, first, count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(),
            optimizer: AdamWConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !t.patch.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Config(format!("train.patch {} is not a multiple of {INPUT_MULTIPLE}", t.patch)));
        }
        let i = &self.infer;
        if i.patch == 0 || !i.patch.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Config(format!("infer.patch {} is not a positive multiple of {INPUT_MULTIPLE}", i.patch)));
        }
        if i.stride > i.patch {
            return Err(Error::Config(format!("infer.stride {} exceeds infer.patch {}", i.stride, i.patch)));
        }
        let o = &self.optimizer;
        let finite = [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || o.beta1 >= 1.0 || o.beta2 >= 1.0 {
            return Err(Error::Config("optimizer values must be finite, non-negative, with betas < 1".into()));
        }
        self.model.encoder.validate()?;
        Ok(())
    }

    /// Row label used in the ablation table, e.g. `csdw=on,led=off`.
    pub fn variant_label(&self) -> String {
        let flag = |b: bool| if b { "on" } else { "off" };
        format!("csdw={},led={}", flag(self.model.csdw_enabled), flag(self.model.led_enabled))
    }

    pub fn augment_config(&self) -> Option<AugmentConfig> {
        self.train.augment.then(AugmentConfig::default)
    }
}

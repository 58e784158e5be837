//! Run configuration: flat key=value files, defaults, and `--set`
//! overrides. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::MultiwayConfig;
use crate::vision::VqkdConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub vqkd_learning_rate: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub pretrain_vqkd_steps: usize,
    pub pretrain_mdm_steps: usize,
    pub freeze_encoder: bool,
    pub split: f64,
    // masking
    pub mask_ratio_text_mono: f64,
    pub mask_ratio_text_pair: f64,
    pub mask_ratio_patch: f64,
    pub min_block: usize,
    // model dims
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub fusion_top: usize,
    pub k_visual: usize,
    pub vqkd_dim: usize,
    pub vqkd_heads: usize,
    pub vqkd_ff: usize,
    pub vqkd_depth: usize,
    pub decoder_depth: usize,
    pub teacher_dim: usize,
    pub max_text_len: usize,
    pub vocab_max: usize,
    pub init_std: f64,
    // paths
    pub dataset: String,
    pub taxonomy: String,
    pub vocab: String,
    pub checkpoint: String,
    /// Explicit split files (one dataset line index per line); the seeded
    /// shuffle applies when either is unset.
    pub split_train: String,
    pub split_test: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 30,
            batch_size: 16,
            dropout: 0.4,
            weight_decay: 0.01,
            learning_rate: 3e-5,
            vqkd_learning_rate: 1e-3,
            image_size: 224,
            patch_size: 16,
            seed: 0,
            pretrain_vqkd_steps: 100,
            pretrain_mdm_steps: 100,
            freeze_encoder: false,
            split: 0.8,
            mask_ratio_text_mono: 0.15,
            mask_ratio_text_pair: 0.5,
            mask_ratio_patch: 0.4,
            min_block: 16,
            layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            fusion_top: 3,
            k_visual: 64,
            vqkd_dim: 32,
            vqkd_heads: 4,
            vqkd_ff: 64,
            vqkd_depth: 1,
            decoder_depth: 1,
            teacher_dim: 32,
            max_text_len: 16,
            vocab_max: 512,
            init_std: 0.02,
            dataset: String::new(),
            taxonomy: String::new(),
            vocab: String::new(),
            checkpoint: String::new(),
            split_train: String::new(),
            split_test: String::new(),
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $key:ident, $value:ident, { $($name:literal => $field:ident : $ty:ty),+ $(,)? }) => {
        match $key {
            $($name => {
                $self.$field = $value.parse::<$ty>().map_err(|_| {
                    Error::Config(format!("invalid value {:?} for key {}", $value, $key))
                })?;
            })+
            _ => return Err(Error::Config(format!("unknown config key: {}", $key))),
        }
    };
}

impl RunConfig {
    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        config_keys!(self, key, value, {
            "epochs" => epochs: usize,
            "batch_size" => batch_size: usize,
            "dropout" => dropout: f64,
            "weight_decay" => weight_decay: f64,
            "learning_rate" => learning_rate: f64,
            "vqkd_learning_rate" => vqkd_learning_rate: f64,
            "image_size" => image_size: usize,
            "patch_size" => patch_size: usize,
            "seed" => seed: u64,
            "pretrain_vqkd_steps" => pretrain_vqkd_steps: usize,
            "pretrain_mdm_steps" => pretrain_mdm_steps: usize,
            "freeze_encoder" => freeze_encoder: bool,
            "split" => split: f64,
            "mask_ratio_text_mono" => mask_ratio_text_mono: f64,
            "mask_ratio_text_pair" => mask_ratio_text_pair: f64,
            "mask_ratio_patch" => mask_ratio_patch: f64,
            "min_block" => min_block: usize,
            "layers" => layers: usize,
            "d_model" => d_model: usize,
            "n_heads" => n_heads: usize,
            "d_ff" => d_ff: usize,
            "fusion_top" => fusion_top: usize,
            "k_visual" => k_visual: usize,
            "vqkd_dim" => vqkd_dim: usize,
            "vqkd_heads" => vqkd_heads: usize,
            "vqkd_ff" => vqkd_ff: usize,
            "vqkd_depth" => vqkd_depth: usize,
            "decoder_depth" => decoder_depth: usize,
            "teacher_dim" => teacher_dim: usize,
            "max_text_len" => max_text_len: usize,
            "vocab_max" => vocab_max: usize,
            "init_std" => init_std: f64,
            "dataset" => dataset: String,
            "taxonomy" => taxonomy: String,
            "vocab" => vocab: String,
            "checkpoint" => checkpoint: String,
            "split_train" => split_train: String,
            "split_test" => split_test: String,
        });
        Ok(())
    }

    pub fn apply_line(&mut self, line: &str) -> Result<()> {
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "expected key=value, got {line:?}"
            )));
        };
        self.set(key.trim(), value.trim())
    }

    /// Flat UTF-8 key=value lines; comments (#) and blanks skipped.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut config = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            config.apply_line(line)?;
        }
        Ok(config)
    }

    /// Canonical serialization; checkpoints embed this block.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        w("epochs", self.epochs.to_string());
        w("batch_size", self.batch_size.to_string());
        w("dropout", format!("{:?}", self.dropout));
        w("weight_decay", format!("{:?}", self.weight_decay));
        w("learning_rate", format!("{:?}", self.learning_rate));
        w("vqkd_learning_rate", format!("{:?}", self.vqkd_learning_rate));
        w("image_size", self.image_size.to_string());
        w("patch_size", self.patch_size.to_string());
        w("seed", self.seed.to_string());
        w("pretrain_vqkd_steps", self.pretrain_vqkd_steps.to_string());
        w("pretrain_mdm_steps", self.pretrain_mdm_steps.to_string());
        w("freeze_encoder", self.freeze_encoder.to_string());
        w("split", format!("{:?}", self.split));
        w("mask_ratio_text_mono", format!("{:?}", self.mask_ratio_text_mono));
        w("mask_ratio_text_pair", format!("{:?}", self.mask_ratio_text_pair));
        w("mask_ratio_patch", format!("{:?}", self.mask_ratio_patch));
        w("min_block", self.min_block.to_string());
        w("layers", self.layers.to_string());
        w("d_model", self.d_model.to_string());
        w("n_heads", self.n_heads.to_string());
        w("d_ff", self.d_ff.to_string());
        w("fusion_top", self.fusion_top.to_string());
        w("k_visual", self.k_visual.to_string());
        w("vqkd_dim", self.vqkd_dim.to_string());
        w("vqkd_heads", self.vqkd_heads.to_string());
        w("vqkd_ff", self.vqkd_ff.to_string());
        w("vqkd_depth", self.vqkd_depth.to_string());
        w("decoder_depth", self.decoder_depth.to_string());
        w("teacher_dim", self.teacher_dim.to_string());
        w("max_text_len", self.max_text_len.to_string());
        w("vocab_max", self.vocab_max.to_string());
        w("init_std", format!("{:?}", self.init_std));
        w("dataset", self.dataset.clone());
        w("taxonomy", self.taxonomy.clone());
        w("vocab", self.vocab.clone());
        w("checkpoint", self.checkpoint.clone());
        w("split_train", self.split_train.clone());
        w("split_test", self.split_test.clone());
        s
    }

    pub fn from_key_values(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            config.apply_line(line)?;
        }
        Ok(config)
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Block-masking minimum block size, clamped so tiny toy grids stay
    /// feasible.
    pub fn effective_min_block(&self) -> usize {
        let target = (self.n_patches() as f64 * self.mask_ratio_patch).floor() as usize;
        self.min_block.min(target.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.split) {
            return Err(Error::Config(format!("split {} outside [0,1]", self.split)));
        }
        for (name, r) in [
            ("mask_ratio_text_mono", self.mask_ratio_text_mono),
            ("mask_ratio_text_pair", self.mask_ratio_text_pair),
            ("mask_ratio_patch", self.mask_ratio_patch),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn multiway_config(&self, text_vocab: usize, n_answers: usize) -> MultiwayConfig {
        MultiwayConfig {
            layers: self.layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            fusion_top: self.fusion_top.min(self.layers),
            dropout: self.dropout,
            text_vocab,
            visual_vocab: self.k_visual,
            n_answers,
            patch: self.patch_size,
            channels: 3,
            n_patches: self.n_patches(),
            max_text_len: self.max_text_len,
            init_std: self.init_std,
        }
    }

    pub fn vqkd_config(&self) -> VqkdConfig {
        VqkdConfig {
            patch: self.patch_size,
            channels: 3,
            n_patches: self.n_patches(),
            d_model: self.vqkd_dim,
            n_heads: self.vqkd_heads,
            d_ff: self.vqkd_ff,
            encoder_depth: self.vqkd_depth,
            decoder_depth: self.decoder_depth,
            codebook_size: self.k_visual,
            teacher_dim: self.teacher_dim,
            decoder_positions: true,
            init_std: self.init_std,
        }
    }
}

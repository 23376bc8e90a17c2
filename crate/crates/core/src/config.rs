//! Flat `key = value` run configuration shared by every subcommand.

use std::path::Path;

use crate::dataset::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

/// Learning rate used for from-scratch training at toy scale.
pub const DESK_LEARNING_RATE: f64 = 1e-3;
pub const DESK_EPOCHS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub variant: Variant,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            train: desk_train_config(),
            model: ModelConfig::default(),
            variant: Variant::Full,
        }
    }
}

/// Training defaults for models trained from random initialization. The
/// fine-tuning grid's learning rates are far too small for that, so this
/// preset sits off the grid.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: DESK_LEARNING_RATE,
        epochs: DESK_EPOCHS,
        allow_off_grid: true,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    /// `seed` seeds both data generation and training.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        let enc = &mut self.model.encoder;
        match key {
            "seed" => {
                self.generator.seed = num(key, value)?;
                self.train.seed = self.generator.seed;
            }
            "variant" => self.variant = value.parse().map_err(|e: Error| e.to_string())?,
            "softmax_axis" => self.model.softmax_axis = value.parse().map_err(|e: Error| e.to_string())?,
            "d_model" => enc.d_model = num(key, value)?,
            "heads" => enc.heads = num(key, value)?,
            "blocks" => enc.blocks = num(key, value)?,
            "max_len" => enc.max_len = num(key, value)?,
            "ffn_mult" => enc.ffn_mult = num(key, value)?,
            "visual_dim" => self.model.visual_dim = num(key, value)?,
            "adapter_heads" => self.model.adapter_heads = num(key, value)?,
            _ => {
                if self.train.set(key, value).is_err() {
                    self.generator
                        .set(key, value)
                        .map_err(|_| format!("unknown config key {key:?}"))?;
                }
            }
        }
        Ok(())
    }

    /// Applies a flat config text on top of the current values.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_kv(&std::fs::read_to_string(path)?)
    }

    /// Keeps the visual width and block count in step with the generator.
    pub fn sync(&mut self) {
        self.model.num_blocks = self.generator.grid_size * self.generator.grid_size;
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.model.encoder.validate()?;
        self.model.adapter_config().validate()?;
        if self.model.num_blocks != self.generator.grid_size * self.generator.grid_size {
            return Err(Error::Config("num_blocks must equal grid_size squared".into()));
        }
        Ok(())
    }

    /// Every resolved value; reading it back reproduces this config.
    pub fn to_kv(&self) -> String {
        let t = &self.train;
        let e = &self.model.encoder;
        let mut s = self
            .generator
            .to_kv()
            .lines()
            .filter(|l| !l.starts_with("seed "))
            .map(|l| format!("{l}\n"))
            .collect::<String>();
        s.push_str(&format!(
            "seed = {}\nvariant = {}\nsoftmax_axis = {}\nd_model = {}\nheads = {}\nblocks = {}\n\
             max_len = {}\nffn_mult = {}\nvisual_dim = {}\nadapter_heads = {}\nlearning_rate = {}\n\
             warmup_fraction = {}\nweight_decay = {}\nbatch_size = {}\ndropout = {}\ngrad_clip = {}\n\
             epochs = {}\nallow_off_grid = {}\n",
            t.seed,
            self.variant,
            self.model.softmax_axis,
            e.d_model,
            e.heads,
            e.blocks,
            e.max_len,
            e.ffn_mult,
            self.model.visual_dim,
            self.model.adapter_heads,
            t.learning_rate,
            t.warmup_fraction,
            t.weight_decay,
            t.batch_size,
            t.dropout,
            t.grad_clip,
            t.epochs,
            t.allow_off_grid,
        ));
        s
    }
}

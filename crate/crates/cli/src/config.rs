//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use cracknet::data::MaskEncoding;
use cracknet::train::TrainConfig;
use cracknet::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

/// Everything a training-type command needs. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask_encoding: MaskEncoding,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Flags that override values from `--config`.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration; flags below take precedence over it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `images/` and `masks/`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for initialization, splitting, shuffling and augmentation
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Square input side; images are resized to it
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub width_multiplier: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_cagm: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_rfem: Option<bool>,
    /// Turn off every augmentation
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, value_parser = parse_encoding)]
    pub mask_encoding: Option<MaskEncoding>,
}

fn parse_encoding(s: &str) -> std::result::Result<MaskEncoding, String> {
    match s {
        "binary" => Ok(MaskEncoding::Binary),
        "index" => Ok(MaskEncoding::Index),
        _ => Err(format!("expected `binary` or `index`, got `{s}`")),
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
        }
        let t = &mut cfg.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.lr = self.lr.unwrap_or(t.lr);
        t.weight_decay = self.weight_decay.unwrap_or(t.weight_decay);
        if self.no_augment {
            t.augment = cracknet::data::AugmentConfig::none();
        }
        let m = &mut cfg.model;
        if let Some(s) = self.size {
            m.height = s;
            m.width = s;
        }
        m.classes = self.classes.unwrap_or(m.classes);
        m.width_multiplier = self.width_multiplier.unwrap_or(m.width_multiplier);
        m.use_cagm = self.use_cagm.unwrap_or(m.use_cagm);
        m.use_rfem = self.use_rfem.unwrap_or(m.use_rfem);
        cfg.mask_encoding = self.mask_encoding.unwrap_or(cfg.mask_encoding);
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Usage("no dataset given (--data or `data` in the config)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| {
            Error::Usage("no output directory given (--out or `out` in the config)".into())
        })
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset};
use crate::train::TrainConfig;

/// Model section of a run config: a preset plus optional overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: Option<Preset>,
    pub num_classes: Option<usize>,
    pub input_channels: Option<usize>,
    pub encoder_blocks: Option<Vec<usize>>,
    pub growth: Option<usize>,
    pub stem_channels: Option<usize>,
    pub shape_stream_width: Option<usize>,
    pub decoder_channels: Option<Vec<usize>>,
    pub se_reduction: Option<usize>,
    pub shape_stream: Option<bool>,
}

impl ModelSpec {
    pub fn resolve(&self) -> ModelConfig {
        let mut c = ModelConfig::preset(self.preset.unwrap_or(Preset::Tiny));
        macro_rules! take {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { c.$f = v.clone(); })*};
        }
        take!(num_classes, input_channels, encoder_blocks, growth, stem_channels, shape_stream_width, decoder_channels, se_reduction, shape_stream);
        c
    }
}

/// One reproducible training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset root; relative paths are taken from the config file's directory.
    pub data: Option<PathBuf>,
    /// Output directory for the log and checkpoints.
    pub out: Option<PathBuf>,
    /// Crop size; defaults to the stored slice size.
    pub crop: Option<usize>,
    /// Overrides `train.seed`; falls back to `SAUNET_SEED`, then 0.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        resolve(&mut cfg.data);
        resolve(&mut cfg.out);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolve().validate()?;
        self.train.validate()?;
        if self.data.is_none() {
            return Err(Error::Config("no dataset given (config 'data' or --data)".into()));
        }
        if self.out.is_none() {
            return Err(Error::Config("no output directory given (config 'out' or --out)".into()));
        }
        if let Some(c) = self.crop {
            if c == 0 || c % 8 != 0 {
                return Err(Error::Config(format!("crop must be a positive multiple of 8, got {c}")));
            }
        }
        Ok(())
    }
}

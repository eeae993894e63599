//! Run configuration files (TOML, strict schema).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{ingest_images, ingest_text, synthetic_images, Normalization};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::train::{TrainConfig, TrainData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticImages {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Byte-level text corpus (LM runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<PathBuf>,
    /// Binary image dataset (vision runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// Procedurally generated images used when no file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_images: Option<SyntheticImages>,
    #[serde(default)]
    pub normalization: Normalization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses and validates; relative data paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.materialize_defaults();
        for p in [&mut cfg.data.text, &mut cfg.data.images].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.train.lambdas(if self.model.is_nested() { self.model.granularities().len() } else { 1 })?;
        let d = &self.data;
        match self.model.kind {
            ModelKind::Lm if d.text.is_none() => Err(Error::Config("lm runs need data.text".into())),
            ModelKind::Vision if d.images.is_some() && d.synthetic_images.is_some() => {
                Err(Error::Config("data.images and data.synthetic_images conflict".into()))
            }
            ModelKind::Vision if d.images.is_none() && d.synthetic_images.is_none() => {
                Err(Error::Config("vision runs need data.images or data.synthetic_images".into()))
            }
            ModelKind::Vision if d.normalization.mean.len() != self.model.channels => {
                Err(Error::Config(format!("normalization has {} channels", d.normalization.mean.len())))
            }
            _ => Ok(()),
        }
    }

    /// Loads the configured dataset and splits off the validation tail.
    pub fn load_data(&self) -> Result<TrainData> {
        let frac = self.train.val_fraction;
        match self.model.kind {
            ModelKind::Lm => TrainData::text(ingest_text(self.data.text.as_ref().expect("validated"))?, frac),
            ModelKind::Vision => {
                let ds = match (&self.data.images, &self.data.synthetic_images) {
                    (Some(p), _) => ingest_images(p)?,
                    (None, Some(s)) => synthetic_images(s.count, self.model.image_size, self.model.num_classes, s.seed),
                    (None, None) => unreachable!("validated"),
                };
                if ds.channels != self.model.channels || ds.height % self.model.patch_size != 0 {
                    return Err(Error::Config(format!(
                        "dataset images {}x{}x{} do not fit the model",
                        ds.height, ds.width, ds.channels
                    )));
                }
                TrainData::images(ds, frac, self.data.normalization.clone())
            }
        }
    }
}

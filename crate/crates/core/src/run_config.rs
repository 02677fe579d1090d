//! A whole run described by one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_shapes, load_idx, Dataset};
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic shapes; the validation images come after the training
    /// images in one generated sequence.
    Shapes { n_train: usize, n_val: usize, seed: u64 },
    /// IDX files; relative paths are resolved against the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    /// Directory of the file the config was read from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Fields that determine results; the output location does not.
#[derive(Serialize)]
struct Hashed<'a> {
    schema_version: u32,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: &'a DataSource,
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON form.
pub fn hash_json<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config types serialise");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    /// Default toy run: 1600 training and 400 validation shapes.
    pub fn toy(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: output_dir.into(),
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            data: DataSource::Shapes {
                n_train: 1600,
                n_val: 400,
                seed: 0,
            },
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialise")
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if let crate::training::SamplingScheme::Single(sc) = self.train.sampling {
            self.model.check_subnet(sc)?;
        }
        if let DataSource::Shapes { n_train, n_val, .. } = self.data {
            if n_train < self.model.num_classes || n_val == 0 {
                return Err(Error::Config(format!(
                    "shapes need n_train >= {} and n_val >= 1",
                    self.model.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(&Hashed {
            schema_version: self.schema_version,
            model: &self.model,
            train: &self.train,
            data: &self.data,
        })
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_path(&self, file: &str) -> PathBuf {
        self.resolve(&self.output_dir).join(file)
    }

    /// Training and validation sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), Error> {
        let m = &self.model;
        match &self.data {
            DataSource::Shapes { n_train, n_val, seed } => {
                let all = generate_shapes(n_train + n_val, m.image_side, m.channels, m.num_classes, *seed)?;
                all.split_at(*n_train)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
            } => {
                let load = |i: &PathBuf, l: &PathBuf| {
                    load_idx(&self.resolve(i), &self.resolve(l), m.image_side, m.channels, m.num_classes)
                };
                Ok((load(train_images, train_labels)?, load(val_images, val_labels)?))
            }
        }
    }
}

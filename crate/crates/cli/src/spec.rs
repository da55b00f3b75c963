//! Run specifications: a serializable record from which an experiment is
//! reproducible. One top-level seed derives the dataset, initialization, and
//! episode-sampling seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tpn_core::datasets::{self, DomainPair, GeneratorMeta};
use tpn_core::net::NetworkConfig;
use tpn_core::trainer::TrainConfig;
use tpn_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        rotation_deg: f64,
        translation: [f64; 2],
        noise: f64,
    },
    Moons {
        per_class: usize,
        rotation_deg: f64,
        noise: f64,
    },
    Idx {
        source_images: PathBuf,
        source_labels: PathBuf,
        target_images: PathBuf,
        /// Target labels are loaded for diagnostics only (noise ratio and
        /// target accuracy); the trainer never optimizes against them.
        target_labels: PathBuf,
        #[serde(default)]
        source_subsample: Option<usize>,
        #[serde(default)]
        target_subsample: Option<usize>,
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ModelSpec {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        embedding_dim: usize,
    },
    Lenet {
        embedding_dim: usize,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl RunSpec {
    /// Parses TOML (default) or JSON (`.json` extension).
    pub fn load(path: &Path) -> Result<RunSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::open(path, e))?;
        let spec: RunSpec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?
        };
        spec.train.validate()?;
        Ok(spec)
    }

    /// Materializes the dataset. The run seed drives generation directly;
    /// IDX subsampling derives per-domain seeds from it.
    pub fn build_dataset(&self, seed: u64) -> Result<DomainPair> {
        match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                per_class,
                rotation_deg,
                translation,
                noise,
            } => datasets::gen_shifted_blobs(
                *classes,
                *per_class,
                *rotation_deg,
                *translation,
                *noise,
                seed,
            ),
            DatasetSpec::Moons {
                per_class,
                rotation_deg,
                noise,
            } => datasets::gen_two_moons_shift(*per_class, *rotation_deg, *noise, seed),
            DatasetSpec::Idx {
                source_images,
                source_labels,
                target_images,
                target_labels,
                source_subsample,
                target_subsample,
                classes,
            } => {
                let (src_in, src_lb) =
                    datasets::load_idx(source_images, source_labels, *source_subsample, seed)?;
                let (tgt_in, tgt_lb) = datasets::load_idx(
                    target_images,
                    target_labels,
                    *target_subsample,
                    seed.wrapping_add(1),
                )?;
                let input_dim = src_in.cols();
                Ok(DomainPair {
                    source_inputs: src_in,
                    source_labels: src_lb,
                    target_inputs: tgt_in,
                    target_oracle_labels: Some(tgt_lb),
                    classes: *classes,
                    input_dim,
                    meta: GeneratorMeta {
                        kind: "idx".to_string(),
                        rotation_deg: 0.0,
                        translation: [0.0, 0.0],
                        noise: 0.0,
                        seed,
                    },
                })
            }
        }
    }

    /// Network configuration for this spec over the given dataset.
    pub fn network(&self, input_dim: usize, seed: u64) -> NetworkConfig {
        match &self.model {
            ModelSpec::Mlp {
                hidden,
                embedding_dim,
            } => NetworkConfig::mlp(input_dim, hidden.clone(), *embedding_dim, seed),
            ModelSpec::Lenet { embedding_dim } => NetworkConfig::lenet(*embedding_dim, seed),
        }
    }

    /// Trainer configuration with the episode seed pinned from the run seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Seed derivation: one run seed fans out to the three consumers.
pub struct RunSeeds {
    pub data: u64,
    pub net: u64,
    pub episodes: u64,
}

impl RunSeeds {
    pub fn from(seed: u64) -> Self {
        RunSeeds {
            data: seed,
            net: seed.wrapping_add(1),
            episodes: seed.wrapping_add(2),
        }
    }
}

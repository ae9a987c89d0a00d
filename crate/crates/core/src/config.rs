//! Run configuration: a TOML document with `[data]`, `[model]`, `[train]`,
//! `[eval]`, `[seeds]`, `[paths]` and optional `[sweep]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::training::{TrainConfig, TrainSeeds};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub delimiter: char,
    /// Train / validation / test fractions.
    pub ratios: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data/interactions.tsv"),
            delimiter: '\t',
            ratios: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub sampler: u64,
    pub negatives: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            sampler: 2,
            negatives: 3,
        }
    }
}

impl Seeds {
    pub fn train(&self) -> TrainSeeds {
        TrainSeeds {
            sampler: self.sampler,
            negatives: self.negatives,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    /// Checkpoint to read for eval/probe/export; defaults to `<run dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

/// Value lists for grid sweeps; empty lists keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub dim: Vec<usize>,
    pub layers: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub heads: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub l2_lambda: Vec<f64>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.dim.is_empty()
            && self.layers.is_empty()
            && self.neighbors.is_empty()
            && self.heads.is_empty()
            && self.learning_rate.is_empty()
            && self.l2_lambda.is_empty()
    }

    /// Cartesian product over all lists, in declaration order.
    pub fn expand(&self, base: &RunConfig) -> Vec<RunConfig> {
        fn axis<T: Clone>(xs: &[T], base: T) -> Vec<T> {
            if xs.is_empty() {
                vec![base]
            } else {
                xs.to_vec()
            }
        }
        let mut out = Vec::new();
        for dim in axis(&self.dim, base.model.dim) {
            for layers in axis(&self.layers, base.model.layers) {
                for neighbors in axis(&self.neighbors, base.model.neighbors) {
                    for heads in axis(&self.heads, base.model.heads) {
                        for lr in axis(&self.learning_rate, base.train.learning_rate) {
                            for l2 in axis(&self.l2_lambda, base.train.l2_lambda) {
                                let mut c = base.clone();
                                c.sweep = SweepConfig::default();
                                c.model.dim = dim;
                                c.model.layers = layers;
                                c.model.neighbors = neighbors;
                                c.model.heads = heads;
                                c.train.learning_rate = lr;
                                c.train.l2_lambda = l2;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    pub paths: PathsConfig,
    #[serde(skip_serializing_if = "SweepConfig::is_empty")]
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.data.ratios;
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRatios(r));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.cutoffs.is_empty() || self.eval.cutoffs.contains(&0) {
            return Err(Error::InvalidConfig("eval cutoffs must be positive".into()));
        }
        Ok(())
    }

    /// Evaluation settings with the run seeds attached.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            sampler_seed: self.seeds.sampler,
            negatives_seed: self.seeds.negatives,
            ..self.eval.clone()
        }
    }
}

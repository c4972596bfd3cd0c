//! Training: run configuration, the Adam optimizer, the teacher classifier,
//! the concept-model training loop, checkpoints, and random search.

pub mod checkpoint;
pub mod optimizer;
pub mod search;
pub mod teacher;
pub mod trainer;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossWeights, ModelDims};

/// One run's hyperparameters. A config file holds `key = value` lines;
/// command-line flags override file values, file values override defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_size: usize,
    pub embedding_dim: usize,
    pub lambda_overlap: f64,
    pub lambda_div: f64,
    pub lambda_distill: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub gumbel_temp_generator: f64,
    pub gumbel_temp_selector: f64,
    pub num_concepts: usize,
    pub chunk_len: usize,
    pub max_epochs: usize,
    /// Maximum tokens kept per document.
    pub truncation: usize,
    pub seed: u64,
    pub selector_cnn: bool,
    /// Force presence to 1 for every concept, disabling the selector. Used
    /// by the ablation harness.
    #[serde(default)]
    pub selector_fixed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 128,
            hidden_size: 256,
            embedding_dim: 100,
            lambda_overlap: 0.05,
            lambda_div: 0.05,
            lambda_distill: 0.5,
            dropout: 0.1,
            weight_decay: 0.0,
            gumbel_temp_generator: 1.0,
            gumbel_temp_selector: 1.0,
            num_concepts: 5,
            chunk_len: 10,
            max_epochs: 30,
            truncation: 320,
            seed: 0,
            selector_cnn: false,
            selector_fixed: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.hidden_size == 0 || self.embedding_dim == 0 {
            return Err(Error::Config(
                "batch_size, hidden_size and embedding_dim must be positive".into(),
            ));
        }
        if self.num_concepts == 0 || self.chunk_len == 0 {
            return Err(Error::Config(
                "num_concepts and chunk_len must be positive".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.truncation == 0 {
            return Err(Error::Config("truncation must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.lambda_overlap < 0.0 || self.lambda_div < 0.0 || self.lambda_distill < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.gumbel_temp_generator <= 0.0 || self.gumbel_temp_selector <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            overlap: self.lambda_overlap,
            diversity: self.lambda_div,
            distill: self.lambda_distill,
        }
    }

    pub fn model_dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: self.embedding_dim,
            hidden: self.hidden_size,
            num_concepts: self.num_concepts,
            chunk_len: self.chunk_len,
            selector_cnn: self.selector_cnn,
        }
    }

    /// Read a `key = value` config file and overlay it on the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&parse_key_values(path)?, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key = value` pairs; unknown keys are errors so typos do not
    /// silently run with defaults.
    pub fn apply(&mut self, pairs: &BTreeMap<String, (usize, String)>, source: &str) -> Result<()> {
        for (key, (line, value)) in pairs {
            let bad = |message: String| Error::Format {
                path: source.to_string(),
                line: *line,
                message,
            };
            macro_rules! parse {
                ($t:ty) => {
                    value.parse::<$t>().map_err(|e| {
                        bad(format!("invalid value {value:?} for {key}: {e}"))
                    })?
                };
            }
            match key.as_str() {
                "learning_rate" => self.learning_rate = parse!(f64),
                "batch_size" => self.batch_size = parse!(usize),
                "hidden_size" => self.hidden_size = parse!(usize),
                "embedding_dim" => self.embedding_dim = parse!(usize),
                "lambda_overlap" => self.lambda_overlap = parse!(f64),
                "lambda_div" => self.lambda_div = parse!(f64),
                "lambda_distill" => self.lambda_distill = parse!(f64),
                "dropout" => self.dropout = parse!(f64),
                "weight_decay" => self.weight_decay = parse!(f64),
                "gumbel_temp_generator" => self.gumbel_temp_generator = parse!(f64),
                "gumbel_temp_selector" => self.gumbel_temp_selector = parse!(f64),
                "num_concepts" => self.num_concepts = parse!(usize),
                "chunk_len" => self.chunk_len = parse!(usize),
                "max_epochs" => self.max_epochs = parse!(usize),
                "truncation" => self.truncation = parse!(usize),
                "seed" => self.seed = parse!(u64),
                "selector_cnn" => self.selector_cnn = parse!(bool),
                "selector_fixed" => self.selector_fixed = parse!(bool),
                _ => return Err(bad(format!("unknown configuration key {key:?}"))),
            }
        }
        Ok(())
    }
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
/// Returns key -> (line number, raw value).
pub fn parse_key_values(path: &Path) -> Result<BTreeMap<String, (usize, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(Error::Format {
                path: path.display().to_string(),
                line,
                message: format!("expected `key = value`, got {stripped:?}"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if out.insert(key.clone(), (line, value)).is_some() {
            return Err(Error::Format {
                path: path.display().to_string(),
                line,
                message: format!("duplicate key {key:?}"),
            });
        }
    }
    Ok(out)
}

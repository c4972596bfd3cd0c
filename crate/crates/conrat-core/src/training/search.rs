//! Random hyperparameter search: sample trial configs from a declared space,
//! train each, rank by dev accuracy.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::training::teacher::TeacherParams;
use crate::training::trainer::train;
use crate::training::TrainConfig;

/// Hyperparameter ranges. Discrete fields are choice lists; the temperature
/// range is continuous and sampled independently for generator and selector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: Vec<f64>,
    pub lambda_overlap: Vec<f64>,
    pub lambda_div: Vec<f64>,
    pub lambda_distill: Vec<f64>,
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub temperature: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: vec![0.0005, 0.00075, 0.001],
            lambda_overlap: vec![0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
            lambda_div: vec![0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
            lambda_distill: vec![0.5, 0.6],
            dropout: vec![0.0, 0.1],
            weight_decay: vec![0.0, 1e-8, 1e-10],
            temperature: (1.0, 1.5),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let lists: [(&str, &[f64]); 6] = [
            ("learning_rate", &self.learning_rate),
            ("lambda_overlap", &self.lambda_overlap),
            ("lambda_div", &self.lambda_div),
            ("lambda_distill", &self.lambda_distill),
            ("dropout", &self.dropout),
            ("weight_decay", &self.weight_decay),
        ];
        for (name, values) in lists {
            if values.is_empty() {
                return Err(Error::Config(format!("search space for {name} is empty")));
            }
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!(
                    "search space for {name} must be finite and non-negative"
                )));
            }
        }
        let (lo, hi) = self.temperature;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(Error::Config(
                "temperature range must satisfy 0 < low <= high".into(),
            ));
        }
        Ok(())
    }

    /// Draw one trial config. Fields outside the space (K, ℓ, sizes, epochs,
    /// seed) come from `base`. Draw order is fixed: lr, λ_O, λ_D, λ_T,
    /// dropout, weight decay, generator temperature, selector temperature.
    pub fn sample(&self, base: &TrainConfig, rng: &mut ChaCha8Rng) -> TrainConfig {
        fn pick(values: &[f64], rng: &mut ChaCha8Rng) -> f64 {
            values[rng.random_range(0..values.len())]
        }
        let (lo, hi) = self.temperature;
        let mut cfg = base.clone();
        cfg.learning_rate = pick(&self.learning_rate, rng);
        cfg.lambda_overlap = pick(&self.lambda_overlap, rng);
        cfg.lambda_div = pick(&self.lambda_div, rng);
        cfg.lambda_distill = pick(&self.lambda_distill, rng);
        cfg.dropout = pick(&self.dropout, rng);
        cfg.weight_decay = pick(&self.weight_decay, rng);
        cfg.gumbel_temp_generator = lo + (hi - lo) * rng.random::<f64>();
        cfg.gumbel_temp_selector = lo + (hi - lo) * rng.random::<f64>();
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
}

pub struct SearchOutcome {
    pub best: TrialResult,
    /// All trials, best first; ties keep the earlier trial ahead.
    pub leaderboard: Vec<TrialResult>,
}

pub fn random_search(
    space: &SearchSpace,
    trials: usize,
    base: &TrainConfig,
    train_docs: &[(Vec<usize>, usize)],
    dev_docs: &[(Vec<usize>, usize)],
    embedding: &Array2<f64>,
    teacher: Option<&TeacherParams>,
    mut progress: Option<&mut dyn FnMut(&TrialResult)>,
) -> Result<SearchOutcome> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    space.validate()?;
    let mut rng = rng_for(base.seed, Stream::SearchMeta);
    let mut leaderboard = Vec::with_capacity(trials);
    for trial in 0..trials {
        let cfg = space.sample(base, &mut rng);
        let outcome = train(&cfg, train_docs, dev_docs, embedding.clone(), teacher, None)?;
        let result = TrialResult {
            trial,
            config: cfg,
            best_epoch: outcome.best_epoch,
            dev_accuracy: outcome.best_dev_accuracy,
        };
        if let Some(cb) = progress.as_mut() {
            cb(&result);
        }
        leaderboard.push(result);
    }
    leaderboard.sort_by(|a, b| {
        b.dev_accuracy
            .partial_cmp(&a.dev_accuracy)
            .expect("accuracies are finite")
            .then(a.trial.cmp(&b.trial))
    });
    let best = leaderboard[0].clone();
    Ok(SearchOutcome { best, leaderboard })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::embeddings::random_embeddings;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::data::vocab::Vocabulary;

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let space = SearchSpace::default();
        let base = TrainConfig::default();
        let mut a = rng_for(7, Stream::SearchMeta);
        let mut b = rng_for(7, Stream::SearchMeta);
        for _ in 0..50 {
            let ca = space.sample(&base, &mut a);
            let cb = space.sample(&base, &mut b);
            assert_eq!(
                serde_json::to_string(&ca).unwrap(),
                serde_json::to_string(&cb).unwrap()
            );
            assert!(space.learning_rate.contains(&ca.learning_rate));
            assert!(space.lambda_overlap.contains(&ca.lambda_overlap));
            assert!(space.lambda_div.contains(&ca.lambda_div));
            assert!(space.lambda_distill.contains(&ca.lambda_distill));
            assert!(space.dropout.contains(&ca.dropout));
            assert!(space.weight_decay.contains(&ca.weight_decay));
            for t in [ca.gumbel_temp_generator, ca.gumbel_temp_selector] {
                assert!((1.0..=1.5).contains(&t));
            }
            assert_eq!(ca.num_concepts, base.num_concepts);
            assert_eq!(ca.seed, base.seed);
        }
        let mut c = rng_for(8, Stream::SearchMeta);
        assert_ne!(
            serde_json::to_string(&space.sample(&base, &mut a)).unwrap(),
            serde_json::to_string(&space.sample(&base, &mut c)).unwrap()
        );
    }

    #[test]
    fn empty_space_is_rejected() {
        let mut space = SearchSpace::default();
        space.learning_rate.clear();
        assert!(space.validate().is_err());
        let base = TrainConfig::default();
        let err = random_search(&space, 1, &base, &[], &[], &Array2::zeros((2, 4)), None, None);
        assert!(err.is_err());
    }

    #[test]
    fn single_trial_search_returns_that_config() {
        let cfg = SyntheticConfig {
            num_docs: 60,
            num_aspects: 2,
            chunk_len: 3,
            max_len: 24,
            seed: 21,
            ..SyntheticConfig::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        let vocab = Vocabulary::build(docs.iter().map(|d| d.tokens.as_slice()), 8);
        let data: Vec<(Vec<usize>, usize)> = docs
            .iter()
            .map(|d| (vocab.encode(&d.tokens), d.label as usize))
            .collect();
        let (train_docs, dev_docs) = data.split_at(48);
        let emb = random_embeddings(&vocab, 21);

        let space = SearchSpace {
            learning_rate: vec![0.004],
            lambda_overlap: vec![0.05],
            lambda_div: vec![0.05],
            lambda_distill: vec![0.0],
            dropout: vec![0.0],
            weight_decay: vec![0.0],
            temperature: (1.0, 1.0),
        };
        let base = TrainConfig {
            batch_size: 16,
            hidden_size: 8,
            embedding_dim: 8,
            num_concepts: 2,
            chunk_len: 3,
            max_epochs: 2,
            seed: 21,
            ..TrainConfig::default()
        };
        let out = random_search(&space, 1, &base, train_docs, dev_docs, &emb, None, None).unwrap();
        assert_eq!(out.leaderboard.len(), 1);
        assert_eq!(out.best.trial, 0);
        assert_eq!(out.best.config.learning_rate, 0.004);
        assert_eq!(out.best.config.gumbel_temp_generator, 1.0);
        assert!(out.best.dev_accuracy >= 0.0);
    }
}

//! The concept-model training loop: shuffled minibatches, Adam updates on the
//! straight-through graph, per-epoch dev evaluation, best-epoch selection.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::forward::{forward, BatchInput, ForwardOptions, Mode};
use crate::model::{ConRATParams, LossParts};
use crate::training::teacher::{shuffled_indices, teacher_predict, TeacherParams};
use crate::training::optimizer::Adam;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub pred: f64,
    pub overlap: f64,
    pub diversity: f64,
    pub distill: f64,
    pub dev_accuracy: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub params: ConRATParams,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub history: Vec<EpochMetrics>,
}

/// Mean predicted-class accuracy under the deterministic pass.
pub fn model_accuracy(
    params: &ConRATParams,
    docs: &[(Vec<usize>, usize)],
    batch_size: usize,
) -> Result<f64> {
    model_accuracy_forced(params, docs, batch_size, None)
}

/// Accuracy with an optional presence override, one value per concept.
pub fn model_accuracy_forced(
    params: &ConRATParams,
    docs: &[(Vec<usize>, usize)],
    batch_size: usize,
    force_presence: Option<&[f64]>,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::DegenerateInput("no documents to evaluate".into()));
    }
    let mut correct = 0usize;
    for chunk in docs.chunks(batch_size.max(1)) {
        let batch = BatchInput::new(
            chunk.iter().map(|(d, _)| d.clone()).collect(),
            chunk.iter().map(|(_, l)| *l).collect(),
        )?;
        let opts = ForwardOptions {
            force_presence,
            ..ForwardOptions::default()
        };
        let r = forward(params, &batch, &opts)?;
        let lp = r.graph.value(r.log_probs);
        for (b, (_, label)) in chunk.iter().enumerate() {
            let pred = usize::from(lp[(b, 1)] > lp[(b, 0)]);
            correct += usize::from(pred == *label);
        }
    }
    Ok(correct as f64 / docs.len() as f64)
}

/// Train from scratch. The teacher, when given, is frozen: its probabilities
/// over the training documents are computed once up front. Returns the
/// parameters from the epoch with the best dev accuracy (earliest on ties).
pub fn train(
    config: &TrainConfig,
    train_docs: &[(Vec<usize>, usize)],
    dev_docs: &[(Vec<usize>, usize)],
    embedding: Array2<f64>,
    teacher: Option<&TeacherParams>,
    mut progress: Option<&mut dyn FnMut(&EpochMetrics)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_docs.is_empty() || dev_docs.is_empty() {
        return Err(Error::Config("training needs train and dev splits".into()));
    }
    if config.lambda_distill > 0.0 && teacher.is_none() {
        return Err(Error::Config(
            "lambda_distill > 0 requires a trained teacher".into(),
        ));
    }
    let dims = config.model_dims(embedding.nrows());
    let mut params = ConRATParams::init(dims, embedding, config.seed)?;
    let shapes: Vec<(usize, usize)> = params.visit().iter().map(|(_, a)| a.dim()).collect();
    let mut adam = Adam::new(config.learning_rate, config.weight_decay, &shapes);
    let weights = config.loss_weights();

    let fixed_on: Option<Vec<f64>> = config
        .selector_fixed
        .then(|| vec![1.0; config.num_concepts]);
    let teacher_probs: Option<Vec<f64>> = match (teacher, config.lambda_distill > 0.0) {
        (Some(t), true) => {
            let docs: Vec<Vec<usize>> = train_docs.iter().map(|(d, _)| d.clone()).collect();
            Some(teacher_predict(t, &docs, config.batch_size)?)
        }
        _ => None,
    };

    let mut best: Option<(usize, f64, ConRATParams)> = None;
    let mut history = Vec::with_capacity(config.max_epochs);
    for epoch in 0..config.max_epochs {
        let started = std::time::Instant::now();
        let order = shuffled_indices(train_docs.len(), config.seed, epoch as u64);
        let mut sums = LossParts::default();
        let mut total_sum = 0.0;
        let mut batches = 0.0f64;
        for (batch_ix, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = BatchInput::new(
                chunk.iter().map(|&i| train_docs[i].0.clone()).collect(),
                chunk.iter().map(|&i| train_docs[i].1).collect(),
            )?;
            let batch_teacher: Option<Vec<f64>> = teacher_probs
                .as_ref()
                .map(|tp| chunk.iter().map(|&i| tp[i]).collect());
            let opts = ForwardOptions {
                mode: Mode::Train {
                    seed: config.seed,
                    epoch: epoch as u64,
                    batch: batch_ix as u64,
                },
                weights,
                gen_temp: config.gumbel_temp_generator,
                presence_temp: config.gumbel_temp_selector,
                dropout: config.dropout,
                teacher_probs: batch_teacher.as_deref(),
                force_presence: fixed_on.as_deref(),
            };
            let r = forward(&params, &batch, &opts)?;
            sums.pred += r.parts.pred;
            sums.overlap += r.parts.overlap;
            sums.diversity += r.parts.diversity;
            sums.distill += r.parts.distill;
            total_sum += r.parts.total(&weights);
            batches += 1.0;

            let grads = r.graph.backward(r.total)?;
            let grad_arrays: Vec<Array2<f64>> = params
                .visit()
                .iter()
                .zip(&r.param_nodes)
                .map(|((_, a), &node)| grads.get_or_zeros(node, a.dim()))
                .collect();
            let mut slots = params.visit_mut();
            let mut refs: Vec<&mut Array2<f64>> =
                slots.iter_mut().map(|(_, a)| &mut **a).collect();
            adam.step(&mut refs, &grad_arrays)?;
            drop(slots);
            params.embedding.row_mut(0).fill(0.0);
        }

        let dev_accuracy =
            model_accuracy_forced(&params, dev_docs, config.batch_size, fixed_on.as_deref())?;
        let n = batches.max(1.0);
        let metrics = EpochMetrics {
            epoch,
            train_loss: total_sum / n,
            pred: sums.pred / n,
            overlap: sums.overlap / n,
            diversity: sums.diversity / n,
            distill: sums.distill / n,
            dev_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(cb) = progress.as_mut() {
            cb(&metrics);
        }
        history.push(metrics);
        let better = match &best {
            Some((_, acc, _)) => dev_accuracy > *acc,
            None => true,
        };
        if better {
            best = Some((epoch, dev_accuracy, params.clone()));
        }
    }
    let (best_epoch, best_dev_accuracy, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_dev_accuracy,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::embeddings::random_embeddings;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::data::vocab::Vocabulary;

    fn synthetic_split(
        n: usize,
        aspects: usize,
        seed: u64,
    ) -> (Vec<(Vec<usize>, usize)>, Vec<(Vec<usize>, usize)>, Vocabulary) {
        let cfg = SyntheticConfig {
            num_docs: n,
            num_aspects: aspects,
            chunk_len: 4,
            max_len: 36,
            seed,
            ..SyntheticConfig::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        let vocab = Vocabulary::build(docs.iter().map(|d| d.tokens.as_slice()), 12);
        let data: Vec<(Vec<usize>, usize)> = docs
            .iter()
            .map(|d| (vocab.encode(&d.tokens), d.label as usize))
            .collect();
        let cut = n * 4 / 5;
        let (train, dev) = data.split_at(cut);
        (train.to_vec(), dev.to_vec(), vocab)
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.005,
            batch_size: 32,
            hidden_size: 10,
            embedding_dim: 12,
            lambda_overlap: 0.05,
            lambda_div: 0.05,
            lambda_distill: 0.0,
            dropout: 0.0,
            weight_decay: 0.0,
            num_concepts: 2,
            chunk_len: 4,
            max_epochs: 3,
            seed,
            ..TrainConfig::default()
        }
    }

    fn eval_pred_loss(
        params: &ConRATParams,
        docs: &[(Vec<usize>, usize)],
        batch_size: usize,
    ) -> f64 {
        let mut sum = 0.0;
        let mut batches = 0.0;
        for chunk in docs.chunks(batch_size) {
            let batch = BatchInput::new(
                chunk.iter().map(|(d, _)| d.clone()).collect(),
                chunk.iter().map(|(_, l)| *l).collect(),
            )
            .unwrap();
            let r = forward(params, &batch, &ForwardOptions::default()).unwrap();
            sum += r.parts.pred;
            batches += 1.0;
        }
        sum / batches
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (train_docs, dev_docs, vocab) = synthetic_split(150, 2, 11);
        let mut cfg = small_config(3);
        cfg.max_epochs = 12;
        cfg.learning_rate = 0.01;
        let emb = random_embeddings(&vocab, 3);
        let init =
            ConRATParams::init(cfg.model_dims(emb.nrows()), emb.clone(), cfg.seed).unwrap();
        let before = eval_pred_loss(&init, &train_docs, cfg.batch_size);

        let a = train(&cfg, &train_docs, &dev_docs, emb.clone(), None, None).unwrap();
        let after = eval_pred_loss(&a.params, &train_docs, cfg.batch_size);
        assert!(
            after < before,
            "eval loss did not drop: {before} -> {after}, history {:?}",
            a.history.iter().map(|m| m.pred).collect::<Vec<_>>()
        );
        assert!(a.best_dev_accuracy >= 0.5);
        assert_eq!(a.history.len(), 12);

        let b = train(&cfg, &train_docs, &dev_docs, emb, None, None).unwrap();
        assert_eq!(a.best_epoch, b.best_epoch);
        for (pa, pb) in a.params.visit().iter().zip(b.params.visit().iter()) {
            assert_eq!(pa.1, pb.1, "{} diverged between runs", pa.0);
        }
    }

    #[test]
    fn distillation_requires_a_teacher() {
        let (train_docs, dev_docs, vocab) = synthetic_split(40, 2, 12);
        let mut cfg = small_config(4);
        cfg.lambda_distill = 0.5;
        let emb = random_embeddings(&vocab, 4);
        assert!(train(&cfg, &train_docs, &dev_docs, emb, None, None).is_err());
    }

    #[test]
    fn progress_callback_sees_every_epoch() {
        let (train_docs, dev_docs, vocab) = synthetic_split(60, 2, 13);
        let cfg = small_config(5);
        let emb = random_embeddings(&vocab, 5);
        let mut seen = Vec::new();
        let mut cb = |m: &EpochMetrics| seen.push(m.epoch);
        train(&cfg, &train_docs, &dev_docs, emb, None, Some(&mut cb)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
    }
}

//! Full-input teacher classifier for distillation: embed, one bidirectional
//! GRU, linear head. Trained on the document label, then frozen; its
//! positive-class probabilities supervise the concept model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::encoder::{bigru, BiGruNodes};
use crate::model::forward::BatchInput;
use crate::model::{BiGruParams, GruParams, LEAKY_SLOPE};
use crate::rng::{rng_for, Stream};
use crate::training::optimizer::Adam;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    /// V x D, row 0 (pad) all zeros.
    pub embedding: Array2<f64>,
    pub rnn: BiGruParams,
    /// 2H x 2 and 1 x 2.
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub hidden: usize,
}

fn xavier(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    use rand::Rng;
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 * limit - limit)
}

fn gru_init(rng: &mut rand_chacha::ChaCha8Rng, input: usize, hidden: usize) -> GruParams {
    GruParams {
        wx: xavier(rng, input, 3 * hidden),
        wh: xavier(rng, hidden, 3 * hidden),
        bx: Array2::zeros((1, 3 * hidden)),
        bh: Array2::zeros((1, 3 * hidden)),
    }
}

impl TeacherParams {
    pub fn init(mut embedding: Array2<f64>, hidden: usize, seed: u64) -> Result<Self> {
        if embedding.nrows() < 2 || embedding.ncols() == 0 || hidden == 0 {
            return Err(Error::InvalidParameter(
                "teacher needs a non-trivial embedding table and hidden size".into(),
            ));
        }
        embedding.row_mut(0).fill(0.0);
        let d = embedding.ncols();
        let mut rng = rng_for(seed, Stream::ParamInit);
        let rnn = BiGruParams {
            fwd: gru_init(&mut rng, d, hidden),
            bwd: gru_init(&mut rng, d, hidden),
        };
        let out_w = xavier(&mut rng, 2 * hidden, 2);
        let out_b = Array2::zeros((1, 2));
        Ok(TeacherParams {
            embedding,
            rnn,
            out_w,
            out_b,
            hidden,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn visit(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("embedding", &self.embedding),
            ("rnn.fwd.wx", &self.rnn.fwd.wx),
            ("rnn.fwd.wh", &self.rnn.fwd.wh),
            ("rnn.fwd.bx", &self.rnn.fwd.bx),
            ("rnn.fwd.bh", &self.rnn.fwd.bh),
            ("rnn.bwd.wx", &self.rnn.bwd.wx),
            ("rnn.bwd.wh", &self.rnn.bwd.wh),
            ("rnn.bwd.bx", &self.rnn.bwd.bx),
            ("rnn.bwd.bh", &self.rnn.bwd.bh),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
        ]
    }

    pub fn visit_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        vec![
            ("embedding", &mut self.embedding),
            ("rnn.fwd.wx", &mut self.rnn.fwd.wx),
            ("rnn.fwd.wh", &mut self.rnn.fwd.wh),
            ("rnn.fwd.bx", &mut self.rnn.fwd.bx),
            ("rnn.fwd.bh", &mut self.rnn.fwd.bh),
            ("rnn.bwd.wx", &mut self.rnn.bwd.wx),
            ("rnn.bwd.wh", &mut self.rnn.bwd.wh),
            ("rnn.bwd.bx", &mut self.rnn.bwd.bx),
            ("rnn.bwd.bh", &mut self.rnn.bwd.bh),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ]
    }
}

struct TeacherPass {
    graph: Graph,
    log_probs: NodeId,
    loss: NodeId,
    param_nodes: Vec<NodeId>,
}

/// Dropout mask on the summary activation, train mode only.
enum TeacherMode {
    Train { seed: u64, epoch: u64, batch: u64, dropout: f64 },
    Eval,
}

fn teacher_forward(p: &TeacherParams, batch: &BatchInput, mode: &TeacherMode) -> Result<TeacherPass> {
    for doc in &batch.docs {
        if let Some(&bad) = doc.iter().find(|&&id| id >= p.vocab()) {
            return Err(Error::Bounds {
                what: "token id",
                value: bad,
                min: 0,
                max: p.vocab() - 1,
            });
        }
    }
    let mut g = Graph::new();
    let embedding = g.leaf(p.embedding.clone());
    let rnn = BiGruNodes::leaf(&mut g, &p.rnn);
    let out_w = g.leaf(p.out_w.clone());
    let out_b = g.leaf(p.out_b.clone());
    let param_nodes = vec![
        embedding,
        rnn.fwd.wx,
        rnn.fwd.wh,
        rnn.fwd.bx,
        rnn.fwd.bh,
        rnn.bwd.wx,
        rnn.bwd.wh,
        rnn.bwd.bx,
        rnn.bwd.bh,
        out_w,
        out_b,
    ];

    let t_max = batch.t_max;
    let xs: Vec<NodeId> = (0..t_max)
        .map(|t| {
            let ids: Vec<usize> = batch
                .docs
                .iter()
                .map(|d| d.get(t).copied().unwrap_or(0))
                .collect();
            g.gather_rows(embedding, &ids)
        })
        .collect();
    let pads: Vec<Array2<f64>> = (0..t_max)
        .map(|t| {
            Array2::from_shape_fn((batch.len(), 1), |(b, _)| {
                if t < batch.docs[b].len() {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    let out = bigru(&mut g, &rnn, &xs, &pads, batch.len(), p.hidden);
    let summary = out.summary(&mut g);
    let mut act = g.leaky_relu(summary, LEAKY_SLOPE);
    if let TeacherMode::Train {
        seed,
        epoch,
        batch: batch_ix,
        dropout,
    } = mode
    {
        if *dropout > 0.0 {
            use rand::Rng;
            let mut rng = rng_for(
                *seed,
                Stream::Dropout {
                    epoch: *epoch,
                    batch: *batch_ix,
                },
            );
            let mask = Array2::from_shape_fn((batch.len(), 2 * p.hidden), |_| {
                if rng.random::<f64>() < *dropout {
                    0.0
                } else {
                    1.0 / (1.0 - dropout)
                }
            });
            let mask_node = g.leaf(mask);
            act = g.mul(act, mask_node);
        }
    }
    let proj = g.matmul(act, out_w);
    let logits = g.add(proj, out_b);
    let log_probs = g.log_softmax_rows(logits);
    let loss = g.nll_mean(log_probs, &batch.labels);
    Ok(TeacherPass {
        graph: g,
        log_probs,
        loss,
        param_nodes,
    })
}

/// Positive-class probability per document, batched.
pub fn teacher_predict(p: &TeacherParams, docs: &[Vec<usize>], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(batch_size.max(1)) {
        let batch = BatchInput::new(chunk.to_vec(), vec![0; chunk.len()])?;
        let pass = teacher_forward(p, &batch, &TeacherMode::Eval)?;
        let lp = pass.graph.value(pass.log_probs);
        for b in 0..chunk.len() {
            out.push(lp[(b, 1)].exp());
        }
    }
    Ok(out)
}

/// Accuracy of the argmax class, batched.
pub fn teacher_accuracy(
    p: &TeacherParams,
    docs: &[(Vec<usize>, usize)],
    batch_size: usize,
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
        let pass = teacher_forward(p, &batch, &TeacherMode::Eval)?;
        let lp = pass.graph.value(pass.log_probs);
        for (b, (_, label)) in chunk.iter().enumerate() {
            let pred = usize::from(lp[(b, 1)] > lp[(b, 0)]);
            correct += usize::from(pred == *label);
        }
    }
    Ok(correct as f64 / docs.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

pub struct TeacherOutcome {
    pub params: TeacherParams,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub history: Vec<TeacherEpoch>,
}

/// Train the teacher with Adam and keep the epoch with the best dev accuracy
/// (earliest on ties).
pub fn train_teacher(
    config: &TrainConfig,
    train: &[(Vec<usize>, usize)],
    dev: &[(Vec<usize>, usize)],
    embedding: Array2<f64>,
    mut progress: Option<&mut dyn FnMut(&TeacherEpoch)>,
) -> Result<TeacherOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("teacher training needs train and dev splits".into()));
    }
    let mut params = TeacherParams::init(embedding, config.hidden_size, config.seed)?;
    let shapes: Vec<(usize, usize)> = params.visit().iter().map(|(_, a)| a.dim()).collect();
    let mut adam = Adam::new(config.learning_rate, config.weight_decay, &shapes);

    let mut best: Option<(usize, f64, TeacherParams)> = None;
    let mut history = Vec::with_capacity(config.max_epochs);
    for epoch in 0..config.max_epochs {
        let order = shuffled_indices(train.len(), config.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for (batch_ix, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = BatchInput::new(
                chunk.iter().map(|&i| train[i].0.clone()).collect(),
                chunk.iter().map(|&i| train[i].1).collect(),
            )?;
            let mode = TeacherMode::Train {
                seed: config.seed,
                epoch: epoch as u64,
                batch: batch_ix as u64,
                dropout: config.dropout,
            };
            let pass = teacher_forward(&params, &batch, &mode)?;
            let loss = pass.graph.scalar(pass.loss);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_ix,
                    loss,
                });
            }
            epoch_loss += loss;
            batches += 1.0;
            let grads = pass.graph.backward(pass.loss)?;
            let grad_arrays: Vec<Array2<f64>> = params
                .visit()
                .iter()
                .zip(&pass.param_nodes)
                .map(|((_, a), &node)| grads.get_or_zeros(node, a.dim()))
                .collect();
            let mut slots = params.visit_mut();
            let mut refs: Vec<&mut Array2<f64>> =
                slots.iter_mut().map(|(_, a)| &mut **a).collect();
            adam.step(&mut refs, &grad_arrays)?;
            drop(slots);
            params.embedding.row_mut(0).fill(0.0);
        }
        let dev_accuracy = teacher_accuracy(&params, dev, config.batch_size)?;
        let metrics = TeacherEpoch {
            epoch,
            train_loss: epoch_loss / batches.max(1.0),
            dev_accuracy,
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
    Ok(TeacherOutcome {
        params,
        best_epoch,
        best_dev_accuracy,
        history,
    })
}

/// Fisher-Yates permutation of `0..n` from the epoch's shuffle stream.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = rng_for(seed, Stream::Shuffle(epoch));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

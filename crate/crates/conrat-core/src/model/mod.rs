//! The concept model: generator, selector, predictor, and their parameters.
//!
//! One embedding table feeds two bidirectional GRU encoders. The generator
//! encoder scores start positions per concept; the selector reuses the
//! generator encodings for attention pooling and presence gating; the
//! predictor encodes each gated concept separately and projects to class
//! logits with one shared head.

pub mod encoder;
pub mod forward;
pub mod losses;
pub mod rnp;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::rng::{rng_for, Stream};

/// Widths and map count of the optional pre-attention convolution features.
pub const CNN_WIDTHS: [usize; 3] = [3, 5, 7];
pub const CNN_MAPS: usize = 50;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    /// Per-direction recurrent hidden size.
    pub hidden: usize,
    pub num_concepts: usize,
    pub chunk_len: usize,
    /// Convolutional feature layer in front of the selector attention.
    pub selector_cnn: bool,
}

impl ModelDims {
    /// Width of the encoder output per token.
    pub fn enc_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Width of the token representation the selector attends over.
    pub fn feat_dim(&self) -> usize {
        self.enc_dim() + if self.selector_cnn { CNN_WIDTHS.len() * CNN_MAPS } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.embed == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter(
                "vocab, embedding and hidden sizes must be positive".into(),
            ));
        }
        if self.num_concepts == 0 || self.chunk_len == 0 {
            return Err(Error::InvalidParameter(
                "concept count and chunk length must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One direction of a GRU. Gate layout reset | update | candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub wx: Array2<f64>,
    pub wh: Array2<f64>,
    pub bx: Array2<f64>,
    pub bh: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiGruParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

/// One convolution per width: weight (width*D x maps), bias (1 x maps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConRATParams {
    pub dims: ModelDims,
    /// V x D, row 0 (pad) all zeros.
    pub embedding: Array2<f64>,
    pub gen_rnn: BiGruParams,
    /// Position-score head: enc_dim x K and 1 x K.
    pub pos_w: Array2<f64>,
    pub pos_b: Array2<f64>,
    /// Shared attention scorer: feat_dim x hidden, hidden x 1.
    pub attn_w: Array2<f64>,
    pub attn_v: Array2<f64>,
    pub cnn: Option<CnnParams>,
    /// Per-concept presence gates: feat_dim x K and 1 x K.
    pub gate_w: Array2<f64>,
    pub gate_b: Array2<f64>,
    pub pred_rnn: BiGruParams,
    /// Shared class head: enc_dim x 2 and 1 x 2.
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    /// Aggregation weights, 1 x K, initialized to 1/K.
    pub alpha: Array2<f64>,
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

impl ConRATParams {
    /// Initialize all trainable parameters from the run seed. The embedding
    /// table is supplied by the caller (loaded or random) and its pad row is
    /// forced to zero.
    pub fn init(dims: ModelDims, mut embedding: Array2<f64>, seed: u64) -> Result<Self> {
        dims.validate()?;
        if embedding.dim() != (dims.vocab, dims.embed) {
            return Err(Error::Shape(format!(
                "embedding table {:?} does not match dims ({}, {})",
                embedding.dim(),
                dims.vocab,
                dims.embed
            )));
        }
        embedding.row_mut(0).fill(0.0);
        let mut rng = rng_for(seed, Stream::ParamInit);
        let (d, h, k) = (dims.embed, dims.hidden, dims.num_concepts);
        let gen_rnn = BiGruParams {
            fwd: gru_init(&mut rng, d, h),
            bwd: gru_init(&mut rng, d, h),
        };
        // Zero position head: every concept starts with a uniform start
        // distribution, so early windows are chosen by content gradient and
        // concept symmetry is broken by sampling alone.
        let pos_w = Array2::zeros((dims.enc_dim(), k));
        let pos_b = Array2::zeros((1, k));
        let cnn = if dims.selector_cnn {
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for w in CNN_WIDTHS {
                weights.push(xavier(&mut rng, w * d, CNN_MAPS));
                biases.push(Array2::zeros((1, CNN_MAPS)));
            }
            Some(CnnParams { weights, biases })
        } else {
            None
        };
        let attn_w = xavier(&mut rng, dims.feat_dim(), h);
        let attn_v = xavier(&mut rng, h, 1);
        let gate_w = xavier(&mut rng, dims.feat_dim(), k);
        // Gates open at init (sigma(2) ~ 0.88): every concept's predictor sees
        // real input early, so presence can only close on evidence rather
        // than starving a concept before it learns.
        let gate_b = Array2::from_elem((1, k), 2.0);
        let pred_rnn = BiGruParams {
            fwd: gru_init(&mut rng, d, h),
            bwd: gru_init(&mut rng, d, h),
        };
        let out_w = xavier(&mut rng, dims.enc_dim(), 2);
        let out_b = Array2::zeros((1, 2));
        let alpha = Array2::from_elem((1, k), 1.0 / k as f64);
        Ok(ConRATParams {
            dims,
            embedding,
            gen_rnn,
            pos_w,
            pos_b,
            attn_w,
            attn_v,
            cnn,
            gate_w,
            gate_b,
            pred_rnn,
            out_w,
            out_b,
            alpha,
        })
    }

    /// All parameter arrays in a fixed canonical order, with names. The order
    /// is a compatibility contract for optimizer state and checkpoints.
    pub fn visit(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let mut out: Vec<(&'static str, &Array2<f64>)> = vec![
            ("embedding", &self.embedding),
            ("gen_rnn.fwd.wx", &self.gen_rnn.fwd.wx),
            ("gen_rnn.fwd.wh", &self.gen_rnn.fwd.wh),
            ("gen_rnn.fwd.bx", &self.gen_rnn.fwd.bx),
            ("gen_rnn.fwd.bh", &self.gen_rnn.fwd.bh),
            ("gen_rnn.bwd.wx", &self.gen_rnn.bwd.wx),
            ("gen_rnn.bwd.wh", &self.gen_rnn.bwd.wh),
            ("gen_rnn.bwd.bx", &self.gen_rnn.bwd.bx),
            ("gen_rnn.bwd.bh", &self.gen_rnn.bwd.bh),
            ("pos_w", &self.pos_w),
            ("pos_b", &self.pos_b),
            ("attn_w", &self.attn_w),
            ("attn_v", &self.attn_v),
            ("gate_w", &self.gate_w),
            ("gate_b", &self.gate_b),
            ("pred_rnn.fwd.wx", &self.pred_rnn.fwd.wx),
            ("pred_rnn.fwd.wh", &self.pred_rnn.fwd.wh),
            ("pred_rnn.fwd.bx", &self.pred_rnn.fwd.bx),
            ("pred_rnn.fwd.bh", &self.pred_rnn.fwd.bh),
            ("pred_rnn.bwd.wx", &self.pred_rnn.bwd.wx),
            ("pred_rnn.bwd.wh", &self.pred_rnn.bwd.wh),
            ("pred_rnn.bwd.bx", &self.pred_rnn.bwd.bx),
            ("pred_rnn.bwd.bh", &self.pred_rnn.bwd.bh),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
            ("alpha", &self.alpha),
        ];
        if let Some(cnn) = &self.cnn {
            for (i, w) in cnn.weights.iter().enumerate() {
                out.push((CNN_WEIGHT_NAMES[i], w));
            }
            for (i, b) in cnn.biases.iter().enumerate() {
                out.push((CNN_BIAS_NAMES[i], b));
            }
        }
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        let mut out: Vec<(&'static str, &mut Array2<f64>)> = vec![
            ("embedding", &mut self.embedding),
            ("gen_rnn.fwd.wx", &mut self.gen_rnn.fwd.wx),
            ("gen_rnn.fwd.wh", &mut self.gen_rnn.fwd.wh),
            ("gen_rnn.fwd.bx", &mut self.gen_rnn.fwd.bx),
            ("gen_rnn.fwd.bh", &mut self.gen_rnn.fwd.bh),
            ("gen_rnn.bwd.wx", &mut self.gen_rnn.bwd.wx),
            ("gen_rnn.bwd.wh", &mut self.gen_rnn.bwd.wh),
            ("gen_rnn.bwd.bx", &mut self.gen_rnn.bwd.bx),
            ("gen_rnn.bwd.bh", &mut self.gen_rnn.bwd.bh),
            ("pos_w", &mut self.pos_w),
            ("pos_b", &mut self.pos_b),
            ("attn_w", &mut self.attn_w),
            ("attn_v", &mut self.attn_v),
            ("gate_w", &mut self.gate_w),
            ("gate_b", &mut self.gate_b),
            ("pred_rnn.fwd.wx", &mut self.pred_rnn.fwd.wx),
            ("pred_rnn.fwd.wh", &mut self.pred_rnn.fwd.wh),
            ("pred_rnn.fwd.bx", &mut self.pred_rnn.fwd.bx),
            ("pred_rnn.fwd.bh", &mut self.pred_rnn.fwd.bh),
            ("pred_rnn.bwd.wx", &mut self.pred_rnn.bwd.wx),
            ("pred_rnn.bwd.wh", &mut self.pred_rnn.bwd.wh),
            ("pred_rnn.bwd.bx", &mut self.pred_rnn.bwd.bx),
            ("pred_rnn.bwd.bh", &mut self.pred_rnn.bwd.bh),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
            ("alpha", &mut self.alpha),
        ];
        if let Some(cnn) = &mut self.cnn {
            for (i, w) in cnn.weights.iter_mut().enumerate() {
                out.push((CNN_WEIGHT_NAMES[i], w));
            }
            for (i, b) in cnn.biases.iter_mut().enumerate() {
                out.push((CNN_BIAS_NAMES[i], b));
            }
        }
        out
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.visit().iter().map(|(_, a)| a.len()).sum()
    }
}

const CNN_WEIGHT_NAMES: [&str; 3] = ["cnn.w3", "cnn.w5", "cnn.w7"];
const CNN_BIAS_NAMES: [&str; 3] = ["cnn.b3", "cnn.b5", "cnn.b7"];

/// Regularizer and distillation weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub overlap: f64,
    pub diversity: f64,
    pub distill: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.overlap < 0.0 || self.diversity < 0.0 || self.distill < 0.0 {
            return Err(Error::InvalidParameter(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            overlap: 0.05,
            diversity: 0.05,
            distill: 0.5,
        }
    }
}

/// Additive loss components, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pred: f64,
    pub overlap: f64,
    pub diversity: f64,
    pub distill: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.pred + w.overlap * self.overlap + w.diversity * self.diversity
            + w.distill * self.distill
    }
}

/// Full forward result for one document.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Class log-probabilities, length 2.
    pub log_probs: [f64; 2],
    /// Per-concept class logits, K x 2.
    pub concept_logits: Array2<f64>,
    /// Presence score per concept, K x 1.
    pub presence: Array2<f64>,
    pub masks: MaskSet,
    /// Attention-pooled representation per concept, K x feat_dim. Zero rows
    /// for concepts whose mask covers nothing. Filled by the selector; the
    /// predictor-only entry point leaves it zero.
    pub concept_reps: Array2<f64>,
    pub loss: LossParts,
}

impl ModelOutput {
    pub fn predicted_class(&self) -> u8 {
        if self.log_probs[1] > self.log_probs[0] {
            1
        } else {
            0
        }
    }

    /// Positive-class probability.
    pub fn prob_positive(&self) -> f64 {
        self.log_probs[1].exp()
    }
}

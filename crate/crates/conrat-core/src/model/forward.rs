//! Forward graph construction: batch assembly, the training/eval pass, the
//! fixed-sample pass, and the per-document entry points.
//!
//! One implementation builds the tape for every path; values fall out of
//! construction, gradients out of [`Graph::backward`]. Batched evaluation and
//! single-document evaluation produce bit-identical numbers: pad steps carry
//! hidden states through unchanged and pad positions never enter a softmax
//! support.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::data::vocab::PAD;
use crate::error::{Error, Result};
use crate::masking::{
    self, argmax_row, build_masks, gumbel_noise, logistic_noise, MaskSet, SampleMode,
};
use crate::model::encoder::{attention_pool, attention_scores, bigru, BiGruNodes, BiGruOut};
use crate::model::{
    losses, ConRATParams, LossParts, LossWeights, ModelOutput, CNN_WIDTHS, LEAKY_SLOPE,
};
use crate::rng::{rng_for, Stream};

/// Sampling regime for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Stochastic pass with straight-through masks and relaxed presence.
    /// Noise streams are derived from `(seed, epoch, batch)`, so replaying a
    /// batch replays its noise.
    Train { seed: u64, epoch: u64, batch: u64 },
    /// Deterministic pass: argmax starts, thresholded presence, no dropout.
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub weights: LossWeights,
    /// Temperature of the start relaxation.
    pub gen_temp: f64,
    /// Temperature of the presence relaxation.
    pub presence_temp: f64,
    /// Dropout rate on the predictor activation; train mode only.
    pub dropout: f64,
    /// Teacher positive-class probability per document, for distillation.
    pub teacher_probs: Option<&'a [f64]>,
    /// Per-concept presence values replacing the selector output, one per
    /// concept, applied to every document in the batch.
    pub force_presence: Option<&'a [f64]>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            weights: LossWeights::default(),
            gen_temp: 1.0,
            presence_temp: 1.0,
            dropout: 0.0,
            teacher_probs: None,
            force_presence: None,
        }
    }
}

/// One padded batch of encoded documents.
#[derive(Debug, Clone)]
pub struct BatchInput {
    /// Token ids per document, unpadded.
    pub docs: Vec<Vec<usize>>,
    /// Class per document, each 0 or 1.
    pub labels: Vec<usize>,
    pub t_max: usize,
}

impl BatchInput {
    pub fn new(docs: Vec<Vec<usize>>, labels: Vec<usize>) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::DegenerateInput("empty batch".into()));
        }
        if docs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "batch has {} documents but {} labels",
                docs.len(),
                labels.len()
            )));
        }
        if let Some(i) = docs.iter().position(Vec::is_empty) {
            return Err(Error::DegenerateInput(format!(
                "document {i} in batch has no tokens"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Bounds {
                what: "label",
                value: bad,
                min: 0,
                max: 1,
            });
        }
        let t_max = docs.iter().map(Vec::len).max().unwrap();
        Ok(BatchInput { docs, labels, t_max })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn valid_len(&self, b: usize) -> usize {
        self.docs[b].len()
    }

    /// Token ids at position `t`, padded with the pad id.
    fn column(&self, t: usize) -> Vec<usize> {
        self.docs
            .iter()
            .map(|d| d.get(t).copied().unwrap_or(PAD))
            .collect()
    }

    /// Bx1 real-token indicator at position `t`.
    fn pad_keep(&self, t: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.docs.len(), 1), |(b, _)| {
            if t < self.docs[b].len() {
                1.0
            } else {
                0.0
            }
        })
    }

    /// BxT indicator of real positions.
    fn support(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.docs.len(), self.t_max), |(b, t)| {
            if t < self.docs[b].len() {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Parameter leaf ids, in the canonical visit order.
struct ParamNodes {
    embedding: NodeId,
    gen: BiGruNodes,
    pos_w: NodeId,
    pos_b: NodeId,
    attn_w: NodeId,
    attn_v: NodeId,
    gate_w: NodeId,
    gate_b: NodeId,
    pred: BiGruNodes,
    out_w: NodeId,
    out_b: NodeId,
    alpha: NodeId,
    cnn_w: Vec<NodeId>,
    cnn_b: Vec<NodeId>,
}

impl ParamNodes {
    /// Attach every parameter as a leaf. The returned flat list mirrors
    /// [`ConRATParams::visit`] position by position.
    fn attach(g: &mut Graph, p: &ConRATParams) -> (ParamNodes, Vec<NodeId>) {
        let embedding = g.leaf(p.embedding.clone());
        let gen = BiGruNodes::leaf(g, &p.gen_rnn);
        let pos_w = g.leaf(p.pos_w.clone());
        let pos_b = g.leaf(p.pos_b.clone());
        let attn_w = g.leaf(p.attn_w.clone());
        let attn_v = g.leaf(p.attn_v.clone());
        let gate_w = g.leaf(p.gate_w.clone());
        let gate_b = g.leaf(p.gate_b.clone());
        let pred = BiGruNodes::leaf(g, &p.pred_rnn);
        let out_w = g.leaf(p.out_w.clone());
        let out_b = g.leaf(p.out_b.clone());
        let alpha = g.leaf(p.alpha.clone());
        let (mut cnn_w, mut cnn_b) = (Vec::new(), Vec::new());
        if let Some(cnn) = &p.cnn {
            for w in &cnn.weights {
                cnn_w.push(g.leaf(w.clone()));
            }
            for b in &cnn.biases {
                cnn_b.push(g.leaf(b.clone()));
            }
        }
        let nodes = ParamNodes {
            embedding,
            gen,
            pos_w,
            pos_b,
            attn_w,
            attn_v,
            gate_w,
            gate_b,
            pred,
            out_w,
            out_b,
            alpha,
            cnn_w: cnn_w.clone(),
            cnn_b: cnn_b.clone(),
        };
        let mut flat = vec![
            embedding,
            gen.fwd.wx,
            gen.fwd.wh,
            gen.fwd.bx,
            gen.fwd.bh,
            gen.bwd.wx,
            gen.bwd.wh,
            gen.bwd.bx,
            gen.bwd.bh,
            pos_w,
            pos_b,
            attn_w,
            attn_v,
            gate_w,
            gate_b,
            pred.fwd.wx,
            pred.fwd.wh,
            pred.fwd.bx,
            pred.fwd.bh,
            pred.bwd.wx,
            pred.bwd.wh,
            pred.bwd.bx,
            pred.bwd.bh,
            out_w,
            out_b,
            alpha,
        ];
        flat.extend(cnn_w);
        flat.extend(cnn_b);
        (nodes, flat)
    }
}

/// A completed forward pass over one batch. Holds the tape, so gradients can
/// still be pulled from it, plus the node ids needed to read them out.
pub struct ForwardResult {
    pub graph: Graph,
    /// Total weighted loss node.
    pub total: NodeId,
    /// Parameter leaves, aligned with [`ConRATParams::visit`].
    pub param_nodes: Vec<NodeId>,
    /// B x 2 class log-probabilities.
    pub log_probs: NodeId,
    /// Per concept: B x 2 class logits.
    pub concept_logits: Vec<NodeId>,
    /// Per concept: B x 1 presence score.
    pub presence: Vec<NodeId>,
    /// Per concept: B x feat_dim pooled representation.
    pub concept_reps: Vec<NodeId>,
    /// Per document: hard concept masks over its own length.
    pub masks: Vec<MaskSet>,
    /// Batch-mean loss components.
    pub parts: LossParts,
    labels: Vec<usize>,
    teacher_probs: Option<Vec<f64>>,
}

impl ForwardResult {
    /// Assemble the per-document view of the pass.
    pub fn doc_output(&self, b: usize) -> ModelOutput {
        let g = &self.graph;
        let k = self.concept_logits.len();
        let feat = g.value(self.concept_reps[0]).ncols();
        let lp = g.value(self.log_probs);
        let log_probs = [lp[(b, 0)], lp[(b, 1)]];
        let mut concept_logits = Array2::zeros((k, 2));
        let mut presence = Array2::zeros((k, 1));
        let mut concept_reps = Array2::zeros((k, feat));
        for i in 0..k {
            let pl = g.value(self.concept_logits[i]);
            concept_logits[(i, 0)] = pl[(b, 0)];
            concept_logits[(i, 1)] = pl[(b, 1)];
            presence[(i, 0)] = g.value(self.presence[i])[(b, 0)];
            concept_reps
                .row_mut(i)
                .assign(&g.value(self.concept_reps[i]).row(b));
        }
        let masks = self.masks[b].clone();
        let loss = LossParts {
            pred: -log_probs[self.labels[b]],
            overlap: losses::overlap_loss(&masks.masks, masks.ell),
            diversity: losses::diversity_loss(&concept_reps),
            distill: match &self.teacher_probs {
                Some(tp) => losses::distill_gap(tp[b], log_probs[1].exp()),
                None => 0.0,
            },
        };
        ModelOutput {
            log_probs,
            concept_logits,
            presence,
            masks,
            concept_reps,
            loss,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.masks.len()
    }
}

fn validate_common(params: &ConRATParams, batch: &BatchInput, weights: &LossWeights) -> Result<()> {
    params.dims.validate()?;
    weights.validate()?;
    for doc in &batch.docs {
        if let Some(&bad) = doc.iter().find(|&&id| id >= params.dims.vocab) {
            return Err(Error::Bounds {
                what: "token id",
                value: bad,
                min: 0,
                max: params.dims.vocab - 1,
            });
        }
    }
    Ok(())
}

fn validate_teacher(batch: &BatchInput, teacher: Option<&[f64]>) -> Result<()> {
    if let Some(tp) = teacher {
        if tp.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} teacher probabilities for {} documents",
                tp.len(),
                batch.len()
            )));
        }
        if tp.iter().any(|p| !(0.0..=1.0).contains(p) || !p.is_finite()) {
            return Err(Error::InvalidParameter(
                "teacher probabilities must lie in [0, 1]".into(),
            ));
        }
    }
    Ok(())
}

/// Shared front half of every pass: embed, encode, build selector features
/// and the shared attention scores.
struct Encoded {
    xs: Vec<NodeId>,
    pads: Vec<Array2<f64>>,
    gen: BiGruOut,
    feats: Vec<NodeId>,
    attn: NodeId,
}

fn encode(g: &mut Graph, pn: &ParamNodes, params: &ConRATParams, batch: &BatchInput) -> Encoded {
    let dims = &params.dims;
    let (bsz, t_max) = (batch.len(), batch.t_max);
    let xs: Vec<NodeId> = (0..t_max)
        .map(|t| g.gather_rows(pn.embedding, &batch.column(t)))
        .collect();
    let pads: Vec<Array2<f64>> = (0..t_max).map(|t| batch.pad_keep(t)).collect();
    let gen = bigru(g, &pn.gen, &xs, &pads, bsz, dims.hidden);
    let enc = gen.concat_steps(g);

    let feats: Vec<NodeId> = if dims.selector_cnn {
        let zero = g.leaf(Array2::zeros((bsz, dims.embed)));
        (0..t_max)
            .map(|t| {
                let mut widths = Vec::with_capacity(CNN_WIDTHS.len());
                for (wi, w) in CNN_WIDTHS.iter().enumerate() {
                    let half = (w - 1) / 2;
                    let parts: Vec<NodeId> = (0..*w)
                        .map(|off| {
                            let at = t as isize + off as isize - half as isize;
                            if at < 0 || at as usize >= t_max {
                                zero
                            } else {
                                xs[at as usize]
                            }
                        })
                        .collect();
                    let window = g.concat_cols(&parts);
                    let proj = g.matmul(window, pn.cnn_w[wi]);
                    let biased = g.add(proj, pn.cnn_b[wi]);
                    widths.push(g.relu(biased));
                }
                let cnn_t = g.concat_cols(&widths);
                g.concat_cols(&[enc[t], cnn_t])
            })
            .collect()
    } else {
        enc.clone()
    };
    let attn = attention_scores(g, &feats, pn.attn_w, pn.attn_v);
    Encoded {
        xs,
        pads,
        gen,
        feats,
        attn,
    }
}

/// Hard mask row block for concept `k` across the batch: ones on the chosen
/// window, clipped at each document's own end.
fn hard_block(starts: &[usize], ell: usize, batch: &BatchInput) -> Array2<f64> {
    let mut hard = Array2::zeros((batch.len(), batch.t_max));
    for (b, &s) in starts.iter().enumerate() {
        let end = (s + ell - 1).min(batch.valid_len(b) - 1);
        for t in s..=end {
            hard[(b, t)] = 1.0;
        }
    }
    hard
}

/// Selector + predictor + losses, once concept masks exist. `st` holds the
/// per-concept mask blocks as graph nodes (straight-through in train mode,
/// constants otherwise).
#[allow(clippy::too_many_arguments)]
fn finish_pass(
    g: &mut Graph,
    pn: &ParamNodes,
    params: &ConRATParams,
    batch: &BatchInput,
    enc: &Encoded,
    st: &[NodeId],
    presence_nodes: Vec<NodeId>,
    reps: Vec<NodeId>,
    opts: &ForwardOptions,
    masks: Vec<MaskSet>,
) -> Result<ForwardResult> {
    let dims = &params.dims;
    let k_total = dims.num_concepts;
    let ell = dims.chunk_len;

    // Predictor: per concept, re-encode embeddings gated by mask * presence.
    let mut concept_logits = Vec::with_capacity(k_total);
    let mut logits: Option<NodeId> = None;
    let mut dropout_rng = match opts.mode {
        Mode::Train { seed, epoch, batch } if opts.dropout > 0.0 => {
            Some(rng_for(seed, Stream::Dropout { epoch, batch }))
        }
        _ => None,
    };
    for k in 0..k_total {
        let gated: Vec<NodeId> = (0..batch.t_max)
            .map(|t| {
                let m_t = g.slice_cols(st[k], t, t + 1);
                let coef = g.mul(m_t, presence_nodes[k]);
                g.mul_col(enc.xs[t], coef)
            })
            .collect();
        let out = bigru(g, &pn.pred, &gated, &enc.pads, batch.len(), dims.hidden);
        let summary = out.summary(g);
        let mut act = g.leaky_relu(summary, LEAKY_SLOPE);
        if let Some(rng) = dropout_rng.as_mut() {
            use rand::Rng;
            let p = opts.dropout;
            let mask = Array2::from_shape_fn((batch.len(), dims.enc_dim()), |_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            });
            let mask_node = g.leaf(mask);
            act = g.mul(act, mask_node);
        }
        let proj = g.matmul(act, pn.out_w);
        let p_k = g.add(proj, pn.out_b);
        concept_logits.push(p_k);

        let weighted = g.mul_col(p_k, presence_nodes[k]);
        let alpha_k = g.slice_cols(pn.alpha, k, k + 1);
        let term = g.scale_by(weighted, alpha_k);
        logits = Some(match logits {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let logits = logits.expect("at least one concept");
    let log_probs = g.log_softmax_rows(logits);
    let pred_loss = g.nll_mean(log_probs, &batch.labels);

    // Overlap penalty on the mask node values (hard forward, surrogate grad).
    let mut overlap_acc: Option<NodeId> = None;
    for k1 in 0..k_total {
        for k2 in k1..k_total {
            let prod = g.mul(st[k1], st[k2]);
            let inner = g.sum_rows(prod);
            let dev = if k1 == k2 {
                g.add_scalar(inner, -(ell as f64))
            } else {
                inner
            };
            let mut sq = g.mul(dev, dev);
            if k1 < k2 {
                sq = g.mul_scalar(sq, 2.0);
            }
            overlap_acc = Some(match overlap_acc {
                Some(acc) => g.add(acc, sq),
                None => sq,
            });
        }
    }
    let overlap_node = g.mean_all(overlap_acc.expect("at least one concept"));

    // Diversity: mean pairwise cosine of pooled representations.
    let div_node = if k_total >= 2 {
        let mut acc: Option<NodeId> = None;
        for k1 in 0..k_total {
            for k2 in k1 + 1..k_total {
                let c = g.cosine_rows(reps[k1], reps[k2]);
                acc = Some(match acc {
                    Some(a) => g.add(a, c),
                    None => c,
                });
            }
        }
        let scaled = g.mul_scalar(acc.unwrap(), 2.0 / (k_total * (k_total - 1)) as f64);
        Some(g.mean_all(scaled))
    } else {
        None
    };

    // Distillation: squared gap of positive-class probabilities.
    let distill_node = match opts.teacher_probs {
        Some(tp) => {
            let p1 = g.slice_cols(log_probs, 1, 2);
            let ep = g.exp(p1);
            let teacher =
                Array2::from_shape_fn((batch.len(), 1), |(b, _)| tp[b]);
            let teacher_node = g.leaf(teacher);
            let gap = g.sub(ep, teacher_node);
            let sq = g.mul(gap, gap);
            Some(g.mean_all(sq))
        }
        None => None,
    };

    // Weighted total; zero-weighted components stay out of the backward pass
    // but are still reported.
    let w = &opts.weights;
    let mut total = pred_loss;
    if w.overlap > 0.0 {
        let term = g.mul_scalar(overlap_node, w.overlap);
        total = g.add(total, term);
    }
    if let (Some(div), true) = (div_node, w.diversity > 0.0) {
        let term = g.mul_scalar(div, w.diversity);
        total = g.add(total, term);
    }
    if let (Some(distill), true) = (distill_node, w.distill > 0.0) {
        let term = g.mul_scalar(distill, w.distill);
        total = g.add(total, term);
    }

    let parts = LossParts {
        pred: g.scalar(pred_loss),
        overlap: g.scalar(overlap_node),
        diversity: div_node.map_or(0.0, |n| g.scalar(n)),
        distill: distill_node.map_or(0.0, |n| g.scalar(n)),
    };
    if !parts.total(w).is_finite() {
        let (epoch, batch_ix) = match opts.mode {
            Mode::Train { epoch, batch, .. } => (epoch as usize, batch as usize),
            Mode::Eval => (0, 0),
        };
        return Err(Error::Diverged {
            epoch,
            batch: batch_ix,
            loss: parts.total(w),
        });
    }

    Ok(ForwardResult {
        total,
        param_nodes: Vec::new(), // filled by the caller
        log_probs,
        concept_logits,
        presence: presence_nodes,
        concept_reps: reps,
        masks,
        parts,
        labels: batch.labels.clone(),
        teacher_probs: opts.teacher_probs.map(<[f64]>::to_vec),
        graph: std::mem::take(g),
    })
}

/// Full pass with sampled concepts. Train mode samples via Gumbel noise and
/// builds straight-through masks; eval mode takes argmax starts and
/// thresholded presence.
pub fn forward(
    params: &ConRATParams,
    batch: &BatchInput,
    opts: &ForwardOptions,
) -> Result<ForwardResult> {
    validate_common(params, batch, &opts.weights)?;
    validate_teacher(batch, opts.teacher_probs)?;
    if opts.gen_temp <= 0.0 || opts.presence_temp <= 0.0 {
        return Err(Error::InvalidParameter(
            "temperatures must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&opts.dropout) {
        return Err(Error::InvalidParameter(format!(
            "dropout must lie in [0, 1), got {}",
            opts.dropout
        )));
    }
    let dims = &params.dims;
    let (k_total, ell) = (dims.num_concepts, dims.chunk_len);
    if let Some(fp) = opts.force_presence {
        if fp.len() != k_total {
            return Err(Error::Shape(format!(
                "{} forced presence values for {k_total} concepts",
                fp.len()
            )));
        }
        if fp.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidParameter(
                "forced presence must lie in [0, 1]".into(),
            ));
        }
    }
    let mut g = Graph::new();
    let (pn, flat) = ParamNodes::attach(&mut g, params);
    let enc = encode(&mut g, &pn, params, batch);
    let support = batch.support();

    // Position scores: one B x K matrix per step, re-sliced per concept.
    let enc_steps = enc.gen.concat_steps(&mut g);
    let score_steps: Vec<NodeId> = enc_steps
        .iter()
        .map(|&e| {
            let proj = g.matmul(e, pn.pos_w);
            g.add(proj, pn.pos_b)
        })
        .collect();

    let mut start_rng = match opts.mode {
        Mode::Train { seed, epoch, batch } => {
            Some(rng_for(seed, Stream::GumbelStarts { epoch, batch }))
        }
        Mode::Eval => None,
    };
    let mut st_nodes = Vec::with_capacity(k_total);
    let mut hard_blocks = Vec::with_capacity(k_total);
    let mut starts_per_k: Vec<Vec<usize>> = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let cols: Vec<NodeId> = score_steps
            .iter()
            .map(|&s| g.slice_cols(s, k, k + 1))
            .collect();
        let scores_k = g.concat_cols(&cols);
        let noisy = match start_rng.as_mut() {
            Some(rng) => {
                let noise = gumbel_noise(rng, batch.len(), batch.t_max);
                g.add_const(scores_k, &noise)
            }
            None => scores_k,
        };
        let scaled = g.mul_scalar(noisy, 1.0 / opts.gen_temp);
        let soft = g.masked_softmax_rows(scaled, support.clone());
        let starts: Vec<usize> = (0..batch.len())
            .map(|b| argmax_row(&g.value(soft).row(b).to_vec()))
            .collect();
        let hard = hard_block(&starts, ell, batch);
        let node = match opts.mode {
            Mode::Train { .. } => {
                let surr = g.causal_window_sum(soft, ell);
                g.straight_through(surr, hard.clone())
            }
            Mode::Eval => g.leaf(hard.clone()),
        };
        st_nodes.push(node);
        hard_blocks.push(hard);
        starts_per_k.push(starts);
    }
    let masks: Vec<MaskSet> = (0..batch.len())
        .map(|b| {
            let starts: Vec<usize> = starts_per_k.iter().map(|s| s[b]).collect();
            build_masks(&starts, ell, batch.valid_len(b))
        })
        .collect::<Result<_>>()?;

    // Selector: pooled representation and presence per concept.
    let mut presence_rng = match opts.mode {
        Mode::Train { seed, epoch, batch } => {
            Some(rng_for(seed, Stream::PresenceNoise { epoch, batch }))
        }
        Mode::Eval => None,
    };
    let mut reps = Vec::with_capacity(k_total);
    let mut presence_nodes = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let h_k = attention_pool(&mut g, enc.attn, &enc.feats, hard_blocks[k].clone());
        reps.push(h_k);
        let gw = g.slice_cols(pn.gate_w, k, k + 1);
        let proj = g.matmul(h_k, gw);
        let gb = g.slice_cols(pn.gate_b, k, k + 1);
        let gamma = g.add(proj, gb);
        if let Some(fp) = opts.force_presence {
            let vals = Array2::from_elem((batch.len(), 1), fp[k]);
            presence_nodes.push(g.leaf(vals));
            continue;
        }
        let s_k = match presence_rng.as_mut() {
            Some(rng) => {
                let noise = logistic_noise(rng, batch.len(), 1);
                let noisy = g.add_const(gamma, &noise);
                let scaled = g.mul_scalar(noisy, 1.0 / opts.presence_temp);
                g.sigmoid(scaled)
            }
            None => {
                let vals = g.value(gamma).mapv(|x| {
                    if crate::autodiff::sigmoid(x) > 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                });
                g.leaf(vals)
            }
        };
        presence_nodes.push(s_k);
    }

    let mut result = finish_pass(
        &mut g,
        &pn,
        params,
        batch,
        &enc,
        &st_nodes,
        presence_nodes,
        reps,
        opts,
        masks,
    )?;
    result.param_nodes = flat;
    Ok(result)
}

/// Pass with the concept masks and presence values pinned as constants. No
/// sampling, no straight-through, no dropout: the graph is differentiable in
/// the parameters with the discrete choices held fixed. Gradient checks and
/// counterfactual probes run through here.
pub fn forward_fixed(
    params: &ConRATParams,
    batch: &BatchInput,
    masks: &[MaskSet],
    presence: &Array2<f64>,
    weights: &LossWeights,
    teacher_probs: Option<&[f64]>,
) -> Result<ForwardResult> {
    validate_common(params, batch, weights)?;
    validate_teacher(batch, teacher_probs)?;
    let dims = &params.dims;
    let (k_total, ell) = (dims.num_concepts, dims.chunk_len);
    if masks.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} mask sets for {} documents",
            masks.len(),
            batch.len()
        )));
    }
    for (b, set) in masks.iter().enumerate() {
        if set.num_concepts() != k_total || set.ell != ell {
            return Err(Error::Shape(format!(
                "mask set {b} has {} concepts of length {}, model expects {k_total} of {ell}",
                set.num_concepts(),
                set.ell
            )));
        }
        if set.len_tokens() != batch.valid_len(b) {
            return Err(Error::Shape(format!(
                "mask set {b} covers {} tokens, document has {}",
                set.len_tokens(),
                batch.valid_len(b)
            )));
        }
    }
    if presence.dim() != (batch.len(), k_total) {
        return Err(Error::Shape(format!(
            "presence is {:?}, expected ({}, {k_total})",
            presence.dim(),
            batch.len()
        )));
    }

    let opts = ForwardOptions {
        mode: Mode::Eval,
        weights: *weights,
        teacher_probs,
        ..ForwardOptions::default()
    };
    let mut g = Graph::new();
    let (pn, flat) = ParamNodes::attach(&mut g, params);
    let enc = encode(&mut g, &pn, params, batch);

    let mut st_nodes = Vec::with_capacity(k_total);
    let mut hard_blocks = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let mut hard = Array2::zeros((batch.len(), batch.t_max));
        for (b, set) in masks.iter().enumerate() {
            for t in 0..set.len_tokens() {
                hard[(b, t)] = set.masks[(k, t)];
            }
        }
        st_nodes.push(g.leaf(hard.clone()));
        hard_blocks.push(hard);
    }

    let mut reps = Vec::with_capacity(k_total);
    let mut presence_nodes = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let h_k = attention_pool(&mut g, enc.attn, &enc.feats, hard_blocks[k].clone());
        reps.push(h_k);
        let col = Array2::from_shape_fn((batch.len(), 1), |(b, _)| presence[(b, k)]);
        presence_nodes.push(g.leaf(col));
    }

    let mut result = finish_pass(
        &mut g,
        &pn,
        params,
        batch,
        &enc,
        &st_nodes,
        presence_nodes,
        reps,
        &opts,
        masks.to_vec(),
    )?;
    result.param_nodes = flat;
    Ok(result)
}

/// Deterministic single-document pass; label only affects the reported
/// cross-entropy.
pub fn run_document(params: &ConRATParams, tokens: &[usize], label: usize) -> Result<ModelOutput> {
    let batch = BatchInput::new(vec![tokens.to_vec()], vec![label])?;
    let result = forward(params, &batch, &ForwardOptions::default())?;
    Ok(result.doc_output(0))
}

/// Generator head alone: position scores for one document, then a start draw
/// per concept under the given mode.
pub fn generate_concepts(
    params: &ConRATParams,
    tokens: &[usize],
    temperature: f64,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSet> {
    let batch = BatchInput::new(vec![tokens.to_vec()], vec![0])?;
    validate_common(params, &batch, &LossWeights::default())?;
    let mut g = Graph::new();
    let (pn, _) = ParamNodes::attach(&mut g, params);
    let dims = &params.dims;
    let xs: Vec<NodeId> = (0..batch.t_max)
        .map(|t| g.gather_rows(pn.embedding, &batch.column(t)))
        .collect();
    let pads: Vec<Array2<f64>> = (0..batch.t_max).map(|t| batch.pad_keep(t)).collect();
    let gen = bigru(&mut g, &pn.gen, &xs, &pads, 1, dims.hidden);
    let enc_steps = gen.concat_steps(&mut g);

    // K x T score matrix for the document.
    let mut scores = Array2::zeros((dims.num_concepts, batch.t_max));
    for (t, &e) in enc_steps.iter().enumerate() {
        let proj = g.matmul(e, pn.pos_w);
        let row = g.add(proj, pn.pos_b);
        for k in 0..dims.num_concepts {
            scores[(k, t)] = g.value(row)[(0, k)];
        }
    }
    let sample = masking::sample_starts(&scores, tokens.len(), temperature, mode, rng)?;
    build_masks(&sample.starts, dims.chunk_len, tokens.len())
}

/// Selector outputs for one document under given masks.
#[derive(Debug, Clone)]
pub struct ConceptSelection {
    /// K x feat_dim pooled representations.
    pub reps: Array2<f64>,
    /// K x 1 gate logits.
    pub gate_logits: Array2<f64>,
    /// K x 1 presence scores.
    pub presence: Array2<f64>,
}

/// Selector alone: pool each concept over its mask support with the shared
/// attention scorer, then gate.
pub fn select_concepts(
    params: &ConRATParams,
    tokens: &[usize],
    masks: &MaskSet,
    temperature: f64,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<ConceptSelection> {
    let batch = BatchInput::new(vec![tokens.to_vec()], vec![0])?;
    validate_common(params, &batch, &LossWeights::default())?;
    let dims = &params.dims;
    if masks.num_concepts() != dims.num_concepts || masks.len_tokens() != tokens.len() {
        return Err(Error::Shape(format!(
            "mask set is {} x {}, expected {} x {}",
            masks.num_concepts(),
            masks.len_tokens(),
            dims.num_concepts,
            tokens.len()
        )));
    }
    let mut g = Graph::new();
    let (pn, _) = ParamNodes::attach(&mut g, params);
    let enc = encode(&mut g, &pn, params, &batch);

    let k_total = dims.num_concepts;
    let mut reps = Array2::zeros((k_total, dims.feat_dim()));
    let mut gate_logits = Array2::zeros((k_total, 1));
    for k in 0..k_total {
        let support = masks.masks.row(k).to_owned().insert_axis(ndarray::Axis(0));
        let h_k = attention_pool(&mut g, enc.attn, &enc.feats, support);
        reps.row_mut(k).assign(&g.value(h_k).row(0));
        let gw = g.slice_cols(pn.gate_w, k, k + 1);
        let proj = g.matmul(h_k, gw);
        let gb = g.slice_cols(pn.gate_b, k, k + 1);
        let gamma = g.add(proj, gb);
        gate_logits[(k, 0)] = g.scalar(gamma);
    }
    let presence = masking::sample_presence(&gate_logits, temperature, mode, rng)?;
    Ok(ConceptSelection {
        reps,
        gate_logits,
        presence,
    })
}

/// Predictor alone: class logits per concept from given masks and presence,
/// aggregated into document log-probabilities. `concept_reps` in the output
/// stays zero; the selector was not consulted.
pub fn predict(
    params: &ConRATParams,
    tokens: &[usize],
    masks: &MaskSet,
    presence: &Array2<f64>,
) -> Result<ModelOutput> {
    let batch = BatchInput::new(vec![tokens.to_vec()], vec![0])?;
    validate_common(params, &batch, &LossWeights::default())?;
    let dims = &params.dims;
    let k_total = dims.num_concepts;
    if masks.num_concepts() != k_total || masks.len_tokens() != tokens.len() {
        return Err(Error::Shape(format!(
            "mask set is {} x {}, expected {} x {}",
            masks.num_concepts(),
            masks.len_tokens(),
            k_total,
            tokens.len()
        )));
    }
    if presence.dim() != (k_total, 1) {
        return Err(Error::Shape(format!(
            "presence is {:?}, expected ({k_total}, 1)",
            presence.dim()
        )));
    }
    let mut g = Graph::new();
    let (pn, _) = ParamNodes::attach(&mut g, params);
    let xs: Vec<NodeId> = (0..batch.t_max)
        .map(|t| g.gather_rows(pn.embedding, &batch.column(t)))
        .collect();
    let pads: Vec<Array2<f64>> = (0..batch.t_max).map(|t| batch.pad_keep(t)).collect();

    let mut concept_logits = Array2::zeros((k_total, 2));
    let mut logits: Option<NodeId> = None;
    for k in 0..k_total {
        let mask_node = g.leaf(
            masks
                .masks
                .row(k)
                .to_owned()
                .insert_axis(ndarray::Axis(0)),
        );
        let s_node = g.leaf(Array2::from_elem((1, 1), presence[(k, 0)]));
        let gated: Vec<NodeId> = (0..batch.t_max)
            .map(|t| {
                let m_t = g.slice_cols(mask_node, t, t + 1);
                let coef = g.mul(m_t, s_node);
                g.mul_col(xs[t], coef)
            })
            .collect();
        let out = bigru(&mut g, &pn.pred, &gated, &pads, 1, dims.hidden);
        let summary = out.summary(&mut g);
        let act = g.leaky_relu(summary, LEAKY_SLOPE);
        let proj = g.matmul(act, pn.out_w);
        let p_k = g.add(proj, pn.out_b);
        concept_logits[(k, 0)] = g.value(p_k)[(0, 0)];
        concept_logits[(k, 1)] = g.value(p_k)[(0, 1)];

        let weighted = g.mul_col(p_k, s_node);
        let alpha_k = g.slice_cols(pn.alpha, k, k + 1);
        let term = g.scale_by(weighted, alpha_k);
        logits = Some(match logits {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let log_probs_node = g.log_softmax_rows(logits.expect("at least one concept"));
    let lp = g.value(log_probs_node);
    Ok(ModelOutput {
        log_probs: [lp[(0, 0)], lp[(0, 1)]],
        concept_logits,
        presence: presence.clone(),
        masks: masks.clone(),
        concept_reps: Array2::zeros((k_total, dims.feat_dim())),
        loss: LossParts::default(),
    })
}

//! Plain single-rationale baseline: pick one window, classify from it.
//!
//! This is a separate value-level implementation with no tape behind it. With
//! one concept, presence pinned to 1 and an aggregation weight of 1, the
//! concept model collapses to exactly this computation; the tests here compare
//! the two bit for bit.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::masking::gumbel_noise;
use crate::model::{ConRATParams, GruParams, LEAKY_SLOPE};

#[derive(Debug, Clone)]
pub struct RnpParams {
    pub embedding: Array2<f64>,
    pub gen_fwd: GruParams,
    pub gen_bwd: GruParams,
    /// enc_dim x 1 and 1 x 1 start-score head.
    pub pos_w: Array2<f64>,
    pub pos_b: Array2<f64>,
    pub pred_fwd: GruParams,
    pub pred_bwd: GruParams,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub hidden: usize,
    pub window: usize,
}

impl RnpParams {
    /// Borrow the single-concept subset of a concept model. The selector and
    /// aggregation parameters have no counterpart here.
    pub fn from_concept_model(p: &ConRATParams) -> Result<Self> {
        if p.dims.num_concepts != 1 {
            return Err(Error::InvalidParameter(format!(
                "single-rationale reduction needs one concept, model has {}",
                p.dims.num_concepts
            )));
        }
        Ok(RnpParams {
            embedding: p.embedding.clone(),
            gen_fwd: p.gen_rnn.fwd.clone(),
            gen_bwd: p.gen_rnn.bwd.clone(),
            pos_w: p.pos_w.clone(),
            pos_b: p.pos_b.clone(),
            pred_fwd: p.pred_rnn.fwd.clone(),
            pred_bwd: p.pred_rnn.bwd.clone(),
            out_w: p.out_w.clone(),
            out_b: p.out_b.clone(),
            hidden: p.dims.hidden,
            window: p.dims.chunk_len,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RnpOutput {
    /// 0-based start of the selected window.
    pub start: usize,
    /// Inclusive end, clipped at the document end.
    pub end: usize,
    pub logits: [f64; 2],
    pub log_probs: [f64; 2],
}

/// One GRU cell on a 1 x D input row. Mirrors the fused graph step exactly:
/// same slicing, same operation order.
fn cell(p: &GruParams, x: &Array2<f64>, h_prev: &Array2<f64>, hidden: usize) -> Array2<f64> {
    let gx = x.dot(&p.wx) + &p.bx.row(0);
    let gh = h_prev.dot(&p.wh) + &p.bh.row(0);
    let sl = |m: &Array2<f64>, i: usize| m.slice(s![.., i * hidden..(i + 1) * hidden]).to_owned();
    let r = (sl(&gx, 0) + sl(&gh, 0)).mapv(sigmoid);
    let z = (sl(&gx, 1) + sl(&gh, 1)).mapv(sigmoid);
    let gh_n = sl(&gh, 2);
    let n = (sl(&gx, 2) + &r * &gh_n).mapv(f64::tanh);
    let mut h = Array2::zeros((1, hidden));
    for c in 0..hidden {
        let raw = (1.0 - z[(0, c)]) * n[(0, c)] + z[(0, c)] * h_prev[(0, c)];
        h[(0, c)] = 1.0 * raw + 0.0 * h_prev[(0, c)];
    }
    h
}

/// Both directions over a token row sequence; returns per-step encodings
/// (each 1 x 2H), the forward final state, and the backward state at token 0.
fn encode(
    fwd: &GruParams,
    bwd: &GruParams,
    xs: &[Array2<f64>],
    hidden: usize,
) -> (Vec<Array2<f64>>, Array2<f64>, Array2<f64>) {
    let t_len = xs.len();
    let mut fwd_states = Vec::with_capacity(t_len);
    let mut h = Array2::zeros((1, hidden));
    for x in xs {
        h = cell(fwd, x, &h, hidden);
        fwd_states.push(h.clone());
    }
    let final_fwd = h;
    let mut bwd_states = vec![Array2::zeros((1, hidden)); t_len];
    let mut hb = Array2::zeros((1, hidden));
    for t in (0..t_len).rev() {
        hb = cell(bwd, &xs[t], &hb, hidden);
        bwd_states[t] = hb.clone();
    }
    let enc = (0..t_len)
        .map(|t| {
            let mut e = Array2::zeros((1, 2 * hidden));
            e.slice_mut(s![.., 0..hidden]).assign(&fwd_states[t]);
            e.slice_mut(s![.., hidden..]).assign(&bwd_states[t]);
            e
        })
        .collect();
    (enc, final_fwd, bwd_states.swap_remove(0))
}

fn log_softmax_row(logits: [f64; 2]) -> [f64; 2] {
    let max = logits[0].max(logits[1]);
    let lse = ((logits[0] - max).exp() + (logits[1] - max).exp()).ln() + max;
    [logits[0] - lse, logits[1] - lse]
}

/// Full pass. `noise_rng` of `None` selects the argmax start; `Some` draws
/// Gumbel noise onto the scores first, matching the concept model's training
/// draw for one concept.
pub fn rnp_forward(
    p: &RnpParams,
    tokens: &[usize],
    temperature: f64,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<RnpOutput> {
    if tokens.is_empty() {
        return Err(Error::DegenerateInput("document has no tokens".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let t_len = tokens.len();
    let xs: Vec<Array2<f64>> = tokens
        .iter()
        .map(|&id| {
            if id >= p.embedding.nrows() {
                return Err(Error::Bounds {
                    what: "token id",
                    value: id,
                    min: 0,
                    max: p.embedding.nrows() - 1,
                });
            }
            Ok(p.embedding.row(id).to_owned().insert_axis(ndarray::Axis(0)))
        })
        .collect::<Result<_>>()?;

    let (enc, _, _) = encode(&p.gen_fwd, &p.gen_bwd, &xs, p.hidden);
    let mut logits_row = vec![0.0f64; t_len];
    for (t, e) in enc.iter().enumerate() {
        let proj = e.dot(&p.pos_w) + &p.pos_b.row(0);
        logits_row[t] = proj[(0, 0)];
    }
    if let Some(rng) = noise_rng {
        let noise = gumbel_noise(rng, 1, t_len);
        for (t, v) in logits_row.iter_mut().enumerate() {
            *v += noise[(0, t)];
        }
    }
    for v in logits_row.iter_mut() {
        *v /= temperature;
    }
    let mut start = 0;
    for (t, &v) in logits_row.iter().enumerate().skip(1) {
        if v > logits_row[start] {
            start = t;
        }
    }
    let end = (start + p.window - 1).min(t_len - 1);

    let gated: Vec<Array2<f64>> = (0..t_len)
        .map(|t| {
            let m = if t >= start && t <= end { 1.0 } else { 0.0 };
            let coef = m * 1.0;
            &xs[t] * coef
        })
        .collect();
    let (_, final_fwd, first_bwd) = encode(&p.pred_fwd, &p.pred_bwd, &gated, p.hidden);
    let mut summary = Array2::zeros((1, 2 * p.hidden));
    summary.slice_mut(s![.., 0..p.hidden]).assign(&final_fwd);
    summary.slice_mut(s![.., p.hidden..]).assign(&first_bwd);
    let act = summary.mapv(|x| if x > 0.0 { x } else { LEAKY_SLOPE * x });
    let out = act.dot(&p.out_w) + &p.out_b.row(0);
    let class_logits = [out[(0, 0)] * 1.0, out[(0, 1)] * 1.0];
    Ok(RnpOutput {
        start,
        end,
        logits: class_logits,
        log_probs: log_softmax_row(class_logits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::SampleMode;
    use crate::model::forward::{generate_concepts, predict};
    use crate::model::ModelDims;
    use crate::rng::{rng_for, Stream};
    use ndarray::array;
    use rand::Rng;

    fn one_concept_params(seed: u64) -> ConRATParams {
        let dims = ModelDims {
            vocab: 19,
            embed: 6,
            hidden: 4,
            num_concepts: 1,
            chunk_len: 4,
            selector_cnn: false,
        };
        let mut rng = rng_for(seed, Stream::Direct(92));
        let emb = Array2::from_shape_fn((dims.vocab, dims.embed), |_| {
            rng.random::<f64>() * 0.8 - 0.4
        });
        let mut p = ConRATParams::init(dims, emb, seed).unwrap();
        p.alpha = array![[1.0]];
        p
    }

    #[test]
    fn single_concept_model_collapses_to_rnp_bitwise() {
        for seed in [3u64, 4, 5] {
            let params = one_concept_params(seed);
            let rnp = RnpParams::from_concept_model(&params).unwrap();
            let tokens: Vec<usize> = {
                let mut rng = rng_for(seed, Stream::Direct(93));
                (0..11).map(|_| rng.random_range(1..19)).collect()
            };

            // deterministic path
            let mut dummy = rng_for(0, Stream::Direct(94));
            let masks =
                generate_concepts(&params, &tokens, 1.0, SampleMode::Eval, &mut dummy).unwrap();
            let conrat = predict(&params, &tokens, &masks, &array![[1.0]]).unwrap();
            let base = rnp_forward(&rnp, &tokens, 1.0, None).unwrap();
            assert_eq!(masks.starts[0], base.start);
            assert_eq!(masks.span(0), (base.start, base.end));
            for c in 0..2 {
                assert_eq!(
                    conrat.log_probs[c].to_bits(),
                    base.log_probs[c].to_bits(),
                    "seed {seed} class {c}"
                );
            }

            // stochastic start selection under identical noise draws
            let mut rng_a = rng_for(seed, Stream::Direct(95));
            let mut rng_b = rng_for(seed, Stream::Direct(95));
            let masks_t =
                generate_concepts(&params, &tokens, 0.8, SampleMode::Train, &mut rng_a).unwrap();
            let noisy = rnp_forward(&rnp, &tokens, 0.8, Some(&mut rng_b)).unwrap();
            assert_eq!(masks_t.starts[0], noisy.start);
        }
    }

    #[test]
    fn reduction_requires_single_concept() {
        let dims = ModelDims {
            vocab: 10,
            embed: 3,
            hidden: 2,
            num_concepts: 2,
            chunk_len: 2,
            selector_cnn: false,
        };
        let emb = Array2::zeros((10, 3));
        let params = ConRATParams::init(dims, emb, 0).unwrap();
        assert!(RnpParams::from_concept_model(&params).is_err());
    }

    #[test]
    fn window_is_contiguous_and_clipped() {
        let params = one_concept_params(9);
        let rnp = RnpParams::from_concept_model(&params).unwrap();
        let tokens = vec![3usize, 7];
        let out = rnp_forward(&rnp, &tokens, 1.0, None).unwrap();
        assert!(out.start <= 1);
        assert_eq!(out.end, 1);
        let total = out.log_probs[0].exp() + out.log_probs[1].exp();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

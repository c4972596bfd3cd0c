//! Concept span sampling and mask construction.
//!
//! Each concept picks one start position via Gumbel-softmax over per-position
//! scores, then occupies the `ell` tokens from that start, truncated at the
//! document end. Training uses a straight-through estimator: the forward pass
//! sees the hard 0/1 mask, the backward pass sees a sliding-window sum of the
//! soft start distribution (position `t` is covered by starts `t-ell+1..=t`,
//! so the surrogate Jacobian is a banded all-ones matrix).

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::causal_window_sum;
use crate::error::{Error, Result};

/// Uniform draws are clamped away from {0, 1} before entering logs.
pub const NOISE_EPS: f64 = 1e-10;

/// Additive logit applied to pad positions before the start softmax.
pub const PAD_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Gumbel noise on starts, concrete relaxation on presence.
    Train,
    /// Deterministic: argmax starts, thresholded presence.
    Eval,
}

/// One start draw per concept for a single document.
#[derive(Debug, Clone)]
pub struct StartSample {
    /// 0-based start position per concept.
    pub starts: Vec<usize>,
    /// Softmax over start positions (K x T); zero beyond `valid_len`.
    /// Surrogate source for the straight-through mask.
    pub soft: Array2<f64>,
}

/// Hard concept masks for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// K x T matrix of {0, 1}.
    pub masks: Array2<f64>,
    pub starts: Vec<usize>,
    pub ell: usize,
}

impl MaskSet {
    pub fn num_concepts(&self) -> usize {
        self.masks.nrows()
    }

    pub fn len_tokens(&self) -> usize {
        self.masks.ncols()
    }

    /// Inclusive 0-based token span of concept `k`.
    pub fn span(&self, k: usize) -> (usize, usize) {
        let start = self.starts[k];
        let end = (start + self.ell - 1).min(self.masks.ncols() - 1);
        (start, end)
    }

    /// Token indices covered by concept `k`.
    pub fn covered(&self, k: usize) -> Vec<usize> {
        let (s, e) = self.span(k);
        (s..=e).collect()
    }
}

/// `u ~ Uniform(eps, 1-eps)` from one raw draw.
fn clamped_uniform(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let r: f64 = rng.random();
    NOISE_EPS + r * (1.0 - 2.0 * NOISE_EPS)
}

/// Standard Gumbel noise `-log(-log u)`.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let u = clamped_uniform(rng);
            out[(r, c)] = -(-u.ln()).ln();
        }
    }
    out
}

/// Logistic noise `log u - log(1-u)` for the concrete presence relaxation.
pub fn logistic_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let u = clamped_uniform(rng);
            out[(r, c)] = u.ln() - (1.0 - u).ln();
        }
    }
    out
}

/// Row argmax; ties resolve to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sample (or select) one start per concept.
///
/// `scores`: K x T position scores for one document. Positions at or beyond
/// `valid_len` receive an additive `-1e9` logit and end up with exactly zero
/// probability. In `Train` mode Gumbel noise is added before the temperature
/// division; in `Eval` mode the argmax of the raw scores is taken and the
/// soft distribution is the noiseless softmax.
pub fn sample_starts(
    scores: &Array2<f64>,
    valid_len: usize,
    temperature: f64,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<StartSample> {
    let (k, t) = scores.dim();
    if valid_len == 0 {
        return Err(Error::DegenerateInput("document has no valid tokens".into()));
    }
    if valid_len > t {
        return Err(Error::Shape(format!(
            "valid_len {valid_len} exceeds score width {t}"
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }

    let mut logits = scores.clone();
    if mode == SampleMode::Train {
        let noise = gumbel_noise(rng, k, t);
        logits += &noise;
    }
    for r in 0..k {
        for c in valid_len..t {
            logits[(r, c)] += PAD_LOGIT;
        }
    }
    logits.mapv_inplace(|x| x / temperature);

    let mut starts = Vec::with_capacity(k);
    let mut soft = Array2::zeros((k, t));
    for r in 0..k {
        let row: Vec<f64> = logits.row(r).to_vec();
        starts.push(argmax_row(&row));
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..t {
            let e = (row[c] - max).exp();
            soft[(r, c)] = e;
            total += e;
        }
        for c in 0..t {
            soft[(r, c)] /= total;
        }
    }
    Ok(StartSample { starts, soft })
}

/// Hard masks from chosen starts: ones on `[start, start+ell-1]` clipped to
/// the document end.
pub fn build_masks(starts: &[usize], ell: usize, t: usize) -> Result<MaskSet> {
    if ell == 0 {
        return Err(Error::InvalidParameter("chunk length must be positive".into()));
    }
    if t == 0 {
        return Err(Error::DegenerateInput("empty document".into()));
    }
    let mut masks = Array2::zeros((starts.len(), t));
    for (k, &s) in starts.iter().enumerate() {
        if s >= t {
            return Err(Error::Bounds {
                what: "concept start",
                value: s,
                min: 0,
                max: t - 1,
            });
        }
        let end = (s + ell - 1).min(t - 1);
        for c in s..=end {
            masks[(k, c)] = 1.0;
        }
    }
    Ok(MaskSet {
        masks,
        starts: starts.to_vec(),
        ell,
    })
}

/// Straight-through surrogate: position `t` is covered when the start fell in
/// the preceding `ell` positions, so the soft coverage is a causal sliding
/// window sum of the start distribution.
pub fn mask_surrogate(soft: &Array2<f64>, ell: usize) -> Array2<f64> {
    causal_window_sum(soft, ell)
}

/// Presence scores from gate logits.
///
/// Train: concrete relaxation `sigmoid((logit + logistic_noise) / tau)`.
/// Eval: hard threshold `sigmoid(logit) > 0.5` (exactly 0.5 rounds down).
pub fn sample_presence(
    logits: &Array2<f64>,
    tau: f64,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "presence temperature must be positive, got {tau}"
        )));
    }
    let (k, one) = logits.dim();
    if one != 1 {
        return Err(Error::Shape(format!(
            "presence logits must be K x 1, got {k} x {one}"
        )));
    }
    let out = match mode {
        SampleMode::Train => {
            let noise = logistic_noise(rng, k, 1);
            let mut s = logits + &noise;
            s.mapv_inplace(|x| crate::autodiff::sigmoid(x / tau));
            s
        }
        SampleMode::Eval => logits.mapv(|x| {
            if crate::autodiff::sigmoid(x) > 0.5 {
                1.0
            } else {
                0.0
            }
        }),
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};
    use ndarray::array;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn gumbel_argmax_frequencies_match_softmax() {
        // Gumbel-max draws land on index i with probability softmax(scores)_i;
        // the temperature rescales monotonically so it cannot change the argmax.
        let scores: Array2<f64> = array![[0.5, 1.2, -0.3, 0.8]];
        let exps: Vec<f64> = scores.row(0).iter().map(|&x| x.exp()).collect();
        let z: f64 = exps.iter().sum();
        let expected: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let n = 200_000usize;
        let mut counts = vec![0usize; 4];
        let mut rng = rng_for(7, Stream::Direct(1));
        for _ in 0..n {
            let s = sample_starts(&scores, 4, 0.7, SampleMode::Train, &mut rng).unwrap();
            counts[s.starts[0]] += 1;
        }

        let mut chi2 = 0.0;
        for i in 0..4 {
            let obs = counts[i] as f64 / n as f64;
            assert!(
                (obs - expected[i]).abs() < 0.01,
                "start {i}: observed {obs:.4}, expected {:.4}",
                expected[i]
            );
            let e = expected[i] * n as f64;
            let o = counts[i] as f64;
            chi2 += (o - e) * (o - e) / e;
        }
        let dist = ChiSquared::new(3.0).unwrap();
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.01, "chi-square p-value {p:.5} too small (chi2 {chi2:.2})");
    }

    #[test]
    fn pad_positions_never_sampled_and_have_zero_mass() {
        let scores = Array2::from_elem((2, 5), 3.0);
        let mut rng = rng_for(11, Stream::Direct(2));
        for _ in 0..2_000 {
            let s = sample_starts(&scores, 3, 1.0, SampleMode::Train, &mut rng).unwrap();
            for &st in &s.starts {
                assert!(st < 3);
            }
            for k in 0..2 {
                for c in 3..5 {
                    assert_eq!(s.soft[(k, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_breaks_ties_low() {
        let scores = array![[0.0, 2.0, 2.0, -1.0], [5.0, 5.0, 5.0, 5.0]];
        let mut rng = rng_for(1, Stream::Direct(3));
        let a = sample_starts(&scores, 4, 1.0, SampleMode::Eval, &mut rng).unwrap();
        let b = sample_starts(&scores, 4, 1.0, SampleMode::Eval, &mut rng).unwrap();
        assert_eq!(a.starts, b.starts);
        assert_eq!(a.soft, b.soft);
        assert_eq!(a.starts, vec![1, 0]);
    }

    #[test]
    fn degenerate_and_invalid_inputs_error() {
        let scores = Array2::zeros((1, 4));
        let mut rng = rng_for(1, Stream::Direct(4));
        assert!(matches!(
            sample_starts(&scores, 0, 1.0, SampleMode::Eval, &mut rng),
            Err(Error::DegenerateInput(_))
        ));
        assert!(sample_starts(&scores, 5, 1.0, SampleMode::Eval, &mut rng).is_err());
        assert!(sample_starts(&scores, 4, 0.0, SampleMode::Eval, &mut rng).is_err());
        assert!(build_masks(&[0], 0, 4).is_err());
        assert!(build_masks(&[4], 2, 4).is_err());
    }

    #[test]
    fn surrogate_jacobian_is_banded_all_ones() {
        // d surrogate[t] / d soft[j] = 1 exactly when j <= t <= j+ell-1.
        let t = 9;
        let ell = 4;
        for j in 0..t {
            let mut soft = Array2::zeros((1, t));
            soft[(0, j)] = 1.0;
            let sur = mask_surrogate(&soft, ell);
            for c in 0..t {
                let expect = if c >= j && c <= j + ell - 1 { 1.0 } else { 0.0 };
                assert_eq!(sur[(0, c)], expect, "j={j} c={c}");
            }
        }
    }

    #[test]
    fn surrogate_matches_finite_differences_through_softmax() {
        use crate::autodiff::{finite_difference, max_rel_err, Graph};
        let t = 8;
        let ell = 3;
        let mut rng = rng_for(23, Stream::Direct(5));
        let scores = {
            use rand::Rng;
            Array2::from_shape_fn((2, t), |_| rng.random::<f64>() * 2.0 - 1.0)
        };
        let noise = gumbel_noise(&mut rng, 2, t);
        let weights = {
            use rand::Rng;
            Array2::from_shape_fn((2, t), |_| rng.random::<f64>() * 2.0 - 1.0)
        };
        let support = Array2::from_elem((2, t), 1.0);

        let run = |probe: &Array2<f64>| -> (f64, Option<Array2<f64>>) {
            let mut g = Graph::new();
            let sid = g.leaf(probe.clone());
            let noisy = g.add_const(sid, &noise);
            let scaled = g.mul_scalar(noisy, 1.0 / 0.9);
            let soft = g.masked_softmax_rows(scaled, support.clone());
            let sur = g.causal_window_sum(soft, ell);
            let wid = g.leaf(weights.clone());
            let prod = g.mul(sur, wid);
            let loss = g.sum_all(prod);
            let grads = g.backward(loss).unwrap();
            (g.scalar(loss), Some(grads.get_or_zeros(sid, probe.dim())))
        };

        let analytic = run(&scores).1.unwrap();
        let mut f = |p: &Array2<f64>| run(p).0;
        let numeric = finite_difference(&mut f, &scores, 1e-6);
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn presence_relaxation_mean_and_threshold() {
        let logits = Array2::zeros((1, 1));
        let mut rng = rng_for(31, Stream::Direct(6));
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = sample_presence(&logits, 1.0, SampleMode::Train, &mut rng).unwrap();
            acc += s[(0, 0)];
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");

        // hard threshold at sigmoid(logit) > 0.5
        let logits = array![[0.2], [-0.2], [0.0]];
        let s = sample_presence(&logits, 1.0, SampleMode::Eval, &mut rng).unwrap();
        assert_eq!(s, array![[1.0], [0.0], [0.0]]);
    }

    #[test]
    fn presence_extreme_logit_saturates() {
        let logits = array![[40.0]];
        let mut rng = rng_for(37, Stream::Direct(7));
        let mut acc = 0.0;
        let n = 1_000;
        for _ in 0..n {
            let s = sample_presence(&logits, 1.0, SampleMode::Train, &mut rng).unwrap();
            acc += s[(0, 0)];
        }
        assert!(acc / n as f64 > 0.999);
    }

    proptest! {
        #[test]
        fn masks_are_contiguous_runs(
            starts in proptest::collection::vec(0usize..40, 1..6),
            ell in 1usize..12,
            extra in 0usize..10,
        ) {
            let t = 40 + extra;
            let set = build_masks(&starts, ell, t).unwrap();
            for (k, &s) in starts.iter().enumerate() {
                let expect_len = ell.min(t - s);
                let row: Vec<f64> = set.masks.row(k).to_vec();
                let ones: usize = row.iter().map(|&v| v as usize).sum();
                prop_assert_eq!(ones, expect_len);
                for (c, &v) in row.iter().enumerate() {
                    let inside = c >= s && c < s + ell;
                    prop_assert_eq!(v == 1.0, inside && c < t);
                    prop_assert!(v == 0.0 || v == 1.0);
                }
                let (lo, hi) = set.span(k);
                prop_assert_eq!(lo, s);
                prop_assert_eq!(hi, (s + ell - 1).min(t - 1));
            }
        }

        #[test]
        fn surrogate_row_sums_to_window_coverage(
            t in 2usize..20,
            ell in 1usize..8,
        ) {
            // Each unit of soft mass spreads over min(ell, T - j) surrogate
            // positions, so the surrogate total equals that weighted count.
            let mut rng = rng_for(41, Stream::Direct(8));
            let scores = Array2::zeros((1, t));
            let s = sample_starts(&scores, t, 1.0, SampleMode::Train, &mut rng).unwrap();
            let sur = mask_surrogate(&s.soft, ell);
            let expected: f64 = (0..t)
                .map(|j| s.soft[(0, j)] * ell.min(t - j) as f64)
                .sum();
            prop_assert!((sur.row(0).sum() - expected).abs() < 1e-12);
        }
    }
}

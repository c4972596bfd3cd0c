//! Synthetic planted-concept corpus.
//!
//! Each document interleaves filler runs with one chunk per aspect. A chunk
//! is `chunk_len` aspect-specific tokens, exactly one of which is a polarity
//! word from that aspect's positive or negative lexicon. The overall label is
//! the majority chunk polarity (ties go to aspect 1), optionally flipped with
//! probability `noise`. Gold spans and per-aspect labels are emitted in full,
//! so span recovery and aspect alignment are measurable against construction.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::Document;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

const MIN_GAP: usize = 2;
const MAX_GAP: usize = 6;
const MIN_PER_ASPECT: usize = 5;
const MIN_FILLERS: usize = 5;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Distinct content tokens across fillers and all aspect lexicons.
    pub vocab_size: usize,
    pub num_aspects: usize,
    pub chunk_len: usize,
    pub num_docs: usize,
    /// Probability of flipping the overall label.
    pub noise: f64,
    /// Hard cap on document length in tokens.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 100,
            num_aspects: 3,
            chunk_len: 5,
            num_docs: 2000,
            noise: 0.0,
            max_len: 120,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AspectWords {
    pub neutral: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

/// Token pools. Names are systematic ("f3", "a1n2", "a1pos0", "a2neg4") so
/// membership is recoverable from the token text alone.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub fillers: Vec<String>,
    pub aspects: Vec<AspectWords>,
}

/// Deterministic pool allocation for a vocabulary budget.
pub fn build_lexicon(vocab_size: usize, num_aspects: usize) -> Result<Lexicon> {
    if num_aspects == 0 {
        return Err(Error::InvalidParameter("need at least one aspect".into()));
    }
    if vocab_size < MIN_PER_ASPECT * num_aspects + MIN_FILLERS {
        return Err(Error::InvalidParameter(format!(
            "vocab size {vocab_size} cannot cover {num_aspects} aspects \
             ({MIN_PER_ASPECT} words each) plus {MIN_FILLERS} fillers"
        )));
    }
    let mut n_filler = (vocab_size * 2) / 5;
    if (vocab_size - n_filler) / num_aspects < MIN_PER_ASPECT {
        n_filler = vocab_size - MIN_PER_ASPECT * num_aspects;
    }
    let per = (vocab_size - n_filler) / num_aspects;
    let n_pol = (per / 4).max(2);
    let n_neutral = per - 2 * n_pol;

    let fillers = (0..n_filler).map(|i| format!("f{i}")).collect();
    let aspects = (1..=num_aspects)
        .map(|a| AspectWords {
            neutral: (0..n_neutral).map(|i| format!("a{a}n{i}")).collect(),
            positive: (0..n_pol).map(|i| format!("a{a}pos{i}")).collect(),
            negative: (0..n_pol).map(|i| format!("a{a}neg{i}")).collect(),
        })
        .collect();
    Ok(Lexicon { fillers, aspects })
}

/// Generate the corpus. Pure function of the config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Document>> {
    if cfg.num_docs == 0 || cfg.chunk_len == 0 {
        return Err(Error::InvalidParameter(
            "document count and chunk length must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::InvalidParameter(format!(
            "noise level {} outside [0, 1]",
            cfg.noise
        )));
    }
    let k = cfg.num_aspects;
    let min_doc = k * (cfg.chunk_len + MIN_GAP) + MIN_GAP;
    if min_doc > cfg.max_len {
        return Err(Error::Config(format!(
            "{k} chunks of {} tokens need {min_doc} positions, over the {} budget",
            cfg.chunk_len, cfg.max_len
        )));
    }
    let lex = build_lexicon(cfg.vocab_size, k)?;
    let mut rng = rng_for(cfg.seed, Stream::Synthetic);
    let mut docs = Vec::with_capacity(cfg.num_docs);

    for _ in 0..cfg.num_docs {
        let polarities: Vec<u8> = (0..k).map(|_| rng.random_range(0..2u8)).collect();
        let pos_count = polarities.iter().filter(|&&p| p == 1).count();
        let true_label = match (2 * pos_count).cmp(&k) {
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => polarities[0],
        };
        let label = if cfg.noise > 0.0 && rng.random::<f64>() < cfg.noise {
            1 - true_label
        } else {
            true_label
        };

        let mut tokens: Vec<String> = Vec::new();
        let mut annotations = BTreeMap::new();
        let mut aspect_labels = BTreeMap::new();
        for a in 0..k {
            // Keep enough budget for the remaining chunks at minimum gaps.
            let rest_min = (k - 1 - a) * (MIN_GAP + cfg.chunk_len) + MIN_GAP;
            let gap_max = MAX_GAP.min(cfg.max_len - tokens.len() - cfg.chunk_len - rest_min);
            let gap = rng.random_range(MIN_GAP..=gap_max);
            for _ in 0..gap {
                let f = rng.random_range(0..lex.fillers.len());
                tokens.push(lex.fillers[f].clone());
            }
            let start = tokens.len();
            let words = &lex.aspects[a];
            let pol_at = rng.random_range(0..cfg.chunk_len);
            for j in 0..cfg.chunk_len {
                if j == pol_at {
                    let pool = if polarities[a] == 1 {
                        &words.positive
                    } else {
                        &words.negative
                    };
                    tokens.push(pool[rng.random_range(0..pool.len())].clone());
                } else {
                    tokens.push(words.neutral[rng.random_range(0..words.neutral.len())].clone());
                }
            }
            let name = format!("aspect-{}", a + 1);
            annotations.insert(name.clone(), vec![(start, tokens.len() - 1)]);
            aspect_labels.insert(name, polarities[a]);
        }
        let tail_max = MAX_GAP.min(cfg.max_len - tokens.len());
        let tail = rng.random_range(MIN_GAP..=tail_max);
        for _ in 0..tail {
            let f = rng.random_range(0..lex.fillers.len());
            tokens.push(lex.fillers[f].clone());
        }

        docs.push(Document {
            text: tokens.join(" "),
            tokens,
            label,
            rating: None,
            aspect_labels,
            annotations,
        });
    }
    Ok(docs)
}

/// Brute-force label reconstruction from token text alone: count positive and
/// negative lexicon words, majority wins, ties go to the aspect-1 polarity
/// word. Independent of the generator's bookkeeping.
pub fn counting_oracle_label(tokens: &[String]) -> Option<u8> {
    let mut pos = 0usize;
    let mut neg = 0usize;
    let mut aspect1: Option<u8> = None;
    for tok in tokens {
        let Some(rest) = tok.strip_prefix('a') else { continue };
        let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits == 0 {
            continue;
        }
        let (aspect, tail) = rest.split_at(digits);
        let polarity = if tail.starts_with("pos") {
            1
        } else if tail.starts_with("neg") {
            0
        } else {
            continue;
        };
        if polarity == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        if aspect == "1" && aspect1.is_none() {
            aspect1 = Some(polarity);
        }
    }
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Some(1),
        std::cmp::Ordering::Less => Some(0),
        std::cmp::Ordering::Equal => aspect1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape_and_span_invariants() {
        let cfg = SyntheticConfig {
            num_docs: 300,
            num_aspects: 3,
            ..Default::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        assert_eq!(docs.len(), 300);
        for d in &docs {
            assert!(d.tokens.len() <= cfg.max_len);
            assert_eq!(d.annotations.len(), 3);
            assert_eq!(d.aspect_labels.len(), 3);
            let mut spans: Vec<(usize, usize)> = d
                .annotations
                .values()
                .flat_map(|v| v.iter().copied())
                .collect();
            spans.sort_unstable();
            for &(s, e) in &spans {
                assert!(s <= e && e < d.tokens.len());
                assert_eq!(e - s + 1, cfg.chunk_len);
            }
            for w in spans.windows(2) {
                assert!(w[1].0 > w[0].1, "gold spans overlap");
            }
        }
    }

    #[test]
    fn counting_oracle_agrees_at_zero_noise() {
        for k in [1usize, 2, 3] {
            let cfg = SyntheticConfig {
                num_docs: 500,
                num_aspects: k,
                noise: 0.0,
                seed: 5,
                ..Default::default()
            };
            let docs = generate_synthetic(&cfg).unwrap();
            for d in &docs {
                assert_eq!(
                    counting_oracle_label(&d.tokens),
                    Some(d.label),
                    "oracle mismatch at K={k}"
                );
            }
        }
    }

    #[test]
    fn noise_flips_expected_fraction() {
        let cfg = SyntheticConfig {
            num_docs: 2000,
            noise: 0.3,
            seed: 9,
            ..Default::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        let disagree = docs
            .iter()
            .filter(|d| counting_oracle_label(&d.tokens) != Some(d.label))
            .count();
        let frac = disagree as f64 / docs.len() as f64;
        assert!((frac - 0.3).abs() < 0.04, "flip fraction {frac}");
    }

    #[test]
    fn single_aspect_label_is_chunk_polarity() {
        let cfg = SyntheticConfig {
            num_docs: 200,
            num_aspects: 1,
            seed: 3,
            ..Default::default()
        };
        for d in generate_synthetic(&cfg).unwrap() {
            assert_eq!(d.label, d.aspect_labels["aspect-1"]);
        }
    }

    #[test]
    fn budget_and_parameter_errors() {
        let cfg = SyntheticConfig {
            num_aspects: 10,
            chunk_len: 20,
            max_len: 100,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticConfig {
            vocab_size: 10,
            num_aspects: 3,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
        let cfg = SyntheticConfig {
            noise: 1.5,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            num_docs: 50,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn vocabulary_budget_respected() {
        let cfg = SyntheticConfig {
            num_docs: 400,
            vocab_size: 100,
            seed: 1,
            ..Default::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        let mut distinct: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
        for d in &docs {
            for t in &d.tokens {
                distinct.insert(t);
            }
        }
        assert!(distinct.len() <= 100, "{} distinct tokens", distinct.len());
    }
}

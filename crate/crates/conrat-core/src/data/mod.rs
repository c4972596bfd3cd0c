//! Corpus ingestion, preparation, and the synthetic verification corpus.
//!
//! Interchange format is JSON-lines, one record per document:
//!
//! ```json
//! {"schema": 1, "text": "...", "label": 1, "rating": 4.0,
//!  "aspects": {"aroma": 1}, "annotations": {"aroma": [[3, 7]]}}
//! ```
//!
//! Annotation spans are 1-indexed inclusive token ranges in the file and
//! 0-indexed inclusive in memory.

pub mod embeddings;
pub mod synthetic;
pub mod vocab;

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
pub use vocab::{tokenize, tokenize_with_offsets, Vocabulary, PAD, UNK};

pub const SCHEMA_VERSION: u32 = 1;

/// One review with its tokens and optional aspect supervision. Only `label`
/// is used for training; aspect labels and annotations feed evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub text: String,
    pub tokens: Vec<String>,
    pub label: u8,
    pub rating: Option<f64>,
    /// Aspect name -> binary aspect label.
    pub aspect_labels: BTreeMap<String, u8>,
    /// Aspect name -> 0-based inclusive token spans, pairwise disjoint
    /// within an aspect.
    pub annotations: BTreeMap<String, Vec<(usize, usize)>>,
}

impl Document {
    /// Gold rationale tokens across all aspects, deduplicated.
    pub fn gold_tokens(&self) -> Vec<usize> {
        let mut cover = vec![false; self.tokens.len()];
        for spans in self.annotations.values() {
            for &(s, e) in spans {
                for t in s..=e.min(self.tokens.len().saturating_sub(1)) {
                    cover[t] = true;
                }
            }
        }
        (0..self.tokens.len()).filter(|&t| cover[t]).collect()
    }
}

/// On-disk record. Absent optional fields round-trip as absent.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema: Option<u32>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aspects: Option<BTreeMap<String, u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<BTreeMap<String, Vec<(usize, usize)>>>,
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Read a JSONL corpus file. Tokenizes (lowercase whitespace split),
/// truncates each document to `truncation` tokens when it is non-zero, and
/// validates labels and spans. Line numbers in errors are 1-based.
pub fn load_jsonl(path: &Path, truncation: usize) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line)
            .map_err(|e| format_err(path, lineno, e.to_string()))?;
        if let Some(s) = rec.schema {
            if s != SCHEMA_VERSION {
                return Err(format_err(path, lineno, format!("unsupported schema {s}")));
            }
        }
        let label = rec
            .label
            .ok_or_else(|| format_err(path, lineno, "missing label"))?;
        if label > 1 {
            return Err(format_err(path, lineno, format!("label must be 0 or 1, got {label}")));
        }
        let mut tokens = tokenize(&rec.text);
        let full_len = tokens.len();
        if truncation > 0 && tokens.len() > truncation {
            tokens.truncate(truncation);
        }
        if tokens.is_empty() {
            return Err(format_err(path, lineno, "document has no tokens"));
        }
        let mut annotations = BTreeMap::new();
        for (aspect, spans) in rec.annotations.unwrap_or_default() {
            let mut converted = Vec::with_capacity(spans.len());
            for (s1, e1) in spans {
                if s1 == 0 || e1 < s1 {
                    return Err(format_err(
                        path,
                        lineno,
                        format!("bad span [{s1}, {e1}]: spans are 1-indexed inclusive"),
                    ));
                }
                let (s0, e0) = (s1 - 1, e1 - 1);
                // Bounds are checked against the full document; spans past
                // the truncation point are clipped or dropped, not errors.
                if e0 >= full_len {
                    return Err(format_err(
                        path,
                        lineno,
                        format!("span [{s1}, {e1}] exceeds document length {full_len}"),
                    ));
                }
                if s0 >= tokens.len() {
                    continue;
                }
                converted.push((s0, e0.min(tokens.len() - 1)));
            }
            converted.sort_unstable();
            for w in converted.windows(2) {
                if w[1].0 <= w[0].1 {
                    return Err(format_err(
                        path,
                        lineno,
                        format!("overlapping spans in aspect {aspect}"),
                    ));
                }
            }
            if !converted.is_empty() {
                annotations.insert(aspect, converted);
            }
        }
        docs.push(Document {
            text: rec.text,
            tokens,
            label,
            rating: rec.rating,
            aspect_labels: rec.aspects.unwrap_or_default(),
            annotations,
        });
    }
    Ok(docs)
}

/// Write documents as JSONL (schema 1, spans converted back to 1-indexed).
pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        let annotations: BTreeMap<String, Vec<(usize, usize)>> = doc
            .annotations
            .iter()
            .map(|(a, spans)| {
                (
                    a.clone(),
                    spans.iter().map(|&(s, e)| (s + 1, e + 1)).collect(),
                )
            })
            .collect();
        let rec = RawRecord {
            schema: Some(SCHEMA_VERSION),
            text: doc.text.clone(),
            label: Some(doc.label),
            rating: doc.rating,
            aspects: if doc.aspect_labels.is_empty() {
                None
            } else {
                Some(doc.aspect_labels.clone())
            },
            annotations: if annotations.is_empty() {
                None
            } else {
                Some(annotations)
            },
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Dataset-specific rating binarization rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingRule {
    /// `<= 2` negative, `>= 3` positive, otherwise excluded.
    Beer,
    /// `>= 4` positive, `<= 2` negative, `3` excluded.
    Amazon,
}

impl std::str::FromStr for RatingRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beer" => Ok(RatingRule::Beer),
            "amazon" => Ok(RatingRule::Amazon),
            other => Err(Error::InvalidParameter(format!(
                "unknown rating rule: {other} (expected beer or amazon)"
            ))),
        }
    }
}

/// Map a raw star rating to a binary label, or `None` when the rule excludes
/// the middle of the scale.
pub fn binarize_rating(rating: f64, rule: RatingRule) -> Result<Option<u8>> {
    if !(0.5..=5.0).contains(&rating) {
        return Err(Error::InvalidParameter(format!(
            "rating {rating} outside the [0.5, 5] scale"
        )));
    }
    Ok(match rule {
        RatingRule::Beer => {
            if rating <= 2.0 {
                Some(0)
            } else if rating >= 3.0 {
                Some(1)
            } else {
                None
            }
        }
        RatingRule::Amazon => {
            if rating >= 4.0 {
                Some(1)
            } else if rating <= 2.0 {
                Some(0)
            } else {
                None
            }
        }
    })
}

/// Train/valid/test split. `balanced` subsamples to equal class counts and
/// interleaves labels so every contiguous cut is balanced within one
/// document.
pub fn split_corpus(
    mut docs: Vec<Document>,
    valid_frac: f64,
    test_frac: f64,
    balanced: bool,
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>, Vec<Document>)> {
    if !(0.0..1.0).contains(&valid_frac)
        || !(0.0..1.0).contains(&test_frac)
        || valid_frac + test_frac >= 1.0
    {
        return Err(Error::InvalidParameter(
            "split fractions must be in [0, 1) and leave room for train".into(),
        ));
    }
    use rand::seq::SliceRandom;
    let mut rng = rng_for(seed, Stream::Split);
    if balanced {
        let mut pos: Vec<Document> = Vec::new();
        let mut neg: Vec<Document> = Vec::new();
        for d in docs {
            if d.label == 1 {
                pos.push(d)
            } else {
                neg.push(d)
            }
        }
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let m = pos.len().min(neg.len());
        pos.truncate(m);
        neg.truncate(m);
        docs = Vec::with_capacity(2 * m);
        for (p, n) in pos.into_iter().zip(neg) {
            docs.push(p);
            docs.push(n);
        }
    } else {
        docs.shuffle(&mut rng);
    }
    let n = docs.len();
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_valid = (n as f64 * valid_frac).round() as usize;
    if n_test + n_valid >= n {
        return Err(Error::DegenerateInput(format!(
            "{n} documents cannot fill a {valid_frac}/{test_frac} split"
        )));
    }
    let test = docs.split_off(n - n_test);
    let valid = docs.split_off(docs.len() - n_valid);
    Ok((docs, valid, test))
}

/// Pseudo-annotations for pros/cons style reviews: the 50 tokens after the
/// first "pros:" marker and after the first "cons:" marker.
pub fn pros_cons_annotations(tokens: &[String]) -> BTreeMap<String, Vec<(usize, usize)>> {
    let mut out = BTreeMap::new();
    for (aspect, marker) in [("pros", "pros:"), ("cons", "cons:")] {
        if let Some(i) = tokens.iter().position(|t| t == marker) {
            if i + 1 < tokens.len() {
                let start = i + 1;
                let end = (i + 50).min(tokens.len() - 1);
                out.insert(aspect.to_string(), vec![(start, end)]);
            }
        }
    }
    out
}

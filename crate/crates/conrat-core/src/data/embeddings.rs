//! Word-embedding table construction.
//!
//! Input is the plain-text word-vector format: one line per word, the token
//! followed by D space-separated decimals. Vocabulary rows missing from the
//! file are drawn from N(0, 0.1^2) in vocabulary order, so the table is a
//! pure function of (file, vocabulary, seed). The pad row stays zero.

use std::io::BufRead;
use std::path::Path;

use ndarray::Array2;

use crate::data::vocab::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::rng::{normal, rng_for, Stream};

/// Per-coordinate scale for rows not found in the vector file.
pub const OOV_STD: f64 = 0.1;

/// Build the V x D table for `vocab` from a vector file.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<Array2<f64>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let dim = vocab.dim;
    let mut found: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> =
            parts.map(|p| p.parse::<f64>()).collect();
        let values = values.map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: lineno,
            message: format!("bad embedding value: {e}"),
        })?;
        if values.len() != dim {
            return Err(Error::Format {
                path: path.display().to_string(),
                line: lineno,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if vocab.token(id) == token {
            found[id] = Some(values);
        }
    }
    Ok(fill_table(vocab, found, seed))
}

/// Table with every row drawn from the seeded initializer (no vector file).
pub fn random_embeddings(vocab: &Vocabulary, seed: u64) -> Array2<f64> {
    load_from_entries(vocab, std::iter::empty(), seed)
}

/// Build the table from in-memory (token, vector) pairs. Used by tests and
/// the synthetic pipeline.
pub fn load_from_entries<'a, I>(vocab: &Vocabulary, entries: I, seed: u64) -> Array2<f64>
where
    I: IntoIterator<Item = (&'a str, Vec<f64>)>,
{
    let mut found: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (token, values) in entries {
        let id = vocab.id(token);
        if vocab.token(id) == token {
            found[id] = Some(values);
        }
    }
    fill_table(vocab, found, seed)
}

fn fill_table(vocab: &Vocabulary, found: Vec<Option<Vec<f64>>>, seed: u64) -> Array2<f64> {
    let dim = vocab.dim;
    let mut table = Array2::zeros((vocab.len(), dim));
    let mut rng = rng_for(seed, Stream::EmbeddingInit);
    for id in 0..vocab.len() {
        match (&found[id], id) {
            (_, PAD) => {} // pad row stays zero
            (Some(values), _) => {
                for (c, &v) in values.iter().enumerate() {
                    table[(id, c)] = v;
                }
            }
            (None, _) => {
                for c in 0..dim {
                    table[(id, c)] = normal(&mut rng, 0.0, OOV_STD);
                }
            }
        }
    }
    table
}

//! Versioned JSON checkpoints. Parameters round-trip bit-exactly (finite f64
//! values serialize to shortest-form decimals that parse back identically),
//! and each checkpoint is bound to its vocabulary by content hash.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ConRATParams;
use crate::training::teacher::TeacherParams;
use crate::training::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub vocab_tokens: Vec<String>,
    pub vocab_dim: usize,
    pub vocab_hash: String,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub params: ConRATParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherCheckpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub vocab_tokens: Vec<String>,
    pub vocab_dim: usize,
    pub vocab_hash: String,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub params: TeacherParams,
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Rebuild the vocabulary a checkpoint was trained with, refusing a token
/// list whose recomputed hash does not match the stored one.
fn verify_vocab(tokens: &[String], dim: usize, stored_hash: &str) -> Result<Vocabulary> {
    let vocab = Vocabulary::from_tokens(tokens.to_vec(), dim)?;
    let actual = vocab.hash();
    if actual != stored_hash {
        return Err(Error::VocabMismatch {
            expected: stored_hash.to_string(),
            actual,
        });
    }
    Ok(vocab)
}

fn check_version(version: u32, path: &Path) -> Result<()> {
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            line: 1,
            message: format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            ),
        });
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        vocab: &Vocabulary,
        params: ConRATParams,
        best_epoch: usize,
        dev_accuracy: f64,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            vocab_tokens: vocab.tokens().to_vec(),
            vocab_dim: vocab.dim,
            vocab_hash: vocab.hash(),
            best_epoch,
            dev_accuracy,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let ckpt: Checkpoint = load_json(path)?;
        check_version(ckpt.version, path)?;
        let vocab = verify_vocab(&ckpt.vocab_tokens, ckpt.vocab_dim, &ckpt.vocab_hash)?;
        if ckpt.params.dims.vocab != vocab.len() {
            return Err(Error::VocabMismatch {
                expected: ckpt.params.dims.vocab.to_string(),
                actual: vocab.len().to_string(),
            });
        }
        Ok((ckpt, vocab))
    }
}

impl TeacherCheckpoint {
    pub fn new(
        config: TrainConfig,
        vocab: &Vocabulary,
        params: TeacherParams,
        best_epoch: usize,
        dev_accuracy: f64,
    ) -> Self {
        TeacherCheckpoint {
            version: CHECKPOINT_VERSION,
            config,
            vocab_tokens: vocab.tokens().to_vec(),
            vocab_dim: vocab.dim,
            vocab_hash: vocab.hash(),
            best_epoch,
            dev_accuracy,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let ckpt: TeacherCheckpoint = load_json(path)?;
        check_version(ckpt.version, path)?;
        let vocab = verify_vocab(&ckpt.vocab_tokens, ckpt.vocab_dim, &ckpt.vocab_hash)?;
        if ckpt.params.vocab() != vocab.len() {
            return Err(Error::VocabMismatch {
                expected: ckpt.params.vocab().to_string(),
                actual: vocab.len().to_string(),
            });
        }
        Ok((ckpt, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConRATParams, ModelDims};
    use crate::training::TrainConfig;
    use ndarray::Array2;

    fn tiny_vocab() -> Vocabulary {
        let seqs: Vec<Vec<String>> =
            vec![vec!["good".into(), "bad".into(), "story".into(), "plot".into()]];
        Vocabulary::build(seqs.iter().map(|s| s.as_slice()), 6)
    }

    fn tiny_params(vocab: usize) -> ConRATParams {
        let dims = ModelDims {
            vocab,
            embed: 6,
            hidden: 4,
            num_concepts: 2,
            chunk_len: 3,
            selector_cnn: false,
        };
        let embedding = Array2::from_shape_fn((vocab, 6), |(i, j)| {
            if i == 0 {
                0.0
            } else {
                ((i * 7 + j * 3) % 13) as f64 / 13.0 - 0.431
            }
        });
        ConRATParams::init(dims, embedding, 9).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let vocab = tiny_vocab();
        let params = tiny_params(vocab.len());
        let ckpt = Checkpoint::new(TrainConfig::default(), &vocab, params, 4, 0.8125);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();

        let (loaded, loaded_vocab) = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.best_epoch, 4);
        assert_eq!(loaded.dev_accuracy.to_bits(), 0.8125f64.to_bits());
        assert_eq!(loaded_vocab.tokens(), vocab.tokens());
        let before = ckpt.params.visit();
        let after = loaded.params.visit();
        assert_eq!(before.len(), after.len());
        for ((name_a, a), (name_b, b)) in before.iter().zip(after.iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(a.dim(), b.dim());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name_a} changed across save/load");
            }
        }
    }

    #[test]
    fn tampered_vocabulary_is_rejected() {
        let vocab = tiny_vocab();
        let params = tiny_params(vocab.len());
        let ckpt = Checkpoint::new(TrainConfig::default(), &vocab, params, 0, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("\"story\"", "\"cinema\"");
        assert_ne!(text, tampered);
        std::fs::write(&path, tampered).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::VocabMismatch { .. }) => {}
            other => panic!("expected vocabulary mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let vocab = tiny_vocab();
        let params = tiny_params(vocab.len());
        let mut ckpt = Checkpoint::new(TrainConfig::default(), &vocab, params, 0, 0.5);
        ckpt.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("version 99")),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}

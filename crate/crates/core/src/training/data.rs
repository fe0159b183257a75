use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Raw bytes used as token ids `0..=255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Corpus {
            name: name.into(),
            bytes,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Corpus::new(path.display().to_string(), bytes))
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Splits off the last `frac` of the bytes as held-out data.
    pub fn split_tail(&self, frac: f64) -> (Corpus, Corpus) {
        let cut = self.len() - ((self.len() as f64 * frac.clamp(0.0, 1.0)) as usize);
        (
            Corpus::new(format!("{}:train", self.name), self.bytes[..cut].to_vec()),
            Corpus::new(format!("{}:heldout", self.name), self.bytes[cut..].to_vec()),
        )
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.bytes.iter().map(|&b| usize::from(b)).collect()
    }
}

/// `batch` windows of `seq_len + 1` tokens at uniform random offsets.
pub fn sample_batch(corpus: &Corpus, batch: usize, seq_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let span = seq_len + 1;
    if corpus.len() < span {
        return Err(Error::config(format!(
            "corpus `{}` has {} bytes, fewer than seq_len+1 = {span}",
            corpus.name,
            corpus.len()
        )));
    }
    let hi = corpus.len() - span;
    Ok((0..batch)
        .map(|_| {
            let s = rng.gen_range(0..=hi);
            corpus.bytes[s..s + span].iter().map(|&b| usize::from(b)).collect()
        })
        .collect())
}

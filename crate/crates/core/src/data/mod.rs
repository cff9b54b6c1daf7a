//! Byte-level corpora and deterministic batch sampling.

pub mod synth;

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::indexed_substream;

pub const BYTE_VOCAB: usize = 256;

/// A token stream where every byte is one token id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<u8>,
    source: Option<PathBuf>,
}

impl Corpus {
    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let tokens = bytes.into();
        if tokens.is_empty() {
            return Err(Error::Input("corpus is empty".into()));
        }
        Ok(Corpus {
            tokens,
            source: None,
        })
    }

    /// Reads `path` as raw bytes, keeping at most `max_bytes`.
    pub fn load(path: &Path, max_bytes: Option<usize>) -> Result<Self> {
        let mut bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if let Some(max) = max_bytes {
            bytes.truncate(max);
        }
        if bytes.is_empty() {
            return Err(Error::Input(format!("corpus {} is empty", path.display())));
        }
        Ok(Corpus {
            tokens: bytes,
            source: Some(path.to_path_buf()),
        })
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&b| usize::from(b)).collect()
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Splits off the trailing `fraction` of the stream as a held-out part.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::Config(format!(
                "holdout fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let n = self.tokens.len();
        if n < 2 {
            return Err(Error::Input("corpus too short to split".into()));
        }
        let cut = n - ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        let part = |t: &[u8]| Corpus {
            tokens: t.to_vec(),
            source: self.source.clone(),
        };
        Ok((part(&self.tokens[..cut]), part(&self.tokens[cut..])))
    }

    fn check_len(&self, seq_len: usize) -> Result<()> {
        if seq_len == 0 || self.tokens.len() < seq_len + 1 {
            return Err(Error::Input(format!(
                "corpus of {} tokens is too short for sequences of {seq_len} (+1 target)",
                self.tokens.len()
            )));
        }
        Ok(())
    }

    /// Inputs and shifted targets starting at `offset`.
    pub fn window(&self, offset: usize, seq_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.check_len(seq_len)?;
        if offset + seq_len + 1 > self.tokens.len() {
            return Err(Error::Input(format!(
                "window at {offset} of length {seq_len} runs past the corpus end"
            )));
        }
        let w = &self.tokens[offset..offset + seq_len + 1];
        let ids = |s: &[u8]| s.iter().map(|&b| usize::from(b)).collect();
        Ok((ids(&w[..seq_len]), ids(&w[1..])))
    }

    /// The batch for `index` of the stream seeded by `seed`; any index can be
    /// produced directly, which makes resumed runs see the same data.
    pub fn batch_at(&self, seed: u64, index: u64, batch_size: usize, seq_len: usize) -> Result<Batch> {
        self.check_len(seq_len)?;
        if batch_size == 0 {
            return Err(Error::Input("batch_size must be positive".into()));
        }
        let max_offset = self.tokens.len() - seq_len - 1;
        let mut rng = indexed_substream(seed, "data", index);
        let mut batch = Batch {
            inputs: Vec::with_capacity(batch_size * seq_len),
            targets: Vec::with_capacity(batch_size * seq_len),
            offsets: Vec::with_capacity(batch_size),
            batch_size,
            seq_len,
        };
        for _ in 0..batch_size {
            let offset = rng.random_range(0..=max_offset);
            let (x, y) = self.window(offset, seq_len)?;
            batch.inputs.extend(x);
            batch.targets.extend(y);
            batch.offsets.push(offset);
        }
        Ok(batch)
    }

    /// Endless stream of batches `0, 1, 2, ...`.
    pub fn batches(&self, batch_size: usize, seq_len: usize, seed: u64) -> Result<Batches<'_>> {
        self.batch_at(seed, 0, batch_size, seq_len)?;
        Ok(Batches {
            corpus: self,
            batch_size,
            seq_len,
            seed,
            next: 0,
        })
    }
}

/// Row-major `[batch_size × seq_len]` inputs and next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub offsets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

pub struct Batches<'a> {
    corpus: &'a Corpus,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    next: u64,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self
            .corpus
            .batch_at(self.seed, self.next, self.batch_size, self.seq_len)
            .expect("validated when the stream was created");
        self.next += 1;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(Corpus::load(&p, None).unwrap().ids(), vec![97, 98, 99]);
        assert_eq!(Corpus::load(&p, Some(2)).unwrap().ids(), vec![97, 98]);
        std::fs::write(&p, "é€").unwrap();
        assert_eq!(Corpus::load(&p, None).unwrap().tokens(), "é€".as_bytes());
        std::fs::write(&p, "").unwrap();
        assert!(matches!(Corpus::load(&p, None), Err(Error::Input(_))));
        assert!(matches!(
            Corpus::load(&dir.path().join("missing"), None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn window_shifts_by_one() {
        let c = Corpus::from_bytes((0u8..10).collect::<Vec<_>>()).unwrap();
        let (x, y) = c.window(0, 4).unwrap();
        assert_eq!(x, vec![0, 1, 2, 3]);
        assert_eq!(y, vec![1, 2, 3, 4]);
        assert!(c.window(6, 4).is_err());
        assert!(c.window(5, 4).is_ok());
    }

    #[test]
    fn stream_is_seeded_and_in_bounds() {
        let c = Corpus::from_bytes((0..200u32).map(|i| (i * 7 % 251) as u8).collect::<Vec<_>>()).unwrap();
        let a: Vec<Batch> = c.batches(3, 16, 9).unwrap().take(400).collect();
        let b: Vec<Batch> = c.batches(3, 16, 9).unwrap().take(400).collect();
        assert_eq!(a, b);
        let other: Vec<Batch> = c.batches(3, 16, 10).unwrap().take(5).collect();
        assert_ne!(a[..5], other[..]);
        let mut seen_max = 0;
        for batch in &a {
            for (i, &o) in batch.offsets.iter().enumerate() {
                assert!(o <= c.total_tokens() - 16 - 1);
                seen_max = seen_max.max(o);
                let row = i * 16;
                assert_eq!(&batch.inputs[row + 1..row + 16], &batch.targets[row..row + 15]);
            }
        }
        assert_eq!(seen_max, c.total_tokens() - 17);
        assert_eq!(a[7], c.batch_at(9, 7, 3, 16).unwrap());
    }

    #[test]
    fn too_short_corpus() {
        let c = Corpus::from_bytes(vec![1, 2, 3]).unwrap();
        assert!(matches!(c.batches(1, 3, 0), Err(Error::Input(_))));
    }

    #[test]
    fn holdout_is_the_tail() {
        let c = Corpus::from_bytes((0u8..100).collect::<Vec<_>>()).unwrap();
        let (train, held) = c.split_holdout(0.1).unwrap();
        assert_eq!(train.total_tokens(), 90);
        assert_eq!(held.tokens()[0], 90);
    }
}

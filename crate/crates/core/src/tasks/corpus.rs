//! Token corpora for the language-model task.  The synthetic generator
//! plants a periodic copy structure: most tokens repeat a fixed
//! remapping of the token one period earlier, so predicting well requires
//! knowing how far back one period is — position information matters.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, SeqPeError};
use crate::numerics::rng::{streams, StreamRng};

/// A flat token stream with its vocabulary size.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub vocab: usize,
}

impl Corpus {
    /// Synthetic corpus: token `t` is `perm(token[t - period])` with
    /// probability `copy_prob`, uniform noise otherwise (and for the first
    /// period).  Deterministic per seed.
    pub fn period_copy(
        seed: u64,
        len: usize,
        vocab: usize,
        period: usize,
        copy_prob: f64,
    ) -> Result<Corpus> {
        if vocab < 2 {
            return Err(SeqPeError::Dataset(format!(
                "vocabulary needs at least 2 tokens, got {vocab}"
            )));
        }
        if period == 0 || len < period {
            return Err(SeqPeError::Dataset(format!(
                "corpus length {len} must cover at least one period of {period}"
            )));
        }
        if !(0.0..=1.0).contains(&copy_prob) {
            return Err(SeqPeError::Dataset(format!(
                "copy probability must lie in [0, 1], got {copy_prob}"
            )));
        }
        let mut rng = StreamRng::new(seed).stream(streams::DATA);
        let mut perm: Vec<usize> = (0..vocab).collect();
        perm.shuffle(&mut rng);
        let mut tokens = Vec::with_capacity(len);
        for t in 0..len {
            let tok = if t >= period && rng.gen_range(0.0..1.0) < copy_prob {
                perm[tokens[t - period]]
            } else {
                rng.gen_range(0..vocab)
            };
            tokens.push(tok);
        }
        Ok(Corpus { tokens, vocab })
    }

    /// Fully deterministic successor corpus (`token[t+1]` is a function of
    /// `token[t]`), the easiest possible next-token target.
    pub fn bigram_cycle(vocab: usize, len: usize) -> Result<Corpus> {
        if vocab < 2 || len == 0 {
            return Err(SeqPeError::Dataset(format!(
                "bigram corpus needs vocab >= 2 and length >= 1, got {vocab} / {len}"
            )));
        }
        Ok(Corpus {
            tokens: (0..len).map(|t| t % vocab).collect(),
            vocab,
        })
    }

    /// Any byte file as a token stream at vocabulary 256.
    pub fn from_bytes_file(path: &std::path::Path) -> Result<Corpus> {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() {
            return Err(SeqPeError::Dataset(format!(
                "corpus file {} is empty",
                path.display()
            )));
        }
        Ok(Corpus {
            tokens: bytes.into_iter().map(|b| b as usize).collect(),
            vocab: 256,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `count` windows of `width` tokens starting at uniform offsets.
    pub fn sample_windows(
        &self,
        count: usize,
        width: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Vec<Vec<usize>>> {
        if width < 2 {
            return Err(SeqPeError::Dataset(format!(
                "window width {width} leaves nothing to predict"
            )));
        }
        if width > self.len() {
            return Err(SeqPeError::Dataset(format!(
                "window width {width} exceeds corpus length {}",
                self.len()
            )));
        }
        let last_start = self.len() - width;
        Ok((0..count)
            .map(|_| {
                let start = rng.gen_range(0..=last_start);
                self.tokens[start..start + width].to_vec()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = Corpus::period_copy(7, 2000, 64, 16, 0.9).unwrap();
        let b = Corpus::period_copy(7, 2000, 64, 16, 0.9).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let c = Corpus::period_copy(8, 2000, 64, 16, 0.9).unwrap();
        assert_ne!(a.tokens, c.tokens);
        assert!(a.tokens.iter().all(|&t| t < 64));
    }

    #[test]
    fn copy_structure_appears_at_the_configured_rate() {
        let corpus = Corpus::period_copy(3, 50_000, 64, 16, 0.9).unwrap();
        // Recover the remapping by majority vote, then measure how often
        // it explains a token.
        let mut votes = vec![vec![0usize; 64]; 64];
        for t in 16..corpus.len() {
            votes[corpus.tokens[t - 16]][corpus.tokens[t]] += 1;
        }
        let perm: Vec<usize> = votes
            .iter()
            .map(|row| row.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0)
            .collect();
        let hits = (16..corpus.len())
            .filter(|&t| corpus.tokens[t] == perm[corpus.tokens[t - 16]])
            .count();
        let rate = hits as f64 / (corpus.len() - 16) as f64;
        // Noise tokens also hit the mapping 1/64 of the time.
        let expect = 0.9 + 0.1 / 64.0;
        assert!((rate - expect).abs() < 0.02, "copy rate {rate} vs {expect}");
    }

    #[test]
    fn bigram_cycle_has_deterministic_successors() {
        let corpus = Corpus::bigram_cycle(8, 100).unwrap();
        for t in 0..corpus.len() - 1 {
            assert_eq!(corpus.tokens[t + 1], (corpus.tokens[t] + 1) % 8);
        }
        assert!(Corpus::bigram_cycle(1, 10).is_err());
    }

    #[test]
    fn windows_stay_inside_the_corpus() {
        let corpus = Corpus::period_copy(1, 500, 32, 8, 0.5).unwrap();
        let mut rng = StreamRng::new(1).stream(streams::BATCH);
        let windows = corpus.sample_windows(20, 64, &mut rng).unwrap();
        assert_eq!(windows.len(), 20);
        for w in &windows {
            assert_eq!(w.len(), 64);
            // Every window occurs verbatim somewhere in the stream.
            assert!(corpus
                .tokens
                .windows(64)
                .any(|chunk| chunk == w.as_slice()));
        }
        assert!(corpus.sample_windows(1, 501, &mut rng).is_err());
        assert!(corpus.sample_windows(1, 1, &mut rng).is_err());
    }

    #[test]
    fn byte_files_tokenize_at_vocab_256() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        std::fs::write(&path, b"hello \xff\x00 world").unwrap();
        let corpus = Corpus::from_bytes_file(&path).unwrap();
        assert_eq!(corpus.vocab, 256);
        assert_eq!(corpus.tokens[0], b'h' as usize);
        assert_eq!(corpus.tokens[6], 255);
        assert_eq!(corpus.tokens[7], 0);
        let empty = dir.path().join("empty.bin");
        std::fs::write(&empty, b"").unwrap();
        assert!(Corpus::from_bytes_file(&empty).is_err());
    }
}

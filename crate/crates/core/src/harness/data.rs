//! Byte-level corpus handling and seeded batch sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TokenIds;

/// 256 byte values plus one padding id.
pub const VOCAB: usize = 257;
pub const PAD: usize = 256;

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize_bytes`]; padding ids are dropped.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .filter(|&&id| id != PAD)
        .enumerate()
        .map(|(pos, &id)| {
            u8::try_from(id).map_err(|_| Error::Vocab {
                id,
                pos,
                vocab: VOCAB,
            })
        })
        .collect()
}

/// Entropy of the byte unigram distribution, in bits per byte.
pub fn unigram_entropy_bits(ids: &[usize]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let mut counts = [0u64; VOCAB];
    for &id in ids {
        counts[id.min(PAD)] += 1;
    }
    let n = ids.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Training tokens plus the held-out tail of the corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl Corpus {
    /// Splits off the last `heldout_frac` of the tokens.
    pub fn split(ids: Vec<usize>, heldout_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&heldout_frac) {
            return Err(Error::Config(format!(
                "heldout_frac must lie in [0, 1), got {heldout_frac}"
            )));
        }
        let cut = ids.len() - (ids.len() as f64 * heldout_frac).round() as usize;
        let mut train = ids;
        let heldout = train.split_off(cut);
        Ok(Corpus { train, heldout })
    }

    pub fn from_file(path: &std::path::Path, heldout_frac: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Corpus::split(tokenize_bytes(&bytes), heldout_frac)
    }
}

/// Generator position, enough to resume a sampler exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Stored as a string since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

/// Draws training rows at uniform random offsets.
///
/// Offsets are drawn as if every row needed `seq_len + reserve + 1` tokens,
/// so runs that differ only in how many lookahead tokens they consume
/// (at most `reserve`) see identical windows.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    seed: u64,
    seq_len: usize,
    reserve: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, seq_len: usize, reserve: usize) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            seq_len,
            reserve,
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&mut self, s: &RngState) -> Result<()> {
        let pos: u128 = s
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad generator position `{}`", s.word_pos)))?;
        self.seed = s.seed;
        self.rng = ChaCha8Rng::seed_from_u64(s.seed);
        self.rng.set_stream(s.stream);
        self.rng.set_word_pos(pos);
        Ok(())
    }

    /// `batch` rows of `lookahead + seq_len + 1` tokens each.
    pub fn sample(&mut self, data: &[usize], batch: usize, lookahead: usize) -> Result<TokenIds> {
        if lookahead > self.reserve {
            return Err(Error::Config(format!(
                "{lookahead} lookahead tokens exceed the sampler reserve of {}",
                self.reserve
            )));
        }
        let span = self.seq_len + self.reserve + 1;
        if data.len() < span {
            return Err(Error::Config(format!(
                "training data holds {} tokens, at least {span} needed",
                data.len()
            )));
        }
        let row = self.seq_len + lookahead + 1;
        let mut ids = Vec::with_capacity(batch * row);
        for _ in 0..batch {
            let off = self.rng.random_range(0..=data.len() - span);
            ids.extend_from_slice(&data[off..off + row]);
        }
        TokenIds::new(batch, row, ids)
    }
}

/// Consecutive evaluation rows of `row_len` tokens advancing by `seq_len`,
/// so every scored target appears once. At most `max_rows` rows.
pub fn eval_rows(
    data: &[usize],
    seq_len: usize,
    row_len: usize,
    max_rows: usize,
) -> Vec<Vec<usize>> {
    let mut rows = Vec::new();
    let mut off = 0;
    while off + row_len <= data.len() && rows.len() < max_rows {
        rows.push(data[off..off + row_len].to_vec());
        off += seq_len;
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize_bytes(b"AB"), vec![65, 66]);
        assert!(tokenize_bytes(b"").is_empty());
        assert_eq!(detokenize(&[72, PAD, 105]).unwrap(), b"Hi");
        assert!(detokenize(&[300]).is_err());
    }

    #[test]
    fn entropy_of_known_distributions() {
        assert_eq!(unigram_entropy_bits(&[7; 10]), 0.0);
        assert!((unigram_entropy_bits(&[0, 1, 2, 3]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn split_keeps_tail() {
        let c = Corpus::split((0..100).collect(), 0.1).unwrap();
        assert_eq!(c.train.len(), 90);
        assert_eq!(c.heldout[0], 90);
        assert!(Corpus::split(vec![1], 1.0).is_err());
    }

    #[test]
    fn sampler_resumes_exactly() {
        let data: Vec<usize> = (0..500).map(|i| i % 251).collect();
        let mut a = BatchSampler::new(9, 16, 4);
        a.sample(&data, 3, 2).unwrap();
        let mut b = BatchSampler::new(0, 16, 4);
        b.restore(&a.state()).unwrap();
        assert_eq!(
            a.sample(&data, 4, 2).unwrap(),
            b.sample(&data, 4, 2).unwrap()
        );
    }

    #[test]
    fn lookahead_does_not_shift_offsets() {
        let data: Vec<usize> = (0..400).collect();
        let mut short = BatchSampler::new(3, 10, 8);
        let mut long = BatchSampler::new(3, 10, 8);
        let s = short.sample(&data, 5, 0).unwrap();
        let l = long.sample(&data, 5, 8).unwrap();
        for r in 0..5 {
            assert_eq!(s.row(r), &l.row(r)[..11]);
        }
        assert!(short.sample(&data, 1, 9).is_err());
    }

    #[test]
    fn eval_rows_stride_by_seq_len() {
        let rows = eval_rows(&(0..20).collect::<Vec<_>>(), 5, 7, 10);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1][0], 5);
    }
}

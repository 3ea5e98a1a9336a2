use std::fmt;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::Tokenizer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

/// A tokenized corpus split into a leading train range and a trailing
/// validation range.
#[derive(Debug, Clone)]
pub struct Dataset {
    tokens: Vec<usize>,
    train: Range<usize>,
    val: Range<usize>,
}

impl Dataset {
    /// The last `ceil(val_frac * len)` tokens form the validation range.
    pub fn new(tokens: Vec<usize>, val_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_frac) {
            return Err(Error::config(format!("val_frac must be in [0, 1), got {val_frac}")));
        }
        let n = tokens.len();
        let n_val = (val_frac * n as f64).ceil() as usize;
        Ok(Dataset {
            train: 0..n - n_val,
            val: n - n_val..n,
            tokens,
        })
    }

    pub fn from_bytes(bytes: &[u8], tokenizer: &Tokenizer, val_frac: f64) -> Result<Self> {
        Self::new(tokenizer.encode(bytes)?, val_frac)
    }

    pub fn from_file(path: &Path, tokenizer: &Tokenizer, val_frac: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, tokenizer, val_frac)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
        }
    }

    pub fn tokens(&self, split: Split) -> &[usize] {
        &self.tokens[self.range(split)]
    }

    /// Whether `split` holds at least one window of `seq_len`.
    pub fn supports(&self, split: Split, seq_len: usize) -> bool {
        self.range(split).len() > seq_len + 1
    }
}

/// `batch` windows of `seq_len` input ids with next-token targets, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    /// Window start offsets within the split.
    pub starts: Vec<usize>,
}

/// Endless stream of randomly placed windows (sampled with replacement).
///
/// Window starts are drawn uniformly from `[0, len - seq_len - 1)`, so a
/// split of length `len` must exceed `seq_len + 1`.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    tokens: &'a [usize],
    seq_len: usize,
    batch: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

/// Batches from one split, deterministic in `(seed, split)`.
pub fn make_batches(data: &Dataset, seq_len: usize, batch: usize, split: Split, seed: u64) -> Result<BatchStream<'_>> {
    let tokens = data.tokens(split);
    if seq_len == 0 || batch == 0 {
        return Err(Error::config("seq_len and batch size must be positive"));
    }
    if tokens.len() <= seq_len + 1 {
        return Err(Error::Data(format!(
            "{split} split has {} tokens; windows of {seq_len} need more than {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    Ok(BatchStream {
        tokens,
        seq_len,
        batch,
        seed,
        rng,
    })
}

impl BatchStream<'_> {
    pub fn n_windows(&self) -> usize {
        self.tokens.len() - self.seq_len - 1
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position of the underlying random stream, for checkpoints.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    pub fn next_batch(&mut self) -> Batch {
        let (t, n) = (self.seq_len, self.n_windows());
        let mut inputs = Vec::with_capacity(self.batch * t);
        let mut targets = Vec::with_capacity(self.batch * t);
        let mut starts = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let s = self.rng.random_range(0..n);
            inputs.extend_from_slice(&self.tokens[s..s + t]);
            targets.extend_from_slice(&self.tokens[s + 1..s + t + 1]);
            starts.push(s);
        }
        Batch {
            inputs,
            targets,
            batch: self.batch,
            seq_len: t,
            starts,
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

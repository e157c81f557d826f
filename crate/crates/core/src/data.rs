//! Byte-level corpora and synthetic tasks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VAL_FRACTION: f64 = 0.05;
const COPY_SEPARATOR: usize = b'|' as usize;

/// A `[batch, seq]` block of token ids with next-token targets; `None`
/// targets are excluded from the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl TokenBatch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let seq = samples
            .first()
            .map(|s| s.input.len())
            .ok_or_else(|| Error::Empty("batch".into()))?;
        let mut inputs = Vec::with_capacity(samples.len() * seq);
        let mut targets = Vec::with_capacity(samples.len() * seq);
        for s in samples {
            if s.input.len() != seq || s.target.len() != seq {
                return Err(Error::shape("batch", &[s.input.len()], &[seq]));
            }
            inputs.extend_from_slice(&s.input);
            targets.extend_from_slice(&s.target);
        }
        Ok(Self {
            batch: samples.len(),
            seq,
            inputs,
            targets,
        })
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub input: Vec<usize>,
    pub target: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    CharLm,
    Copy,
    ModularAdd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: TaskKind,
    /// Text file for `char-lm`; when absent a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub copy_len: usize,
    pub copy_alphabet: usize,
    pub copy_samples: usize,
    pub modulus: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::CharLm,
            corpus: None,
            synthetic_bytes: 1 << 20,
            copy_len: 8,
            copy_alphabet: 16,
            copy_samples: 20_000,
            modulus: 23,
            seed: 0,
        }
    }
}

pub fn ingest_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Empty(format!("corpus {}", path.display())));
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

/// Non-overlapping windows of `context + 1` tokens, each giving `context`
/// next-token pairs.
pub fn next_token_samples(tokens: &[usize], context: usize) -> Vec<Sample> {
    if context == 0 || tokens.len() < context + 1 {
        return Vec::new();
    }
    (0..=(tokens.len() - context - 1))
        .step_by(context)
        .map(|start| {
            let w = &tokens[start..start + context + 1];
            Sample {
                input: w[..context].to_vec(),
                target: w[1..].iter().map(|&t| Some(t)).collect(),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub seq: usize,
}

impl Dataset {
    /// Seeded shuffle, then a 95/5 split. A single sample serves as both
    /// train and validation data.
    pub fn split(mut samples: Vec<Sample>, seed: u64) -> Result<Self> {
        let seq = samples
            .first()
            .map(|s| s.input.len())
            .ok_or_else(|| Error::Empty("no samples to split".into()))?;
        if samples.len() == 1 {
            return Ok(Self {
                train: samples.clone(),
                val: samples,
                seq,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        samples.shuffle(&mut rng);
        let n_val = ((samples.len() as f64 * VAL_FRACTION).round() as usize).clamp(1, samples.len() - 1);
        let val = samples.split_off(samples.len() - n_val);
        Ok(Self {
            train: samples,
            val,
            seq,
        })
    }

    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<TokenBatch> {
        if self.train.is_empty() {
            return Err(Error::Empty("training split".into()));
        }
        let picks: Vec<&Sample> = (0..batch)
            .map(|_| &self.train[rng.random_range(0..self.train.len())])
            .collect();
        TokenBatch::from_samples(&picks)
    }

    /// The first `count` consecutive training batches, used for calibration.
    pub fn leading_batches(&self, batch: usize, count: usize) -> Result<Vec<TokenBatch>> {
        self.train
            .chunks(batch.max(1))
            .take(count)
            .map(|c| TokenBatch::from_samples(&c.iter().collect::<Vec<_>>()))
            .collect()
    }

    /// Validation split in fixed order, optionally truncated.
    pub fn val_batches(&self, batch: usize, max_samples: Option<usize>) -> Result<Vec<TokenBatch>> {
        let n = max_samples.unwrap_or(usize::MAX).min(self.val.len());
        self.val[..n]
            .chunks(batch.max(1))
            .map(|c| TokenBatch::from_samples(&c.iter().collect::<Vec<_>>()))
            .collect()
    }
}

/// Builds the dataset for `cfg` with sequences no longer than `context`.
pub fn build_dataset(cfg: &DataConfig, context: usize) -> Result<Dataset> {
    match cfg.task {
        TaskKind::CharLm => {
            let tokens = match &cfg.corpus {
                Some(p) => ingest_corpus(p)?,
                None => synthetic_corpus(cfg.synthetic_bytes, cfg.seed)
                    .into_iter()
                    .map(usize::from)
                    .collect(),
            };
            let samples = next_token_samples(&tokens, context);
            if samples.is_empty() {
                return Err(Error::Empty(format!(
                    "corpus shorter than one window of {} tokens",
                    context + 1
                )));
            }
            Dataset::split(samples, cfg.seed)
        }
        TaskKind::Copy => {
            if 2 * cfg.copy_len > context {
                return Err(Error::Config(format!(
                    "copy length {} needs context {}",
                    cfg.copy_len,
                    2 * cfg.copy_len
                )));
            }
            Dataset::split(copy_samples(cfg), cfg.seed)
        }
        TaskKind::ModularAdd => {
            if context < 4 {
                return Err(Error::Config("modular addition needs context 4".into()));
            }
            Dataset::split(modular_add_samples(cfg.modulus)?, cfg.seed)
        }
    }
}

/// `x | x` with the loss on the second copy only.
fn copy_samples(cfg: &DataConfig) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FF);
    let n = cfg.copy_len;
    let alphabet = cfg.copy_alphabet.clamp(2, 26);
    (0..cfg.copy_samples)
        .map(|_| {
            let x: Vec<usize> = (0..n)
                .map(|_| b'a' as usize + rng.random_range(0..alphabet))
                .collect();
            let mut s = x.clone();
            s.push(COPY_SEPARATOR);
            s.extend_from_slice(&x);
            Sample {
                input: s[..2 * n].to_vec(),
                target: (0..2 * n)
                    .map(|j| (j >= n).then(|| s[j + 1]))
                    .collect(),
            }
        })
        .collect()
}

/// `a + b =` followed by `(a + b) mod p`; operands are encoded as byte
/// values `128 + a`.
fn modular_add_samples(p: usize) -> Result<Vec<Sample>> {
    if p < 2 || p > 127 {
        return Err(Error::Config(format!("modulus {p} outside 2..=127")));
    }
    let enc = |v: usize| 128 + v;
    let mut out = Vec::with_capacity(p * p);
    for a in 0..p {
        for b in 0..p {
            out.push(Sample {
                input: vec![enc(a), b'+' as usize, enc(b), b'=' as usize],
                target: vec![None, None, None, Some(enc((a + b) % p))],
            });
        }
    }
    Ok(out)
}

const DETERMINERS: &[&str] = &["the", "a", "every", "one", "that", "some", "this", "no"];
const ADJECTIVES: &[&str] = &[
    "quiet", "bright", "old", "small", "green", "heavy", "quick", "distant", "warm", "broken",
    "silver", "tired", "clever", "narrow", "gentle", "loud", "hidden", "early", "cold", "empty",
];
const NOUNS: &[&str] = &[
    "river", "teacher", "garden", "machine", "village", "window", "student", "engine", "forest",
    "letter", "market", "sailor", "bridge", "lantern", "doctor", "kitchen", "signal", "harbor",
    "painter", "mountain", "library", "farmer", "clock", "island", "wagon", "record", "valley",
    "button", "castle", "stone",
];
const VERBS: &[&str] = &[
    "watches", "carries", "finds", "builds", "follows", "opens", "repairs", "paints", "counts",
    "visits", "moves", "remembers", "answers", "crosses", "measures", "keeps", "writes", "leaves",
];
const PREPOSITIONS: &[&str] = &["near", "under", "behind", "beyond", "inside", "across", "with"];
const ADVERBS: &[&str] = &["slowly", "again", "today", "carefully", "often", "at night", "quietly"];

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(DETERMINERS[rng.random_range(0..DETERMINERS.len())]);
    out.push(' ');
    if rng.random_bool(0.6) {
        out.push_str(ADJECTIVES[rng.random_range(0..ADJECTIVES.len())]);
        out.push(' ');
    }
    out.push_str(NOUNS[rng.random_range(0..NOUNS.len())]);
}

/// Deterministic English-like text from a small template grammar, used as a
/// stand-in corpus when no file is supplied.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E47);
    let mut text = String::with_capacity(bytes + 128);
    let mut sentences_in_paragraph = 0;
    while text.len() < bytes {
        let mut s = String::new();
        noun_phrase(&mut rng, &mut s);
        s.push(' ');
        s.push_str(VERBS[rng.random_range(0..VERBS.len())]);
        s.push(' ');
        noun_phrase(&mut rng, &mut s);
        if rng.random_bool(0.4) {
            s.push(' ');
            s.push_str(PREPOSITIONS[rng.random_range(0..PREPOSITIONS.len())]);
            s.push(' ');
            noun_phrase(&mut rng, &mut s);
        }
        if rng.random_bool(0.3) {
            s.push(' ');
            s.push_str(ADVERBS[rng.random_range(0..ADVERBS.len())]);
        }
        let mut chars = s.chars();
        if let Some(first) = chars.next() {
            text.extend(first.to_uppercase());
            text.push_str(chars.as_str());
        }
        text.push_str(if rng.random_bool(0.1) { "?" } else { "." });
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= 4 && rng.random_bool(0.25) {
            text.push('\n');
            sentences_in_paragraph = 0;
        } else {
            text.push(' ');
        }
    }
    text.truncate(bytes);
    text.into_bytes()
}

//! Byte tokenizer, datasets and batching.

use std::collections::HashSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// Byte that separates prompt and answer in the synthetic tasks.
pub const ANSWER_SEP: u8 = b'=';

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Decodes byte tokens, skipping the special ids.
pub fn decode(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetKind {
    TextCorpus { path: PathBuf },
    SynthCopy,
    SynthAddition,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::TextCorpus { .. } => "text_corpus",
            DatasetKind::SynthCopy => "synth_copy",
            DatasetKind::SynthAddition => "synth_addition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Number of distinct synthetic examples before the split.
    pub samples: usize,
    /// Operand width for addition, maximum string length for copy.
    pub digits: usize,
    pub eval_fraction: f64,
    /// Window length for the text corpus.
    pub seq_len: usize,
    pub seed: u64,
}

impl DataConfig {
    pub fn new(kind: DatasetKind) -> Self {
        DataConfig { kind, samples: 20_000, digits: 3, eval_fraction: 0.05, seq_len: 64, seed: 0 }
    }
}

/// Token sequences, each starting with [`BOS`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub train: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        if !(cfg.eval_fraction > 0.0 && cfg.eval_fraction < 1.0) {
            return Err(CoreError::Config(format!("eval_fraction must be in (0, 1), got {}", cfg.eval_fraction)));
        }
        match &cfg.kind {
            DatasetKind::TextCorpus { path } => {
                let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
                text_windows(&bytes, cfg.seq_len, cfg.eval_fraction, cfg.kind.clone())
            }
            DatasetKind::SynthCopy | DatasetKind::SynthAddition => synthetic(cfg),
        }
    }

    /// Longest sequence in either split.
    pub fn max_len(&self) -> usize {
        self.train.iter().chain(&self.eval).map(Vec::len).max().unwrap_or(0)
    }
}

fn text_windows(bytes: &[u8], seq_len: usize, eval_fraction: f64, kind: DatasetKind) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(CoreError::Validation("text corpus is empty".into()));
    }
    if seq_len < 1 {
        return Err(CoreError::Config("seq_len must be positive".into()));
    }
    let tokens: Vec<usize> = bytes.iter().map(|&b| usize::from(b)).collect();
    let cut = ((tokens.len() as f64) * (1.0 - eval_fraction)).floor() as usize;
    let windows = |part: &[usize]| -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        while start + 1 < part.len() {
            let end = (start + seq_len).min(part.len());
            let mut w = vec![BOS];
            w.extend_from_slice(&part[start..end]);
            out.push(w);
            start = end;
        }
        out
    };
    let (train, eval) = (windows(&tokens[..cut]), windows(&tokens[cut..]));
    if train.is_empty() || eval.is_empty() {
        return Err(CoreError::Validation(format!("text corpus of {} bytes is too small to split", bytes.len())));
    }
    Ok(Dataset { kind, train, eval })
}

fn synthetic(cfg: &DataConfig) -> Result<Dataset> {
    if cfg.digits < 1 || cfg.digits > 9 {
        return Err(CoreError::Config(format!("digits must be in 1..=9, got {}", cfg.digits)));
    }
    if cfg.samples < 2 {
        return Err(CoreError::Config("need at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let addition = cfg.kind == DatasetKind::SynthAddition;
    let space = if addition {
        10u64.pow(cfg.digits as u32).saturating_pow(2)
    } else {
        (1..=cfg.digits as u32).map(|l| 10u64.pow(l)).sum()
    };
    let wanted = (cfg.samples as u64).min(space) as usize;
    let mut seen = HashSet::with_capacity(wanted);
    let mut texts = Vec::with_capacity(wanted);
    let limit = 10 * cfg.samples + 1000;
    let mut attempts = 0;
    while texts.len() < wanted && attempts < limit {
        attempts += 1;
        let text = if addition {
            let hi = 10u64.pow(cfg.digits as u32);
            let (a, b) = (rng.gen_range(0..hi), rng.gen_range(0..hi));
            format!("{a}+{b}={}", a + b)
        } else {
            let len = rng.gen_range(1..=cfg.digits);
            let s: String = (0..len).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect();
            format!("{s}={s}")
        };
        if seen.insert(text.clone()) {
            texts.push(text);
        }
    }
    texts.shuffle(&mut rng);
    let n_eval = ((texts.len() as f64) * cfg.eval_fraction).round().max(1.0) as usize;
    if n_eval >= texts.len() {
        return Err(CoreError::Config("eval split leaves no training data".into()));
    }
    let seqs: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            let mut s = vec![BOS];
            s.extend(encode(t));
            s.push(EOS);
            s
        })
        .collect();
    let eval = seqs[..n_eval].to_vec();
    let train = seqs[n_eval..].to_vec();
    Ok(Dataset { kind: cfg.kind.clone(), train, eval })
}

/// Splits a synthetic sequence into the prompt (through the separator) and the
/// expected answer tokens (before [`EOS`]).
pub fn prompt_and_answer(seq: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
    let sep = seq.iter().position(|&t| t == usize::from(ANSWER_SEP))?;
    let end = seq.iter().position(|&t| t == EOS).unwrap_or(seq.len());
    Some((seq[..=sep].to_vec(), seq[sep + 1..end].to_vec()))
}

/// A padded next-token batch. `inputs`, `targets` and `mask` are `batch × seq`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[&[usize]]) -> Result<Self> {
        Self::padded(seqs, PAD)
    }

    /// Like [`Batch::from_sequences`] with a caller-chosen padding id.
    pub fn padded(seqs: &[&[usize]], pad: usize) -> Result<Self> {
        let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if seqs.is_empty() || longest < 2 {
            return Err(CoreError::Validation("a batch needs a sequence of at least 2 tokens".into()));
        }
        let seq = longest - 1;
        let mut b = Batch {
            inputs: Vec::with_capacity(seqs.len() * seq),
            targets: Vec::with_capacity(seqs.len() * seq),
            mask: Vec::with_capacity(seqs.len() * seq),
            batch: seqs.len(),
            seq,
        };
        for s in seqs {
            for t in 0..seq {
                let active = t + 1 < s.len();
                b.inputs.push(if t < s.len() { s[t] } else { pad });
                b.targets.push(if active { s[t + 1] } else { pad });
                b.mask.push(active);
            }
        }
        Ok(b)
    }

    /// Number of unmasked targets.
    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Index batches for one epoch, shuffled by `(seed, epoch)`. The last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = "a+b=ç";
        assert_eq!(decode(&encode(s)), s);
        let mut t = vec![BOS];
        t.extend(encode("hi"));
        t.push(EOS);
        assert_eq!(decode(&t), "hi");
    }

    #[test]
    fn addition_format_and_disjoint_splits() {
        let mut cfg = DataConfig::new(DatasetKind::SynthAddition);
        cfg.samples = 500;
        cfg.digits = 2;
        let d = Dataset::load(&cfg).unwrap();
        assert_eq!(d.train.len() + d.eval.len(), 500);
        let train: HashSet<_> = d.train.iter().collect();
        assert!(d.eval.iter().all(|s| !train.contains(s)));
        for s in d.train.iter().take(50) {
            assert_eq!(s[0], BOS);
            assert_eq!(*s.last().unwrap(), EOS);
            let text = decode(s);
            let (lhs, c) = text.split_once('=').unwrap();
            let (a, b) = lhs.split_once('+').unwrap();
            assert_eq!(a.parse::<u64>().unwrap() + b.parse::<u64>().unwrap(), c.parse::<u64>().unwrap());
        }
        assert_eq!(Dataset::load(&cfg).unwrap().train, d.train);
    }

    #[test]
    fn prompt_split() {
        let mut s = vec![BOS];
        s.extend(encode("12+5=17"));
        s.push(EOS);
        let (p, a) = prompt_and_answer(&s).unwrap();
        assert_eq!(decode(&p), "12+5=");
        assert_eq!(decode(&a), "17");
    }

    #[test]
    fn batch_padding() {
        let a = [BOS, 1, 2, EOS];
        let b = [BOS, 3];
        let batch = Batch::from_sequences(&[&a, &b]).unwrap();
        assert_eq!(batch.seq, 3);
        assert_eq!(batch.inputs, vec![BOS, 1, 2, BOS, 3, PAD]);
        assert_eq!(batch.targets, vec![1, 2, EOS, 3, PAD, PAD]);
        assert_eq!(batch.mask, vec![true, true, true, true, false, false]);
        assert_eq!(batch.active(), 4);
    }

    #[test]
    fn empty_corpus_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, b"").unwrap();
        let cfg = DataConfig::new(DatasetKind::TextCorpus { path: p });
        assert!(matches!(Dataset::load(&cfg), Err(CoreError::Validation(_))));
    }

    #[test]
    fn epochs_cover_everything_once() {
        let batches = epoch_batches(10, 3, 7, 0);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_batches(10, 3, 7, 0), epoch_batches(10, 3, 7, 1));
    }
}

//! Dataset preparation: character vocabulary, contiguous train/val/test
//! splits, and the PQTK token-file format.
//!
//! PQTK layout (little-endian): magic `"PQTK"`, `u32` version (= 1),
//! `u32` vocab size, `u64` token count, then `u16` token ids.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ByteReader;

pub const TOKEN_MAGIC: [u8; 4] = *b"PQTK";
pub const TOKEN_VERSION: u32 = 1;
const TOKEN_HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Bijection between characters and dense ids, ordered by code point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_chars(mut chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::Data("vocabulary is empty".into()));
        }
        chars.sort_unstable();
        chars.dedup();
        if chars.len() > u16::MAX as usize + 1 {
            return Err(Error::Data(format!(
                "{} characters do not fit 16-bit token ids",
                chars.len()
            )));
        }
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self { chars, ids })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.chars.get(i).copied().ok_or(Error::TokenOutOfRange {
                    token: i,
                    vocab_size: self.len(),
                })
            })
            .collect()
    }

    /// One decimal Unicode scalar value per line; line index is the id.
    pub fn to_text(&self) -> String {
        self.chars
            .iter()
            .map(|&c| format!("{}\n", c as u32))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let c = line
                .trim()
                .parse::<u32>()
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| {
                    Error::Data(format!("vocab line {}: bad code point {line:?}", i + 1))
                })?;
            chars.push(c);
        }
        let vocab = Self::from_chars(chars.clone())?;
        if vocab.chars != chars {
            return Err(Error::Data("vocab file is not sorted and unique".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Vocabulary of the sorted unique characters of `text`.
pub fn build_char_vocab(text: &str) -> Result<CharVocab> {
    if text.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from empty text".into(),
        ));
    }
    CharVocab::from_chars(text.chars().collect())
}

/// A split stored as 16-bit token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub vocab_size: u32,
    pub tokens: Vec<u16>,
}

impl TokenFile {
    pub fn new(vocab_size: usize, tokens: &[usize]) -> Result<Self> {
        if vocab_size == 0 || vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Data(format!("vocab size {vocab_size} unsupported")));
        }
        let tokens = tokens
            .iter()
            .map(|&t| {
                if t < vocab_size {
                    Ok(t as u16)
                } else {
                    Err(Error::TokenOutOfRange {
                        token: t,
                        vocab_size,
                    })
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab_size: vocab_size as u32,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TOKEN_HEADER_LEN + 2 * self.tokens.len());
        out.extend_from_slice(&TOKEN_MAGIC);
        out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>("magic")?;
        if magic != TOKEN_MAGIC {
            return Err(Error::BadMagic {
                expected: TOKEN_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != TOKEN_VERSION {
            return Err(Error::VersionMismatch {
                expected: TOKEN_VERSION,
                found: version,
            });
        }
        let vocab_size = r.u32("vocab size")?;
        let count = r.u64("token count")? as usize;
        if r.remaining() != count.saturating_mul(2) {
            return Err(Error::ByteCount(format!(
                "header declares {count} tokens ({} bytes), payload has {} bytes",
                count.saturating_mul(2),
                r.remaining()
            )));
        }
        let tokens: Vec<u16> = r
            .take(2 * count, "tokens")?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if let Some(&t) = tokens.iter().find(|&&t| t as u32 >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t as usize,
                vocab_size: vocab_size as usize,
            });
        }
        Ok(Self { vocab_size, tokens })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "split ratios must all be positive, got {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios must sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Contiguous split in train, val, test order; counts round to the nearest token.
pub fn split_tokens<'a>(tokens: &'a [usize], ratios: &SplitRatios) -> Result<[&'a [usize]; 3]> {
    ratios.validate()?;
    let n = tokens.len();
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
    let (train, rest) = tokens.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok([train, val, test])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub vocab: CharVocab,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub vocab_path: PathBuf,
    pub counts: [usize; 3],
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
pub const VOCAB_FILE: &str = "vocab.txt";

/// Tokenizes `input` at character level and writes `train.bin`, `val.bin`,
/// `test.bin` and `vocab.txt` into `out_dir`.
pub fn prepare_dataset(
    input: impl AsRef<Path>,
    ratios: &SplitRatios,
    out_dir: impl AsRef<Path>,
) -> Result<PreparedDataset> {
    ratios.validate()?;
    let input = input.as_ref();
    let out_dir = out_dir.as_ref();
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let vocab = build_char_vocab(&text)?;
    let ids = vocab.encode(&text)?;
    let splits = split_tokens(&ids, ratios)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(3);
    let mut counts = [0usize; 3];
    for (i, (name, split)) in SPLIT_NAMES.iter().zip(splits).enumerate() {
        let path = out_dir.join(format!("{name}.bin"));
        TokenFile::new(vocab.len(), split)?.save(&path)?;
        counts[i] = split.len();
        paths.push(path);
    }
    let vocab_path = out_dir.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;
    let mut paths = paths.into_iter();
    Ok(PreparedDataset {
        vocab,
        train: paths.next().unwrap(),
        val: paths.next().unwrap(),
        test: paths.next().unwrap(),
        vocab_path,
        counts,
    })
}

/// `batch` windows of `block` inputs, with targets shifted by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub starts: Vec<usize>,
}

/// Seeded source of random training/evaluation windows.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_batch(&mut self, tf: &TokenFile, block: usize, batch: usize) -> Result<Batch> {
        if block == 0 || batch == 0 {
            return Err(Error::InvalidConfig(
                "block and batch must be positive".into(),
            ));
        }
        if tf.len() <= block + 1 {
            return Err(Error::Data(format!(
                "token file of {} tokens too small for block {block}",
                tf.len()
            )));
        }
        let max_start = tf.len() - block - 1;
        let mut out = Batch {
            inputs: Vec::with_capacity(batch),
            targets: Vec::with_capacity(batch),
            starts: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let s = self.rng.random_range(0..=max_start);
            let window: Vec<usize> = tf.tokens[s..s + block + 1]
                .iter()
                .map(|&t| t as usize)
                .collect();
            out.inputs.push(window[..block].to_vec());
            out.targets.push(window[1..].to_vec());
            out.starts.push(s);
        }
        Ok(out)
    }
}

pub fn sample_batch(tf: &TokenFile, block: usize, batch: usize, seed: u64) -> Result<Batch> {
    BatchSampler::new(seed).next_batch(tf, block, batch)
}

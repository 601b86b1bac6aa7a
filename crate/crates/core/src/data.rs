//! Corpora, vocabularies and sliding-window example streams.
//!
//! A window starting at `s` pairs the context `ids[s..s + T]` with the target
//! `ids[s + T]`. Streams may be capped, in which case starts are sampled
//! uniformly without replacement from a seeded generator.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Char,
    Word,
}

impl TokenMode {
    pub fn name(self) -> &'static str {
        match self {
            TokenMode::Char => "char",
            TokenMode::Word => "word",
        }
    }
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenMode::Char),
            "word" => Ok(TokenMode::Word),
            _ => Err(Error::invalid(
                "tokenization",
                format!("expected char or word, got {s:?}"),
            )),
        }
    }
}

/// Bijective map between tokens and the contiguous ids `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: Option<usize>,
}

impl Vocab {
    /// Every distinct character across `texts`, ids assigned in codepoint order.
    pub fn build_char(texts: &[&str]) -> Result<Self> {
        let mut chars: Vec<char> = texts.iter().flat_map(|t| t.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        if chars.is_empty() {
            return Err(Error::Empty("character corpus"));
        }
        Self::from_tokens(
            TokenMode::Char,
            chars.iter().map(char::to_string).collect(),
            None,
        )
    }

    /// Distinct whitespace-separated tokens of the training text in order of
    /// first occurrence. When `unk` is given it keeps its corpus id if it
    /// occurs and is appended otherwise.
    pub fn build_word(train: &str, unk: Option<&str>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for w in train.split_whitespace() {
            if !seen.contains_key(w) {
                seen.insert(w, tokens.len());
                tokens.push(w.to_string());
            }
        }
        if tokens.is_empty() {
            return Err(Error::Empty("word corpus"));
        }
        if let Some(u) = unk {
            if !seen.contains_key(u) {
                tokens.push(u.to_string());
            }
        }
        Self::from_tokens(TokenMode::Word, tokens, unk)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(mode: TokenMode, tokens: Vec<String>, unk: Option<&str>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if mode == TokenMode::Char && t.chars().count() != 1 {
                return Err(Error::invalid(
                    "vocab",
                    format!("char token {t:?} is not one character"),
                ));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid("vocab", format!("duplicate token {t:?}")));
            }
        }
        let unk = match unk {
            Some(u) => Some(*index.get(u).ok_or_else(|| {
                Error::invalid("vocab", format!("unknown token {u:?} is not listed"))
            })?),
            None => None,
        };
        Ok(Self {
            mode,
            tokens,
            index,
            unk,
        })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_id(&self) -> Option<usize> {
        self.unk
    }

    pub fn unk_token(&self) -> Option<&str> {
        self.unk.map(|i| self.tokens[i].as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Vocab {
            id,
            size: self.len(),
        })
    }

    /// Char mode: one id per character, failing on foreign characters.
    /// Word mode: one id per whitespace token, OOV mapped to the unknown id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self.mode {
            TokenMode::Char => {
                let mut buf = [0u8; 4];
                text.chars()
                    .map(|c| {
                        self.id(c.encode_utf8(&mut buf))
                            .ok_or(Error::UnknownChar(c))
                    })
                    .collect()
            }
            TokenMode::Word => text
                .split_whitespace()
                .map(|w| {
                    self.id(w)
                        .or(self.unk)
                        .ok_or_else(|| Error::UnknownWord(w.to_string()))
                })
                .collect(),
        }
    }

    /// Char tokens are concatenated, word tokens joined by single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let tokens = ids
            .iter()
            .map(|&i| self.token(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(match self.mode {
            TokenMode::Char => tokens.concat(),
            TokenMode::Word => tokens.join(" "),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(
                "split",
                format!("expected train, val or test, got {s:?}"),
            )),
        }
    }
}

/// Which split to stream, how many windows at most, and the sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub split: Split,
    pub max_positions: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(split: Split, max_positions: usize, seed: u64) -> Result<Self> {
        if max_positions == 0 {
            return Err(Error::invalid(
                "split spec",
                "max_positions must be at least 1",
            ));
        }
        Ok(Self {
            split,
            max_positions,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowExample<'a> {
    pub context: &'a [usize],
    pub target: usize,
}

/// A fixed, ordered selection of windows over one id sequence.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    ids: &'a [usize],
    context: usize,
    starts: Vec<usize>,
}

/// Number of complete windows a sequence of `len` ids holds.
pub fn window_count(len: usize, context: usize) -> usize {
    len.saturating_sub(context)
}

/// Windows over `ids`. With more candidates than the cap, starts are a
/// uniform sample without replacement; otherwise every start is used. Either
/// way the order is a seeded shuffle.
pub fn window_stream(ids: &[usize], context: usize, spec: SplitSpec) -> Result<Windows<'_>> {
    if context == 0 {
        return Err(Error::invalid(
            "window_stream",
            "context length must be at least 1",
        ));
    }
    let candidates = window_count(ids.len(), context);
    if candidates == 0 {
        return Err(Error::TooShort {
            len: ids.len(),
            context,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let starts = if candidates > spec.max_positions {
        index::sample(&mut rng, candidates, spec.max_positions).into_vec()
    } else {
        let mut all: Vec<usize> = (0..candidates).collect();
        all.shuffle(&mut rng);
        all
    };
    Ok(Windows {
        ids,
        context,
        starts,
    })
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn get(&self, i: usize) -> WindowExample<'a> {
        let s = self.starts[i];
        WindowExample {
            context: &self.ids[s..s + self.context],
            target: self.ids[s + self.context],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowExample<'a>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Consecutive batches of at most `size` windows; the last may be short.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Batch<'a>> + '_ {
        assert!(size > 0, "batch size must be positive");
        self.starts.chunks(size).map(|chunk| {
            let mut batch = Batch {
                contexts: Vec::with_capacity(chunk.len()),
                targets: Vec::with_capacity(chunk.len()),
            };
            for &s in chunk {
                batch.contexts.push(&self.ids[s..s + self.context]);
                batch.targets.push(self.ids[s + self.context]);
            }
            batch
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub contexts: Vec<&'a [usize]>,
    pub targets: Vec<usize>,
}

/// Raw text of the three splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: String,
    pub val: String,
    pub test: String,
}

impl Corpus {
    pub fn read(train: &Path, val: &Path, test: &Path) -> Result<Self> {
        Ok(Self {
            train: read_text(train)?,
            val: read_text(val)?,
            test: read_text(test)?,
        })
    }

    pub fn text(&self, split: Split) -> &str {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Char vocabularies cover all three splits, word vocabularies the
    /// training split only.
    pub fn build_vocab(&self, mode: TokenMode, unk: Option<&str>) -> Result<Vocab> {
        match mode {
            TokenMode::Char => Vocab::build_char(&[&self.train, &self.val, &self.test]),
            TokenMode::Word => Vocab::build_word(&self.train, unk),
        }
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<EncodedSplits> {
        Ok(EncodedSplits {
            train: vocab.encode(&self.train)?,
            val: vocab.encode(&self.val)?,
            test: vocab.encode(&self.test)?,
        })
    }
}

/// Token ids of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl EncodedSplits {
    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

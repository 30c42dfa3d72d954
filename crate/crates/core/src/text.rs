//! Word-level tokenization shared by truncation, metrics and the toy LM.
//!
//! Text is lowercased and split on whitespace; every non-alphanumeric,
//! non-whitespace character becomes a token of its own. The split is
//! reversible in the sense that `words(&join(&words(s))) == words(s)`.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
/// Begin-of-response marker, the first decoder input in encoder-decoder layouts.
pub const BOR: &str = "<bor>";
pub const LINE_BREAK: &str = "\n";

/// Special tokens, in id order. They always occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 5] = [PAD, UNK, EOS, BOR, LINE_BREAK];

pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// A versioned set of lowercase stop words.
#[derive(Debug, Clone)]
pub struct StopWordList {
    version: String,
    words: HashSet<String>,
}

const ENGLISH_V1: &str = include_str!("../data/stopwords_en_v1.txt");

impl StopWordList {
    pub fn english() -> Self {
        Self::parse("en-v1", ENGLISH_V1).expect("bundled stop word list is valid")
    }

    /// Parses one word per line; blank lines and `#` comments are skipped.
    pub fn parse(version: &str, text: &str) -> Result<Self> {
        let words: HashSet<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(Error::validation("stop word list", "words", "empty list"));
        }
        Ok(Self {
            version: version.to_string(),
            words,
        })
    }

    pub fn from_words<I, S>(version: &str, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            version: version.to_string(),
            words: words
                .into_iter()
                .map(|w| w.as_ref().to_lowercase())
                .collect(),
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn content_words(&self, text: &str) -> Vec<String> {
        words(text)
            .into_iter()
            .filter(|w| !self.contains(w))
            .collect()
    }
}

/// Token ↔ id mapping. Ids are dense; specials come first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Builds a vocabulary over the words of `texts`. Word ids are assigned by
    /// descending frequency, ties broken lexicographically, after the specials.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("word vocabulary has no duplicates")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocab(format!(
                    "expected special token {s:?} at id {i}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
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

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn special(&self, token: &str) -> TokenId {
        SPECIALS
            .iter()
            .position(|s| *s == token)
            .unwrap_or_else(|| panic!("{token:?} is not a special token")) as TokenId
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn unk(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn bor(&self) -> TokenId {
        3
    }

    pub fn line_break(&self) -> TokenId {
        4
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Encodes already-split words; unknown words map to `<unk>`.
    pub fn encode_words(&self, ws: &[String]) -> Vec<TokenId> {
        ws.iter()
            .map(|w| self.id(w).unwrap_or(self.unk()))
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_words(&words(text))
    }

    /// Renders ids back to text, dropping special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let ws: Vec<&str> = ids
            .iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.token(id))
            .collect();
        ws.join(" ")
    }

    /// Returns a tokenizer with `extra` appended at the end of the id space.
    pub fn extended(&self, extra: &[String]) -> Result<Self> {
        let mut tokens = self.tokens.clone();
        tokens.extend(extra.iter().cloned());
        Self::from_tokens(tokens)
    }
}

//! Embedding tables and initialization of newly added prompt tokens.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::DialogSample;
use crate::error::{Error, Result};
use crate::prompting::Indicator;
use crate::text::{self, TokenId, Tokenizer};

/// Size of the frequent-token pool used by [`InitMethod::Frequent`].
pub const FREQUENT_POOL: usize = 100;

/// Token strings plus one embedding row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    rows: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(tokens: Vec<String>, rows: Array2<f64>) -> Result<Self> {
        if tokens.len() != rows.nrows() {
            return Err(Error::Vocab(format!(
                "{} tokens but {} embedding rows",
                tokens.len(),
                rows.nrows()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Vocab(
                "embedding table has non-finite entries".into(),
            ));
        }
        Ok(Self {
            tokens,
            rows: rows.as_standard_layout().into_owned(),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, id: TokenId) -> Array1<f64> {
        self.rows.row(id as usize).to_owned()
    }

    /// Population standard deviation of each coordinate across rows.
    pub fn coordinate_std(&self) -> Array1<f64> {
        self.rows.std_axis(Axis(0), 0.0)
    }

    const MAGIC: &'static [u8; 8] = b"GDGEMBED";
    const VERSION: u32 = 1;

    /// Binary layout (little-endian): magic, u32 version, u64 V, u64 d,
    /// V·d f64 values row-major, then V tokens as (u32 byte length, UTF-8).
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab_size() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.rows.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &self.tokens {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            w.write_all(t.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        let io = |e: std::io::Error| Error::Format(format!("truncated embedding file: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != Self::MAGIC {
            return Err(fmt("not an embedding table (bad magic)"));
        }
        let version = read_u32(r).map_err(io)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!(
                "unsupported embedding version {version}"
            )));
        }
        let v = read_u64(r).map_err(io)? as usize;
        let d = read_u64(r).map_err(io)? as usize;
        let mut values = Vec::with_capacity(v * d);
        for _ in 0..v * d {
            values.push(read_f64(r).map_err(io)?);
        }
        let mut tokens = Vec::with_capacity(v);
        for _ in 0..v {
            tokens.push(read_string(r).map_err(io)?);
        }
        let rows =
            Array2::from_shape_vec((v, d), values).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(tokens, rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_string<R: Read>(r: &mut R) -> std::io::Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// How a new token's embedding is initialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Gaussian noise at the table's per-coordinate scale.
    Random,
    /// Copy of a uniformly chosen existing (non-special) row.
    Vocab,
    /// Copy of the row of a uniformly chosen top-100 frequent training token.
    Frequent,
    /// Mean of the rows of the explanation's tokens.
    Semantic(String),
}

/// Config-level choice of init method; semantic explanations come from the
/// indicator being initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    Vocab,
    Frequent,
    Semantic,
}

impl InitKind {
    pub fn method_for(self, indicator: &Indicator) -> InitMethod {
        match self {
            InitKind::Random => InitMethod::Random,
            InitKind::Vocab => InitMethod::Vocab,
            InitKind::Frequent => InitMethod::Frequent,
            InitKind::Semantic => InitMethod::Semantic(indicator.explanation.clone()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::Vocab => "vocab",
            InitKind::Frequent => "frequent",
            InitKind::Semantic => "semantic",
        }
    }
}

/// The `k` most frequent in-vocabulary words over the grounding sources,
/// contexts and responses of `train`; ties go to the lower token id.
pub fn top_frequent_tokens(train: &[DialogSample], k: usize, tokenizer: &Tokenizer) -> Vec<String> {
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    let mut bump = |text: &str| {
        for w in text::words(text) {
            if let Some(id) = tokenizer.id(&w) {
                *counts.entry(id).or_default() += 1;
            }
        }
    };
    for s in train {
        for item in &s.gs.items {
            bump(item);
        }
        for u in &s.context {
            bump(&u.text);
        }
        bump(&s.response);
    }
    let mut ranked: Vec<(TokenId, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(k)
        .filter_map(|(id, _)| tokenizer.token(id).map(str::to_string))
        .collect()
}

pub fn compute_init_vector<R: Rng + ?Sized>(
    method: &InitMethod,
    table: &EmbeddingTable,
    tokenizer: &Tokenizer,
    train: &[DialogSample],
    rng: &mut R,
) -> Result<Array1<f64>> {
    if table.vocab_size() == 0 {
        return Err(Error::Vocab("empty embedding table".into()));
    }
    match method {
        InitMethod::Random => {
            let sigma = table.coordinate_std();
            Ok(sigma.mapv(|s| {
                if s > 0.0 {
                    Normal::new(0.0, s)
                        .expect("finite positive std")
                        .sample(rng)
                } else {
                    0.0
                }
            }))
        }
        InitMethod::Vocab => {
            let lo = text::SPECIALS.len().min(table.vocab_size() - 1);
            let id = rng.random_range(lo..table.vocab_size());
            Ok(table.row(id as TokenId))
        }
        InitMethod::Frequent => {
            let pool = top_frequent_tokens(train, FREQUENT_POOL, tokenizer);
            if pool.is_empty() {
                return Err(Error::Vocab(
                    "training split has no in-vocabulary tokens".into(),
                ));
            }
            let pick = &pool[rng.random_range(0..pool.len())];
            let id = table_index(table, pick).ok_or_else(|| {
                Error::Vocab(format!("frequent token {pick:?} missing from the table"))
            })?;
            Ok(table.row(id))
        }
        InitMethod::Semantic(explanation) => {
            if explanation.trim().is_empty() {
                return Err(Error::Vocab(
                    "semantic init needs a non-empty explanation".into(),
                ));
            }
            // Summing in id order makes the mean independent of word order.
            let mut ids: Vec<TokenId> = text::words(explanation)
                .iter()
                .filter_map(|w| table_index(table, w))
                .collect();
            ids.sort_unstable();
            if ids.is_empty() {
                return Err(Error::Vocab(format!(
                    "explanation {explanation:?} has no in-vocabulary tokens"
                )));
            }
            let mut sum = Array1::zeros(table.dim());
            for &id in &ids {
                sum += &table.rows.row(id as usize);
            }
            Ok(sum / ids.len() as f64)
        }
    }
}

fn table_index(table: &EmbeddingTable, token: &str) -> Option<TokenId> {
    table
        .tokens
        .iter()
        .position(|t| t == token)
        .map(|i| i as TokenId)
}

/// Appends `new_tokens` with the given rows. Existing rows are untouched and
/// the new tokens take ids `V..V+n` in order.
pub fn extend_vocab(
    table: &EmbeddingTable,
    new_tokens: &[String],
    vectors: &[Array1<f64>],
) -> Result<(EmbeddingTable, Vec<TokenId>)> {
    if new_tokens.len() != vectors.len() {
        return Err(Error::Vocab(format!(
            "{} tokens but {} vectors",
            new_tokens.len(),
            vectors.len()
        )));
    }
    let mut seen: std::collections::HashSet<&str> =
        table.tokens.iter().map(String::as_str).collect();
    for t in new_tokens {
        if !seen.insert(t.as_str()) {
            return Err(Error::Vocab(format!("token {t:?} already present")));
        }
    }
    let d = table.dim();
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::Vocab(format!(
            "vector of length {} for dimension {d}",
            v.len()
        )));
    }
    let v0 = table.vocab_size();
    let mut rows = Array2::zeros((v0 + new_tokens.len(), d));
    rows.slice_mut(ndarray::s![..v0, ..]).assign(&table.rows);
    for (i, v) in vectors.iter().enumerate() {
        rows.row_mut(v0 + i).assign(v);
    }
    let mut tokens = table.tokens.clone();
    tokens.extend(new_tokens.iter().cloned());
    let ids = (v0..v0 + new_tokens.len()).map(|i| i as TokenId).collect();
    Ok((EmbeddingTable::new(tokens, rows)?, ids))
}

//! The backend contract shared by the toy LM and the mock backend used for
//! encoder-decoder layouts.

use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::transformer::{log_softmax_rows, ToyLm};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::prompting::{AssembledInput, Layout};
use crate::seed;
use crate::text::TokenId;

pub trait LmBackend: Sync {
    fn vocab_size(&self) -> usize;

    fn supports(&self, layout: Layout) -> bool;

    /// Row `t` is the next-token log-distribution after `stream[..=t]`,
    /// conditioned on `encoder` (empty for single-sequence inputs).
    fn stream_logprobs(&self, encoder: &[TokenId], stream: &[TokenId]) -> Result<Array2<f64>>;

    fn next_logprobs(&self, encoder: &[TokenId], stream: &[TokenId]) -> Result<Array1<f64>> {
        let rows = self.stream_logprobs(encoder, stream)?;
        Ok(rows.row(rows.nrows() - 1).to_owned())
    }

    /// Input embeddings, when the backend exposes them.
    fn embeddings(&self) -> Option<EmbeddingTable>;

    fn trainable(&self) -> bool;
}

impl LmBackend for ToyLm {
    fn vocab_size(&self) -> usize {
        ToyLm::vocab_size(self)
    }

    fn supports(&self, layout: Layout) -> bool {
        layout == Layout::SingleSequence
    }

    fn stream_logprobs(&self, encoder: &[TokenId], stream: &[TokenId]) -> Result<Array2<f64>> {
        if !encoder.is_empty() {
            return Err(Error::Unsupported("the toy LM is decoder-only".into()));
        }
        self.forward_logprobs(stream)
    }

    fn next_logprobs(&self, encoder: &[TokenId], stream: &[TokenId]) -> Result<Array1<f64>> {
        if !encoder.is_empty() {
            return Err(Error::Unsupported("the toy LM is decoder-only".into()));
        }
        ToyLm::next_logprobs(self, stream)
    }

    fn embeddings(&self) -> Option<EmbeddingTable> {
        Some(self.embedding_table())
    }

    fn trainable(&self) -> bool {
        true
    }
}

/// Deterministic pseudo-random LM: next-token logits depend only on a hash
/// of the encoder tokens and the stream prefix.
#[derive(Debug, Clone)]
pub struct HashBackend {
    pub vocab_size: usize,
    pub seed: u64,
    /// Spread of the logits; larger values give peakier distributions.
    pub sharpness: f64,
}

impl HashBackend {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            seed,
            sharpness: 3.0,
        }
    }

    fn prefix_logprobs(&self, encoder: &[TokenId], prefix: &[TokenId]) -> Array1<f64> {
        let mut h = seed::derive_seed(self.seed, encoder.len() as u64);
        for &t in encoder {
            h = seed::derive_seed(h, t as u64);
        }
        h = seed::derive_seed(h, u64::MAX);
        for &t in prefix {
            h = seed::derive_seed(h, t as u64);
        }
        let mut rng = seed::rng_from(h, 0);
        let logits = Array2::from_shape_fn((1, self.vocab_size), |_| {
            self.sharpness * rng.random_range(-1.0..1.0)
        });
        log_softmax_rows(&logits).row(0).to_owned()
    }
}

impl LmBackend for HashBackend {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn supports(&self, _layout: Layout) -> bool {
        true
    }

    fn stream_logprobs(&self, encoder: &[TokenId], stream: &[TokenId]) -> Result<Array2<f64>> {
        if stream.is_empty() {
            return Err(Error::Assembly("empty token sequence".into()));
        }
        if let Some(&t) = encoder
            .iter()
            .chain(stream)
            .find(|&&t| t as usize >= self.vocab_size)
        {
            return Err(Error::Vocab(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let mut out = Array2::zeros((stream.len(), self.vocab_size));
        for t in 0..stream.len() {
            out.row_mut(t)
                .assign(&self.prefix_logprobs(encoder, &stream[..=t]));
        }
        Ok(out)
    }

    fn next_logprobs(&self, encoder: &[TokenId], stream: &[TokenId]) -> Result<Array1<f64>> {
        Ok(self.prefix_logprobs(encoder, stream))
    }

    fn embeddings(&self) -> Option<EmbeddingTable> {
        None
    }

    fn trainable(&self) -> bool {
        false
    }
}

/// Log-probability rows for every decoder-side stream position.
pub fn score(backend: &dyn LmBackend, input: &AssembledInput) -> Result<Array2<f64>> {
    if !backend.supports(input.layout) {
        return Err(Error::Unsupported(format!(
            "backend does not support the {:?} layout",
            input.layout
        )));
    }
    backend.stream_logprobs(&input.encoder, &input.stream())
}

/// Summed NLL of the masked targets and their count.
pub fn masked_nll(backend: &dyn LmBackend, input: &AssembledInput) -> Result<(f64, usize)> {
    let stream = input.stream();
    let mask = input.stream_mask();
    if mask.first() == Some(&true) {
        return Err(Error::Assembly(
            "the first stream token cannot be a target".into(),
        ));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let rows = score(backend, input)?;
    let nll = (1..stream.len())
        .filter(|&t| mask[t])
        .map(|t| -rows[[t - 1, stream[t] as usize]])
        .sum();
    Ok((nll, n))
}

/// Mean NLL over the masked positions.
pub fn nll_loss(backend: &dyn LmBackend, input: &AssembledInput) -> Result<f64> {
    let (nll, n) = masked_nll(backend, input)?;
    Ok(nll / n as f64)
}

/// Token-weighted corpus perplexity: exp(total NLL / total targets).
pub fn perplexity(
    backend: &dyn LmBackend,
    inputs: &[AssembledInput],
    exec: Execution,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::UndefinedMetric("perplexity of an empty set".into()));
    }
    let parts = exec.try_map(inputs, |x| masked_nll(backend, x))?;
    let (nll, n) = parts
        .iter()
        .fold((0.0, 0usize), |(a, b), (x, y)| (a + x, b + y));
    Ok((nll / n as f64).exp())
}

/// Log-probabilities assigned to the stream's own tokens (positions ≥ 1).
pub fn target_logprobs(backend: &dyn LmBackend, input: &AssembledInput) -> Result<Vec<f64>> {
    let stream = input.stream();
    let rows = score(backend, input)?;
    let tail = rows.slice(s![..stream.len() - 1, ..]);
    Ok(stream[1..]
        .iter()
        .enumerate()
        .map(|(i, &t)| tail[[i, t as usize]])
        .collect())
}

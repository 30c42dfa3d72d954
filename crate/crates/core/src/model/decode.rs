//! Greedy, beam and nucleus decoding over any [`LmBackend`].

use std::cmp::Ordering;

use ndarray::Array1;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backend::LmBackend;
use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::prompting::AssembledInput;
use crate::text::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Beam,
    TopP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    #[serde(default = "default_beam")]
    pub beam_size: usize,
    #[serde(default = "default_p")]
    pub top_p: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub run_seed: u64,
    /// Rank beams by mean instead of summed log-probability.
    #[serde(default)]
    pub length_normalize: bool,
}

fn default_beam() -> usize {
    3
}
fn default_p() -> f64 {
    0.9
}
fn default_temperature() -> f64 {
    0.7
}

impl GenerationConfig {
    /// Beam search for knowledge grounding, nucleus sampling otherwise.
    pub fn for_task(task: Task) -> Self {
        let (mode, min_len, max_len) = match task {
            Task::Wow => (DecodeMode::Beam, 10, 50),
            Task::Pc => (DecodeMode::TopP, 5, 25),
            Task::Esconv => (DecodeMode::TopP, 10, 50),
        };
        Self {
            mode,
            beam_size: 3,
            top_p: 0.9,
            temperature: 0.7,
            min_len,
            max_len,
            run_seed: 0,
            length_normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation("generation", field, msg));
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p", "must lie in (0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        if self.min_len > self.max_len {
            return bad("min_len", "exceeds max_len");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be positive");
        }
        if self.mode == DecodeMode::Beam && self.beam_size == 0 {
            return bad("beam_size", "must be positive");
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Session<'a> {
    backend: &'a dyn LmBackend,
    encoder: &'a [TokenId],
    prompt: Vec<TokenId>,
    end: TokenId,
    min_len: usize,
}

impl<'a> Session<'a> {
    fn new(backend: &'a dyn LmBackend, input: &'a AssembledInput, min_len: usize) -> Result<Self> {
        if !backend.supports(input.layout) {
            return Err(Error::Unsupported(format!(
                "backend does not support the {:?} layout",
                input.layout
            )));
        }
        let prompt = input.prompt_stream();
        if prompt.is_empty() {
            return Err(Error::Assembly("nothing to condition generation on".into()));
        }
        Ok(Self {
            backend,
            encoder: &input.encoder,
            prompt,
            end: input.end_token,
            min_len,
        })
    }

    /// Next-token log-probabilities after `generated`, with the end token
    /// masked out while the response is shorter than `min_len`.
    fn step(&self, generated: &[TokenId]) -> Result<Array1<f64>> {
        let mut stream = self.prompt.clone();
        stream.extend_from_slice(generated);
        let mut lp = self.backend.next_logprobs(self.encoder, &stream)?;
        if generated.len() < self.min_len {
            lp[self.end as usize] = f64::NEG_INFINITY;
        }
        Ok(lp)
    }
}

/// Greedy argmax rollout. The end token is not included in the output.
pub fn generate_greedy(
    backend: &dyn LmBackend,
    input: &AssembledInput,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let session = Session::new(backend, input, min_len)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let tok = argmax(&session.step(&out)?) as TokenId;
        if tok == session.end {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    logprob: f64,
    finished: bool,
}

impl Hypothesis {
    fn rank(&self, normalize: bool) -> f64 {
        if normalize {
            self.logprob / self.tokens.len().max(1) as f64
        } else {
            self.logprob
        }
    }
}

/// Beam search. The beam holds the `beam_size` best hypotheses among finished
/// ones and one-token expansions of live ones; it stops once every kept
/// hypothesis is finished. Hypotheses reaching `max_len` are finished without
/// an end token. Returns the best hypothesis without its end token.
pub fn generate_beam(
    backend: &dyn LmBackend,
    input: &AssembledInput,
    cfg: &GenerationConfig,
) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    let session = Session::new(backend, input, cfg.min_len)?;
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    loop {
        let mut candidates = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let lp = session.step(&hyp.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let tok = tok as TokenId;
                let mut next = hyp.clone();
                next.logprob += l;
                if tok == session.end {
                    next.finished = true;
                } else {
                    next.tokens.push(tok);
                    next.finished = next.tokens.len() >= cfg.max_len;
                }
                candidates.push(next);
            }
        }
        // Stable sort keeps generation order among exact ties.
        candidates.sort_by(|a, b| {
            b.rank(cfg.length_normalize)
                .partial_cmp(&a.rank(cfg.length_normalize))
                .unwrap_or(Ordering::Equal)
        });
        candidates.truncate(cfg.beam_size);
        beam = candidates;
        if beam.iter().all(|h| h.finished) {
            break;
        }
        if !cfg.length_normalize {
            // Extensions never gain probability, so a leading finished
            // hypothesis is final.
            if beam[0].finished {
                break;
            }
        }
    }
    Ok(beam
        .into_iter()
        .next()
        .map(|h| h.tokens)
        .unwrap_or_default())
}

/// Keeps the smallest probability-sorted prefix whose mass reaches `p` and
/// renormalizes it. Ties are ordered by token id. Returns (token, prob).
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<(TokenId, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for i in order {
        kept.push(i);
        cum += probs[i] / total;
        if cum >= p - 1e-12 {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    kept.into_iter()
        .map(|i| (i as TokenId, probs[i] / mass))
        .collect()
}

/// Temperature-scaled probabilities from log-probabilities.
pub fn tempered_probs(logprobs: &Array1<f64>, temperature: f64) -> Vec<f64> {
    let max = logprobs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let w: Vec<f64> = logprobs
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// One nucleus draw.
pub fn sample_top_p<R: Rng + ?Sized>(
    logprobs: &Array1<f64>,
    temperature: f64,
    p: f64,
    rng: &mut R,
) -> TokenId {
    let nucleus = nucleus_filter(&tempered_probs(logprobs, temperature), p);
    if nucleus.len() == 1 {
        return nucleus[0].0;
    }
    let dist = WeightedIndex::new(nucleus.iter().map(|x| x.1)).expect("nucleus has positive mass");
    nucleus[dist.sample(rng)].0
}

/// Nucleus sampling with the same length rules as beam search.
pub fn generate_top_p<R: Rng + ?Sized>(
    backend: &dyn LmBackend,
    input: &AssembledInput,
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    let session = Session::new(backend, input, cfg.min_len)?;
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        let lp = session.step(&out)?;
        let tok = sample_top_p(&lp, cfg.temperature, cfg.top_p, rng);
        if tok == session.end {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

/// Dispatches on `cfg.mode`; sampling uses a generator derived from
/// `cfg.run_seed` and `sample_index`.
pub fn generate(
    backend: &dyn LmBackend,
    input: &AssembledInput,
    cfg: &GenerationConfig,
    sample_index: u64,
) -> Result<Vec<TokenId>> {
    match cfg.mode {
        DecodeMode::Beam => generate_beam(backend, input, cfg),
        DecodeMode::TopP => {
            let mut rng = crate::seed::rng_from(cfg.run_seed, sample_index);
            generate_top_p(backend, input, cfg, &mut rng)
        }
    }
}

/// Summed log-probability of `generated` (plus the end token when
/// `with_end`) under the backend.
pub fn sequence_logprob(
    backend: &dyn LmBackend,
    input: &AssembledInput,
    generated: &[TokenId],
    with_end: bool,
    min_len: usize,
) -> Result<f64> {
    let session = Session::new(backend, input, min_len)?;
    let mut total = 0.0;
    for i in 0..generated.len() {
        total += session.step(&generated[..i])?[generated[i] as usize];
    }
    if with_end {
        total += session.step(generated)?[session.end as usize];
    }
    Ok(total)
}

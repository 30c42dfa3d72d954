//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;

use gdg_core::corpus::{
    DialogSample, GroundingSource, Speaker, Task, Utterance, ESCONV_STRATEGIES,
};
use gdg_core::embedding::EmbeddingTable;
use gdg_core::model::LmBackend;
use gdg_core::prompting::{
    scheme_vocabulary_texts, AssembledInput, IndicatorSet, Layout, SegmentKind,
};
use gdg_core::text::{TokenId, Tokenizer};
use gdg_core::Result;
use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Space-separated string of 0..=max_len tokens over a small alphabet.
pub fn micro_text(rng: &mut ChaCha8Rng, alphabet: &[&str], max_len: usize) -> String {
    let n = rng.random_range(0..=max_len);
    (0..n)
        .map(|_| *alphabet.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn count_in(seq: &[&str], gram: &[&str]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len())
        .filter(|&i| &seq[i..i + gram.len()] == gram)
        .count()
}

/// Corpus BLEU-2 by explicit n-gram enumeration (whitespace tokens).
pub fn oracle_bleu2(hyps: &[String], refs: &[String]) -> f64 {
    let mut matched = [0usize; 2];
    let mut total = [0usize; 2];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (toks(h), toks(rf));
        c += h.len();
        r += rf.len();
        for n in 1..=2usize {
            if h.len() < n {
                continue;
            }
            total[n - 1] += h.len() - n + 1;
            let mut seen: Vec<&[&str]> = Vec::new();
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matched[n - 1] += count_in(&h, g).min(count_in(&rf, g));
            }
        }
    }
    if c == 0 || matched[0] == 0 || matched[1] == 0 {
        return 0.0;
    }
    let p1 = matched[0] as f64 / total[0] as f64;
    let p2 = matched[1] as f64 / total[1] as f64;
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    100.0 * bp * (p1 * p2).sqrt()
}

/// Multiset unigram F1 by sorting and merging.
pub fn oracle_f1_tokens(h: &[&str], r: &[&str]) -> f64 {
    if h.is_empty() && r.is_empty() {
        return 1.0;
    }
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut a = h.to_vec();
    let mut b = r.to_vec();
    a.sort();
    b.sort();
    let (mut i, mut j, mut overlap) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(b[j]) {
            std::cmp::Ordering::Equal => {
                overlap += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / a.len() as f64;
    let rc = overlap as f64 / b.len() as f64;
    2.0 * p * rc / (p + rc)
}

pub fn oracle_f1(h: &str, r: &str) -> f64 {
    oracle_f1_tokens(&toks(h), &toks(r))
}

pub fn oracle_grounding_f1(h: &str, gs_items: &[String], stop: &HashSet<&str>) -> f64 {
    let hf: Vec<&str> = toks(h).into_iter().filter(|w| !stop.contains(w)).collect();
    if hf.is_empty() {
        return 0.0;
    }
    let g: Vec<&str> = gs_items
        .iter()
        .flat_map(|s| toks(s))
        .filter(|w| !stop.contains(w))
        .collect();
    oracle_f1_tokens(&hf, &g)
}

/// Percentage of non-"Others" designations whose prediction matches.
pub fn oracle_match_ratio(designated: &[&str], predicted: &[&str]) -> Option<f64> {
    let counted: Vec<(&&str, &&str)> = designated
        .iter()
        .zip(predicted)
        .filter(|(d, _)| !d.eq_ignore_ascii_case("others"))
        .collect();
    if counted.is_empty() {
        return None;
    }
    let hits = counted.iter().filter(|(d, p)| d == p).count();
    Some(100.0 * hits as f64 / counted.len() as f64)
}

/// A backend whose next-token distribution depends only on the previous
/// token: `probs[prev][next]`.
pub struct BigramBackend {
    pub probs: Vec<Vec<f64>>,
}

impl BigramBackend {
    pub fn random(v: usize, rng: &mut ChaCha8Rng) -> Self {
        let probs = (0..v)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        Self { probs }
    }
}

impl LmBackend for BigramBackend {
    fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    fn supports(&self, _layout: Layout) -> bool {
        true
    }

    fn stream_logprobs(&self, _encoder: &[TokenId], stream: &[TokenId]) -> Result<Array2<f64>> {
        let v = self.probs.len();
        Ok(Array2::from_shape_fn((stream.len(), v), |(t, j)| {
            self.probs[stream[t] as usize][j].ln()
        }))
    }

    fn embeddings(&self) -> Option<EmbeddingTable> {
        None
    }

    fn trainable(&self) -> bool {
        false
    }
}

/// Single-sequence input whose last `n_target` tokens are loss targets.
pub fn tail_target_input(tokens: Vec<TokenId>, n_target: usize) -> AssembledInput {
    let n = tokens.len();
    AssembledInput {
        layout: Layout::SingleSequence,
        encoder: vec![],
        encoder_segments: vec![],
        decoder_segments: (0..n)
            .map(|i| {
                if i + n_target >= n {
                    SegmentKind::Response
                } else {
                    SegmentKind::Utterance
                }
            })
            .collect(),
        loss_mask: (0..n).map(|i| i + n_target >= n).collect(),
        end_token: *tokens.last().unwrap(),
        decoder: tokens,
        decoder_start: None,
    }
}

/// exp(mean NLL) accumulated as a product of probabilities in log space.
pub fn oracle_bigram_ppl(b: &BigramBackend, inputs: &[AssembledInput]) -> f64 {
    let mut log_prob = 0.0;
    let mut n = 0usize;
    for x in inputs {
        for t in 1..x.decoder.len() {
            if x.loss_mask[t] {
                log_prob += b.probs[x.decoder[t - 1] as usize][x.decoder[t] as usize].ln();
                n += 1;
            }
        }
    }
    (-log_prob / n as f64).exp()
}

/// Exact two-sided sign-test p-value by enumerating every outcome sequence.
pub fn oracle_sign_p(wins_a: u64, wins_b: u64) -> f64 {
    let n = (wins_a + wins_b) as u32;
    let center = n as f64 / 2.0;
    let observed = (wins_a as f64 - center).abs();
    let mut extreme = 0u64;
    for outcome in 0u64..(1u64 << n) {
        let k = outcome.count_ones() as f64;
        if (k - center).abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

/// Γ(ν/2) for positive integer ν by the recursion Γ(x + 1) = xΓ(x).
fn gamma_half(nu: usize) -> f64 {
    let mut x = if nu.is_multiple_of(2) { 1.0 } else { 0.5 };
    let mut g = if nu.is_multiple_of(2) {
        1.0
    } else {
        std::f64::consts::PI.sqrt()
    };
    while x < nu as f64 / 2.0 - 1e-9 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Two-sided Student-t tail probability by composite Simpson integration
/// of the density over [0, |t|].
pub fn oracle_t_p(t: f64, nu: usize) -> f64 {
    let v = nu as f64;
    let c = gamma_half(nu + 1) / ((v * std::f64::consts::PI).sqrt() * gamma_half(nu));
    let f = |x: f64| c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0);
    let a = t.abs();
    let steps = 200_000usize;
    let h = a / steps as f64;
    let mut s = f(0.0) + f(a);
    for i in 1..steps {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let inner = s * h / 3.0;
    (2.0 * (0.5 - inner)).clamp(0.0, 1.0)
}

/// Paired t statistic with the sample standard deviation.
pub fn oracle_t_stat(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    mean / (var / n).sqrt()
}

/// Summed log-probability of a continuation, end token masked before
/// `min_len`, computed step by step from the backend.
pub fn oracle_seq_logprob(
    b: &dyn LmBackend,
    prompt: &[TokenId],
    seq: &[TokenId],
    end: Option<TokenId>,
) -> f64 {
    let mut stream = prompt.to_vec();
    let mut total = 0.0;
    for &t in seq {
        total += b.next_logprobs(&[], &stream).unwrap()[t as usize];
        stream.push(t);
    }
    if let Some(e) = end {
        total += b.next_logprobs(&[], &stream).unwrap()[e as usize];
    }
    total
}

/// Best output by enumerating every content sequence up to `max_len`.
pub fn oracle_exhaustive(
    b: &dyn LmBackend,
    prompt: &[TokenId],
    content: &[TokenId],
    end: TokenId,
    min_len: usize,
    max_len: usize,
) -> (Vec<TokenId>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for len in 0..=max_len {
        for seq in &frontier {
            let end_tok = if len == max_len {
                None
            } else if len >= min_len {
                Some(end)
            } else {
                continue;
            };
            let lp = oracle_seq_logprob(b, prompt, seq, end_tok);
            if lp > best.1 {
                best = (seq.clone(), lp);
            }
        }
        frontier = frontier
            .iter()
            .flat_map(|s| content.iter().map(move |&c| [s.as_slice(), &[c]].concat()))
            .collect();
    }
    best
}

/// Argmax rollout with the lowest id winning ties.
pub fn oracle_greedy(
    b: &dyn LmBackend,
    prompt: &[TokenId],
    end: TokenId,
    min_len: usize,
    max_len: usize,
) -> Vec<TokenId> {
    let mut stream = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp: Array1<f64> = b.next_logprobs(&[], &stream).unwrap();
        let mut best: Option<usize> = None;
        for (i, &x) in lp.iter().enumerate() {
            if i == end as usize && out.len() < min_len {
                continue;
            }
            if best.is_none_or(|j| x > lp[j]) {
                best = Some(i);
            }
        }
        let t = best.unwrap() as TokenId;
        if t == end {
            break;
        }
        out.push(t);
        stream.push(t);
    }
    out
}

const WORDS: [&str; 24] = [
    "the", "cat", "sat", "on", "a", "mat", "i", "love", "hiking", "rain", "music", "is", "very",
    "good", "we", "you", "red", "blue", "tree", "river", ",", ".", "?", "!",
];

fn phrase(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random valid sample for `task`.
pub fn random_sample(rng: &mut ChaCha8Rng, task: Task, id: usize) -> DialogSample {
    let (gs, strategy) = match task {
        Task::Esconv => {
            let s = *ESCONV_STRATEGIES.choose(rng).unwrap();
            (GroundingSource::strategy(s), Some(s.to_string()))
        }
        _ => {
            let n = rng.random_range(1..=3);
            (
                GroundingSource::text((0..n).map(|_| phrase(rng, 1, 8))),
                None,
            )
        }
    };
    let turns = rng.random_range(1..=6);
    let context = (0..turns)
        .map(|i| Utterance {
            speaker: if (turns - i) % 2 == 1 {
                Speaker::User
            } else {
                Speaker::System
            },
            text: phrase(rng, 1, 7),
        })
        .collect();
    DialogSample {
        dialog_id: format!("r{id:05}"),
        task,
        gs,
        context,
        response: phrase(rng, 1, 9),
        designated_strategy: strategy,
        has_reference: true,
        domain: None,
    }
}

/// A tokenizer covering the fixture words, every template text, and all
/// indicator tokens of `task`.
pub fn fixture_tokenizer(task: Task) -> Tokenizer {
    let mut texts = scheme_vocabulary_texts(task, None);
    texts.extend(WORDS.iter().map(|w| w.to_string()));
    let base = Tokenizer::build(texts.iter().map(String::as_str));
    let extra: Vec<String> = IndicatorSet::for_task(task)
        .all()
        .iter()
        .map(|i| i.token.clone())
        .collect();
    base.extended(&extra).unwrap()
}

pub fn read_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

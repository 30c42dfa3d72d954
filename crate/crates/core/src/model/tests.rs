use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backend::{self, LmBackend};
use super::decode::*;
use super::*;
use crate::embedding::EmbeddingTable;
use crate::exec::Execution;
use crate::prompting::{AssembledInput, Layout, SegmentKind};
use crate::text::{TokenId, SPECIALS};

fn vocab(n_words: usize) -> Vec<String> {
    SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_words).map(|i| format!("w{i}")))
        .collect()
}

fn tiny_config(tie: bool) -> ToyLmConfig {
    ToyLmConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_positions: 32,
        tie_weights: tie,
        init_std: 0.3,
    }
}

fn tiny(tie: bool, seed: u64) -> ToyLm {
    ToyLm::new(tiny_config(tie), vocab(7), seed).unwrap()
}

fn input(prompt: &[TokenId], response: &[TokenId], end: TokenId) -> AssembledInput {
    let mut decoder = prompt.to_vec();
    decoder.extend_from_slice(response);
    decoder.push(end);
    let n = decoder.len();
    let resp_start = prompt.len();
    AssembledInput {
        layout: Layout::SingleSequence,
        encoder: vec![],
        encoder_segments: vec![],
        decoder_segments: (0..n)
            .map(|i| {
                if i + 1 == n {
                    SegmentKind::EndToken
                } else if i >= resp_start {
                    SegmentKind::Response
                } else {
                    SegmentKind::Utterance
                }
            })
            .collect(),
        loss_mask: (0..n).map(|i| i >= resp_start).collect(),
        decoder,
        decoder_start: None,
        end_token: end,
    }
}

/// A backend whose next-token distribution is a fixed table lookup keyed by
/// the number of generated tokens after a prompt of length `prompt_len`.
struct TableBackend {
    prompt_len: usize,
    rows: Vec<Vec<f64>>,
}

impl LmBackend for TableBackend {
    fn vocab_size(&self) -> usize {
        self.rows[0].len()
    }
    fn supports(&self, _: Layout) -> bool {
        true
    }
    fn stream_logprobs(&self, _: &[TokenId], stream: &[TokenId]) -> crate::Result<Array2<f64>> {
        let v = self.vocab_size();
        let mut out = Array2::from_elem((stream.len(), v), -(v as f64).ln());
        for t in 0..stream.len() {
            let generated = (t + 1).saturating_sub(self.prompt_len);
            if t + 1 >= self.prompt_len {
                let row = &self.rows[generated.min(self.rows.len() - 1)];
                for (j, p) in row.iter().enumerate() {
                    out[[t, j]] = p.ln();
                }
            }
        }
        Ok(out)
    }
    fn embeddings(&self) -> Option<EmbeddingTable> {
        None
    }
    fn trainable(&self) -> bool {
        false
    }
}

#[test]
fn zero_output_layer_gives_uniform_rows() {
    let mut m = tiny(false, 1);
    m.params.out.as_mut().unwrap().fill(0.0);
    let lp = m.forward_logprobs(&[5, 6, 7, 8]).unwrap();
    let expect = -(m.vocab_size() as f64).ln();
    assert!(lp.iter().all(|&v| (v - expect).abs() < 1e-12));
}

#[test]
fn zero_tied_embeddings_give_uniform_rows_and_ln_v_loss() {
    let mut m = tiny(true, 1);
    m.params.tok_emb.fill(0.0);
    let tokens = [5, 6, 7, 8, 9];
    let mask = [false, false, true, true, true];
    let (nll, n) = m.masked_nll(&tokens, &mask).unwrap();
    assert_eq!(n, 3);
    assert!((nll / 3.0 - (m.vocab_size() as f64).ln()).abs() < 1e-12);
}

#[test]
fn rows_are_normalized_and_causal() {
    let m = tiny(true, 2);
    let base = [5, 9, 6, 3, 10];
    let lp = m.forward_logprobs(&base).unwrap();
    for row in lp.rows() {
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let mut longer = base.to_vec();
    longer.extend([7, 11]);
    let lp2 = m.forward_logprobs(&longer).unwrap();
    for t in 0..base.len() {
        for j in 0..m.vocab_size() {
            assert!((lp[[t, j]] - lp2[[t, j]]).abs() < 1e-12);
        }
    }
    let next = m.next_logprobs(&base).unwrap();
    for j in 0..m.vocab_size() {
        assert!((next[j] - lp[[base.len() - 1, j]]).abs() < 1e-12);
    }
}

#[test]
fn overlong_input_is_a_length_error() {
    let m = tiny(true, 3);
    let long = vec![5; 33];
    assert!(matches!(
        m.forward_logprobs(&long),
        Err(crate::Error::Length { len: 33, max: 32 })
    ));
    assert!(matches!(
        m.forward_logprobs(&[99]),
        Err(crate::Error::Vocab(_))
    ));
}

#[test]
fn empty_mask_is_rejected() {
    let m = tiny(true, 3);
    assert!(matches!(
        m.masked_nll(&[5, 6], &[false, false]),
        Err(crate::Error::EmptyMask)
    ));
}

#[test]
fn single_token_at_half_probability_costs_ln_2() {
    let b = TableBackend {
        prompt_len: 1,
        rows: vec![vec![0.5, 0.25, 0.25]],
    };
    let x = input(&[1], &[], 0);
    let loss = backend::nll_loss(&b, &x).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn perplexity_of_uniform_model_equals_vocab_size() {
    let b = TableBackend {
        prompt_len: 1,
        rows: vec![vec![0.1; 10]],
    };
    let xs = vec![input(&[1], &[2, 3], 0), input(&[4, 4], &[5], 0)];
    let ppl = backend::perplexity(&b, &xs, Execution::Sequential).unwrap();
    assert!((ppl - 10.0).abs() < 1e-9);
}

#[test]
fn logit_gradient_vanishes_on_unmasked_rows() {
    let m = tiny(true, 4);
    let tokens = [5, 6, 7, 8, 9, 10];
    let mask = [false, false, false, true, true, false];
    let g = m.logit_gradients(&tokens, &mask).unwrap();
    for t in 0..tokens.len() {
        let predicts_target = t + 1 < tokens.len() && mask[t + 1];
        let zero = g.row(t).iter().all(|&v| v == 0.0);
        assert_eq!(zero, !predicts_target, "row {t}");
    }
}

#[test]
fn parameters_after_last_target_get_zero_gradient() {
    let m = tiny(true, 5);
    let tokens = [5, 6, 7, 8, 9, 10];
    let mask = [false, true, true, false, false, false];
    let (_, _, g) = m.loss_and_grad(&tokens, &mask, 1.0).unwrap();
    // Rows 0 and 1 predict the targets; positions 2.. influence nothing.
    for t in 2..tokens.len() {
        assert!(g.pos_emb.row(t).iter().all(|&v| v == 0.0), "position {t}");
    }
    assert!(g.pos_emb.row(1).iter().any(|&v| v != 0.0));
}

#[test]
fn unused_vocabulary_row_gets_exactly_zero_gradient() {
    let m = tiny(false, 6);
    let tokens = [5, 6, 7, 5];
    let mask = [false, false, true, true];
    let (_, _, g) = m.loss_and_grad(&tokens, &mask, 1.0).unwrap();
    for unused in [0usize, 1, 8, 11] {
        assert!(g.tok_emb.row(unused).iter().all(|&v| v == 0.0));
    }
    assert!(g.tok_emb.row(6).iter().any(|&v| v != 0.0));
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (seed, tie) in [(1, true), (2, false), (3, true)] {
        let m = tiny(tie, seed);
        let tokens = transformer::random_tokens(&mut rng, m.vocab_size(), 9);
        let mask: Vec<bool> = (0..9).map(|i| i >= 4).collect();
        let err = gradcheck(&m, &tokens, &mask, 1e-5, 60, &mut rng).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn batch_gradient_is_identical_across_execution_strategies() {
    let m = tiny(true, 8);
    let xs = [
        input(&[5, 6], &[7, 8], 2),
        input(&[9], &[10, 5, 6], 2),
        input(&[11, 11, 5], &[6], 2),
    ];
    let refs: Vec<&AssembledInput> = xs.iter().collect();
    let (l1, g1) = batch_gradient(&m, &refs, Execution::Sequential).unwrap();
    let (l2, g2) = batch_gradient(&m, &refs, Execution::Parallel).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn zero_epochs_returns_initial_model() {
    let m = tiny(true, 9);
    let train = vec![input(&[5, 6], &[7], 2)];
    let valid = vec![input(&[8], &[9, 10], 2)];
    let cfg = TrainConfig {
        epochs: 0,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let ck = train_inputs(&m, &train, &valid, &cfg, Execution::Sequential).unwrap();
    assert_eq!(ck.model, m);
    assert_eq!(ck.epoch, 0);
    let ppl = backend::perplexity(&m, &valid, Execution::Sequential).unwrap();
    assert_eq!(ck.valid_ppl, ppl);
}

#[test]
fn training_is_deterministic_and_roundtrips_through_checkpoint_files() {
    let m = tiny(true, 10);
    let train: Vec<_> = (0..7)
        .map(|i| input(&[5 + i % 3, 6], &[7 + i % 4], 2))
        .collect();
    let valid = vec![input(&[5, 6], &[8], 2)];
    let cfg = TrainConfig {
        epochs: 3,
        warmup_steps: 1,
        learning_rate: 1e-2,
        batch_size: 2,
        run_seed: 4,
        ..TrainConfig::default()
    };
    let a = train_inputs(&m, &train, &valid, &cfg, Execution::Parallel).unwrap();
    let b = train_inputs(&m, &train, &valid, &cfg, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 3);

    let mut buf = Vec::new();
    a.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back, a);
    let mut buf2 = Vec::new();
    back.write_to(&mut buf2).unwrap();
    assert_eq!(buf, buf2);
    assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
}

#[test]
fn warmup_longer_than_run_is_rejected() {
    let m = tiny(true, 11);
    let train = vec![input(&[5], &[6], 2)];
    let cfg = TrainConfig {
        epochs: 1,
        warmup_steps: 5,
        ..TrainConfig::default()
    };
    assert!(train_inputs(&m, &train, &[], &cfg, Execution::Sequential).is_err());
}

#[test]
fn extending_vocab_adds_rows() {
    let m = tiny(false, 12);
    let v = Array1::from_elem(8, 0.5);
    let (m2, ids) = m
        .extend_vocab(&["<gs>".to_string()], std::slice::from_ref(&v))
        .unwrap();
    assert_eq!(ids, vec![12]);
    assert_eq!(m2.vocab_size(), 13);
    assert_eq!(m2.params.tok_emb.row(12), v);
    assert!(m2
        .params
        .out
        .as_ref()
        .unwrap()
        .row(12)
        .iter()
        .all(|&x| x == 0.0));
    assert_eq!(m2.forward_logprobs(&[5, 12]).unwrap().ncols(), 13);
}

fn beam_cfg(beam: usize, min_len: usize, max_len: usize) -> GenerationConfig {
    GenerationConfig {
        mode: DecodeMode::Beam,
        beam_size: beam,
        top_p: 0.9,
        temperature: 1.0,
        min_len,
        max_len,
        run_seed: 0,
        length_normalize: false,
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..20 {
        let b = HashBackend::new(6, seed);
        let x = input(&[1, 3], &[4], 2);
        let greedy = generate_greedy(&b, &x, 2, 8).unwrap();
        let beam = generate_beam(&b, &x, &beam_cfg(1, 2, 8)).unwrap();
        assert_eq!(greedy, beam, "seed {seed}");
    }
}

#[test]
fn min_len_blocks_early_end() {
    // The end token (id 2) is by far the most likely at every step.
    let b = TableBackend {
        prompt_len: 1,
        rows: vec![vec![0.05, 0.05, 0.8, 0.1]],
    };
    let x = input(&[1], &[3], 2);
    let out = generate_beam(&b, &x, &beam_cfg(3, 3, 6)).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|&t| t != 2));
    let greedy = generate_greedy(&b, &x, 3, 6).unwrap();
    assert_eq!(greedy.len(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = GenerationConfig {
        mode: DecodeMode::TopP,
        ..beam_cfg(1, 3, 6)
    };
    for _ in 0..20 {
        assert!(generate_top_p(&b, &x, &cfg, &mut rng).unwrap().len() >= 3);
    }
}

/// Every complete output: content sequences of length in [min_len, max_len),
/// each followed by the end token, plus all sequences of exactly max_len.
fn enumerate_outputs(
    content: &[TokenId],
    min_len: usize,
    max_len: usize,
) -> Vec<(Vec<TokenId>, bool)> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for len in 0..=max_len {
        for seq in &frontier {
            if len == max_len {
                out.push((seq.clone(), false));
            } else if len >= min_len {
                out.push((seq.clone(), true));
            }
        }
        if len < max_len {
            frontier = frontier
                .iter()
                .flat_map(|s| content.iter().map(move |&c| [s.clone(), vec![c]].concat()))
                .collect();
        }
    }
    out
}

fn exhaustive_best(
    b: &dyn LmBackend,
    x: &AssembledInput,
    content: &[TokenId],
    min_len: usize,
    max_len: usize,
) -> (Vec<TokenId>, f64) {
    enumerate_outputs(content, min_len, max_len)
        .into_iter()
        .map(|(seq, end)| {
            let lp = sequence_logprob(b, x, &seq, end, min_len).unwrap();
            (seq, lp)
        })
        .fold((vec![], f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
}

#[test]
fn beam_matches_exhaustive_search_on_three_tokens() {
    // Vocabulary {0, 1, 2} with 2 as the end token, max_len 2, beam 3.
    for seed in 0..30 {
        let b = HashBackend::new(3, seed);
        let x = input(&[0], &[1], 2);
        let (best, _) = exhaustive_best(&b, &x, &[0, 1], 0, 2);
        assert_eq!(
            generate_beam(&b, &x, &beam_cfg(3, 0, 2)).unwrap(),
            best,
            "seed {seed}"
        );
    }
}

#[test]
fn beam_matches_exhaustive_search_on_micro_vocabularies() {
    for seed in 0..20 {
        for (v, max_len, min_len) in [(3usize, 3usize, 0usize), (4, 3, 1), (4, 2, 0)] {
            let b = HashBackend::new(v, 100 + seed);
            let x = input(&[0], &[1], 2);
            let content: Vec<TokenId> = (0..v as TokenId).filter(|&t| t != 2).collect();
            let (best, best_lp) = exhaustive_best(&b, &x, &content, min_len, max_len);
            let width: usize = (0..=max_len as u32).map(|l| content.len().pow(l)).sum();
            let got = generate_beam(&b, &x, &beam_cfg(width, min_len, max_len)).unwrap();
            let got_end = got.len() < max_len;
            let got_lp = sequence_logprob(&b, &x, &got, got_end, min_len).unwrap();
            assert_eq!(got, best, "seed {seed} v {v} len {max_len}");
            assert!((got_lp - best_lp).abs() < 1e-12);
        }
    }
}

#[test]
fn nucleus_keeps_smallest_prefix_reaching_p() {
    let kept = nucleus_filter(&[0.5, 0.3, 0.2], 0.8);
    assert_eq!(kept.len(), 2);
    assert!((kept[0].1 - 0.625).abs() < 1e-12 && (kept[1].1 - 0.375).abs() < 1e-12);
    assert_eq!(nucleus_filter(&[0.5, 0.3, 0.2], 0.9).len(), 3);
    let tiny_p = nucleus_filter(&[0.2, 0.5, 0.3], 1e-9);
    assert_eq!(tiny_p, vec![(1, 1.0)]);
    // Ties resolve to the lower id.
    assert_eq!(nucleus_filter(&[0.4, 0.4, 0.2], 0.1), vec![(0, 1.0)]);
}

#[test]
fn tiny_p_decoding_is_greedy() {
    for seed in 0..10 {
        let b = HashBackend::new(7, seed);
        let x = input(&[1, 4], &[5], 2);
        let cfg = GenerationConfig {
            mode: DecodeMode::TopP,
            top_p: 1e-9,
            temperature: 0.7,
            ..beam_cfg(1, 1, 10)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = generate_top_p(&b, &x, &cfg, &mut rng).unwrap();
        assert_eq!(sampled, generate_greedy(&b, &x, 1, 10).unwrap());
    }
}

#[test]
fn full_nucleus_sampling_matches_model_distribution() {
    let b = HashBackend {
        vocab_size: 6,
        seed: 3,
        sharpness: 1.0,
    };
    let lp = b.next_logprobs(&[], &[1, 2, 3]).unwrap();
    let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let n = 100_000;
    let mut counts = [0usize; 6];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..n {
        counts[sample_top_p(&lp, 1.0, 1.0, &mut rng) as usize] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (*c as f64 - mean).abs() <= 3.0 * sd,
            "count {c} vs {mean} ± {sd}"
        );
    }
}

#[test]
fn top_p_generation_is_reproducible() {
    let b = HashBackend::new(9, 5);
    let x = input(&[1, 4], &[5], 2);
    let cfg = GenerationConfig {
        run_seed: 17,
        ..GenerationConfig::for_task(crate::corpus::Task::Pc)
    };
    assert_eq!(
        generate(&b, &x, &cfg, 3).unwrap(),
        generate(&b, &x, &cfg, 3).unwrap()
    );
}

#[test]
fn toy_lm_rejects_encoder_inputs() {
    let m = tiny(true, 1);
    assert!(!LmBackend::supports(&m, Layout::EncoderDecoder));
    assert!(matches!(
        m.stream_logprobs(&[5], &[6]),
        Err(crate::Error::Unsupported(_))
    ));
}

#[test]
fn hash_backend_is_causal_with_an_encoder() {
    let b = HashBackend::new(8, 1);
    let a = b.stream_logprobs(&[4, 5], &[3, 6, 7]).unwrap();
    let c = b.stream_logprobs(&[4, 5], &[3, 6, 7, 1, 2]).unwrap();
    assert_eq!(
        a.rows().into_iter().collect::<Vec<_>>(),
        c.rows().into_iter().take(3).collect::<Vec<_>>()
    );
    let other = b.stream_logprobs(&[4, 6], &[3]).unwrap();
    assert_ne!(a.row(0), other.row(0));
}

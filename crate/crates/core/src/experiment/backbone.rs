//! Desk-scale backbone: vocabulary construction and language-model
//! pretraining of the toy LM before few-shot fine-tuning.

use log::info;

use crate::corpus::{truncate_sample, DialogSample, Task, TruncationLimits};
use crate::error::Result;
use crate::exec::Execution;
use crate::experiment::config::PretrainConfig;
use crate::model::{train_inputs, Checkpoint, ToyLm, ToyLmConfig, TrainConfig};
use crate::prompting::{
    assemble, default_discrete_template, AssembledInput, DiscreteTemplate, Layout, PromptScheme,
};
use crate::seed;
use crate::text::{TokenId, Tokenizer};

/// Vocabulary over every text the corpora and prompt templates can render.
pub fn build_vocabulary(
    task: Task,
    corpora: &[&[DialogSample]],
    template: Option<&DiscreteTemplate>,
) -> Tokenizer {
    let mut texts = crate::prompting::scheme_vocabulary_texts(task, template);
    for corpus in corpora {
        for s in *corpus {
            texts.extend(s.gs.items.iter().cloned());
            texts.extend(s.context.iter().map(|u| u.text.clone()));
            texts.push(s.response.clone());
        }
    }
    Tokenizer::build(texts.iter().map(String::as_str))
}

fn full_sequence(mut x: AssembledInput) -> AssembledInput {
    x.loss_mask = (0..x.decoder.len()).map(|i| i > 0).collect();
    x
}

/// Renders a sample in the continuous layout with every indicator replaced
/// by the words of its explanation.
fn role_word_input(
    sample: &DialogSample,
    task: Task,
    tok: &Tokenizer,
    scheme: &PromptScheme,
) -> Result<AssembledInput> {
    let indicators = scheme.indicators.all();
    let names: Vec<String> = indicators.iter().map(|i| i.token.clone()).collect();
    let extended = tok.extended(&names)?;
    let rendered = assemble(sample, scheme, Layout::SingleSequence, &extended)?;
    let base = tok.len() as TokenId;
    let mut decoder = Vec::new();
    let mut segments = Vec::new();
    for (&id, &kind) in rendered.decoder.iter().zip(&rendered.decoder_segments) {
        if id >= base {
            for w in tok.encode(&indicators[(id - base) as usize].explanation) {
                decoder.push(w);
                segments.push(kind);
            }
        } else {
            decoder.push(id);
            segments.push(kind);
        }
    }
    debug_assert_eq!(task, sample.task);
    Ok(full_sequence(AssembledInput {
        layout: Layout::SingleSequence,
        encoder: vec![],
        encoder_segments: vec![],
        loss_mask: vec![],
        decoder,
        decoder_segments: segments,
        decoder_start: None,
        end_token: rendered.end_token,
    }))
}

/// Pretraining inputs: alternately the discrete rendering and the role-word
/// rendering of each sample, with a language-modelling loss on every token.
pub fn pretrain_inputs(
    samples: &[DialogSample],
    task: Task,
    tok: &Tokenizer,
    template: Option<&DiscreteTemplate>,
    limits: &TruncationLimits,
    pretrain_seed: u64,
) -> Result<Vec<AssembledInput>> {
    let template = template
        .cloned()
        .unwrap_or_else(|| default_discrete_template(task));
    let discrete = PromptScheme::discrete(task, template);
    let continuous = PromptScheme::continuous(task);
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let s = truncate_sample(s, limits);
            if seed::derive_seed(pretrain_seed, i as u64).is_multiple_of(2) {
                Ok(full_sequence(assemble(
                    &s,
                    &discrete,
                    Layout::SingleSequence,
                    tok,
                )?))
            } else {
                role_word_input(&s, task, tok, &continuous)
            }
        })
        .collect()
}

/// Trains a fresh toy LM on the pretraining corpus and returns the
/// checkpoint with the best held-out perplexity.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_backbone(
    cfg: &PretrainConfig,
    model_cfg: &ToyLmConfig,
    tok: &Tokenizer,
    samples: &[DialogSample],
    task: Task,
    template: Option<&DiscreteTemplate>,
    limits: &TruncationLimits,
    exec: Execution,
) -> Result<Checkpoint> {
    let inputs = pretrain_inputs(samples, task, tok, template, limits, cfg.seed)?;
    let n_hold = ((inputs.len() as f64) * cfg.holdout).round() as usize;
    let (train, hold) = inputs.split_at(inputs.len() - n_hold);
    let model = ToyLm::new(
        model_cfg.clone(),
        tok.tokens().to_vec(),
        seed::derive_seed(cfg.seed, seed::tag_of("backbone-init")),
    )?;
    let train_cfg = TrainConfig {
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
        epochs: cfg.epochs,
        run_seed: cfg.seed,
        ..TrainConfig::default()
    };
    info!(
        "pretraining backbone: {} sequences, {} held out, vocab {}",
        train.len(),
        hold.len(),
        tok.len()
    );
    let ck = train_inputs(&model, train, hold, &train_cfg, exec)?;
    info!(
        "backbone held-out ppl {:.3} (epoch {})",
        ck.valid_ppl, ck.epoch
    );
    Ok(ck)
}

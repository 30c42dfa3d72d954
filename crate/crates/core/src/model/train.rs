//! Masked-NLL fine-tuning with per-epoch checkpoint selection.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::backend;
use super::optim::{adamw_step, lr_schedule, AdamState, AdamWHyper};
use super::transformer::{Params, ToyLm};
use crate::corpus::SplitSet;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::prompting::{assemble, AssembledInput, Layout, PromptScheme};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub run_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            learning_rate: 2e-5,
            warmup_steps: 5,
            epochs: 10,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            run_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::validation("train", field, msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "moment constants must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad(
                "weight_decay",
                "must be non-negative, with eps positive".into(),
            );
        }
        let total = self.total_steps(n_train);
        if self.epochs > 0 && self.warmup_steps > total {
            return bad(
                "warmup_steps",
                format!(
                    "{} exceeds the {total} optimizer steps of this run",
                    self.warmup_steps
                ),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
}

/// The selected parameters with the validation perplexity that chose them.
/// `epoch` 0 means the initial parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyLm,
    pub valid_ppl: f64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Sums per-sample gradients of one batch, in sample order. Returns the
/// batch mean loss over target tokens.
pub fn batch_gradient(
    model: &ToyLm,
    batch: &[&AssembledInput],
    exec: Execution,
) -> Result<(f64, Params)> {
    let total: usize = batch.iter().map(|x| x.target_count()).sum();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / total as f64;
    let parts = exec.try_map(batch, |x| {
        model.loss_and_grad(&x.stream(), &x.stream_mask(), scale)
    })?;
    let mut iter = parts.into_iter();
    let (mut nll, _, mut grads) = iter.next().expect("non-empty batch");
    for (l, _, g) in iter {
        nll += l;
        grads.accumulate(&g);
    }
    Ok((nll * scale, grads))
}

fn check_lengths(model: &ToyLm, inputs: &[AssembledInput]) -> Result<()> {
    let max = model.config().max_positions;
    for x in inputs {
        if x.layout != Layout::SingleSequence {
            return Err(Error::Unsupported(
                "the toy LM trains on single-sequence inputs only".into(),
            ));
        }
        let len = x.stream().len();
        if len > max {
            return Err(Error::Length { len, max });
        }
    }
    Ok(())
}

/// Trains on assembled inputs. The returned checkpoint is the epoch with the
/// lowest validation perplexity (earliest on ties); an empty validation set
/// falls back to training perplexity.
pub fn train_inputs(
    model: &ToyLm,
    train: &[AssembledInput],
    valid: &[AssembledInput],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<Checkpoint> {
    if train.is_empty() {
        return Err(Error::validation(
            "train",
            "split",
            "training split is empty",
        ));
    }
    cfg.validate(train.len())?;
    check_lengths(model, train)?;
    check_lengths(model, valid)?;
    let select = if valid.is_empty() {
        warn!("empty validation split; selecting checkpoints by training perplexity");
        train
    } else {
        valid
    };

    let mut current = model.clone();
    let initial_ppl = backend::perplexity(&current, select, exec)?;
    let mut best = Checkpoint {
        model: current.clone(),
        valid_ppl: initial_ppl,
        epoch: 0,
        history: Vec::new(),
    };
    let mut history = Vec::new();
    let mut state = AdamState::for_params(&current.params);
    let hyper = cfg.hyper();
    let total_steps = cfg.total_steps(train.len());
    let mut shuffle_rng = seed::rng_from(cfg.run_seed, seed::tag_of("shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&AssembledInput> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(&current, &batch, exec)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: b,
                    loss,
                });
            }
            let lr = cfg.learning_rate * lr_schedule(step, cfg.warmup_steps, total_steps);
            adamw_step(&mut current.params, &grads, &mut state, &hyper, lr)?;
            step += 1;
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let valid_ppl = backend::perplexity(&current, select, exec)?;
        if !valid_ppl.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: batches,
                loss: valid_ppl.ln(),
            });
        }
        debug!("epoch {epoch}: train loss {train_loss:.4}, valid ppl {valid_ppl:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_ppl,
        });
        if valid_ppl < best.valid_ppl {
            best.model = current.clone();
            best.valid_ppl = valid_ppl;
            best.epoch = epoch;
        }
    }
    info!(
        "selected epoch {} of {} (valid ppl {:.4}, initial {:.4})",
        best.epoch, cfg.epochs, best.valid_ppl, initial_ppl
    );
    best.history = history;
    Ok(best)
}

/// Assembles a split under `scheme` with the model's vocabulary and trains.
pub fn train(
    model: &ToyLm,
    split: &SplitSet,
    scheme: &PromptScheme,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let tok = model.tokenizer();
    let build = |samples: &[crate::corpus::DialogSample]| {
        samples
            .iter()
            .map(|s| assemble(s, scheme, Layout::SingleSequence, &tok))
            .collect::<Result<Vec<_>>>()
    };
    let train_in = build(&split.train)?;
    let valid_in = build(&split.valid)?;
    train_inputs(model, &train_in, &valid_in, cfg, Execution::default())
}

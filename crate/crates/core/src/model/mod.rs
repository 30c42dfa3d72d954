//! The toy language model, its optimizer, training loop and decoders.

pub mod backend;
pub mod checkpoint;
pub mod decode;
pub mod gradcheck;
pub mod optim;
pub mod train;
pub mod transformer;

pub use backend::{masked_nll, nll_loss, perplexity, score, HashBackend, LmBackend};
pub use decode::{
    generate, generate_beam, generate_greedy, generate_top_p, nucleus_filter, DecodeMode,
    GenerationConfig,
};
pub use gradcheck::gradcheck;
pub use optim::{adamw_step, lr_schedule, AdamState, AdamWHyper};
pub use train::{batch_gradient, train, train_inputs, Checkpoint, EpochRecord, TrainConfig};
pub use transformer::{Params, ToyLm, ToyLmConfig};

#[cfg(test)]
mod tests;

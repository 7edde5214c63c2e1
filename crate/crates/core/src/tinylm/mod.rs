//! Tiny decoder-only language model, synthetic corpus, training, decoding,
//! and perplexity.

mod config;
mod corpus;
mod eval;
mod model;
mod train;

pub use config::LmConfig;
pub use corpus::{
    generate_corpus, generate_expert_corpus, ClassificationProbes, DialogueDataset, Grammar, Pair,
    Provenance, MAX_CORPUS_PAIRS,
};
pub use eval::{greedy_decode, perplexity, perplexity_from_logprobs, target_logprobs};
pub use model::{block_matrices, param_schema, TinyLM};
pub use train::{dataset_loss, loss_gradients, train, TrainConfig, TrainLog, Trainable, Trainer};


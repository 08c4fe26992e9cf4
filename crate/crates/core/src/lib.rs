//! Episodic-memory optimization of in-context example ordering.
//!
//! Training queries are embedded, their `m` closest in-context examples are
//! retrieved, and each ordering (a permutation of similarity ranks) is scored
//! by a reward oracle. The best reward per (state, ordering) is kept in an
//! [`EpisodicMemory`]; at test time the ordering with the highest
//! similarity-weighted estimate over the `k` nearest stored states wins.

pub mod action;
pub mod dataset;
pub mod encoder;
pub mod engine;
mod error;
pub mod memory;
pub mod metrics;
pub mod prompt;
pub mod remote;
pub mod reward;
pub mod selection;
pub mod simenv;

pub use action::{action_key, enumerate_actions, parse_action_key, reorder, Action};
pub use dataset::{Record, RetrievalField};
pub use encoder::{
    cosine_similarity, encode_state, hash_test_encoder, CachedEncoder, Embedding, EncoderBackend,
};
pub use engine::{
    epsilon_at, evaluate, infer, train, ExplorationMode, Method, Pipeline, RunReport, TrainConfig,
};
pub use error::{PoemError, Result};
pub use memory::{EpisodicMemory, StateRecord};
pub use prompt::{build_prompt, render_example, PromptSpec, Template};
pub use reward::{
    classification_reward, exact_match_reward, sequence_reward, LmBackend, LmOracle, RewardConfig,
    RewardKind, RewardOracle,
};
pub use selection::{select_examples, Example, InContextSet};

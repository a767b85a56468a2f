//! Dynamic token-tree speculative decoding.
//!
//! A draft model proposes a tree of candidate continuations whose shape
//! adapts to the draft distribution; a target model verifies the whole tree
//! in one pass with multi-branch rejection sampling, so the output follows
//! the target exactly.

pub mod categorical;
pub mod cli;
pub mod construct;
pub mod engine;
pub mod error;
pub mod lm;
pub mod mask_opt;
pub mod oracle;
pub mod par;
pub mod token_tree;
pub mod verify;

pub use categorical::{Categorical, TokenId};
pub use construct::{build_tree_fixed, build_tree_threshold, CostParams, LatencyMode};
pub use engine::{generate, GenConfig, RunMetrics, StepMetrics, Structure};
pub use error::{Error, Result};
pub use lm::{LanguageModel, ModelPairSpec, Tempered};
pub use token_tree::{NodeId, Position, TokenTree};
pub use verify::{verify_tree, VerifyResult};

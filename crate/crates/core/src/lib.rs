//! Prompt optimization for text-to-video generation.
//!
//! The pipeline has three stages:
//!
//! 1. [`refine`]: augment a user prompt with modifiers retrieved from a
//!    [`graph::RelationGraph`], refactor it toward the training-prompt format,
//!    and let a discriminator choose between that and a naive rewrite.
//! 2. [`sspo`]: per-sample test-time refinement. Generate a video, collect
//!    misalignment, verifier and task feedback into a memory, rewrite, repeat,
//!    then pick the best round by average rank.
//! 3. [`export`]: emit instruction-tuning pairs and prompt statistics.
//!
//! Every model sits behind a trait in [`providers`]; the bundled mocks are
//! deterministic and define offline behavior.

pub mod corpus;
pub mod embedding;
pub mod export;
pub mod graph;
pub mod providers;
pub mod refine;
pub mod sspo;
pub mod templates;
pub mod text;

pub use corpus::{Corpus, PromptRecord, PromptSource};
pub use embedding::{EmbeddingVector, VectorIndex};
pub use export::{InstructionPair, LengthHistogram};
pub use graph::{ModifierCategory, ModifierNode, RelationGraph, SceneNode};
pub use providers::{MisalignmentReport, ProviderSet, VerifierScore, VideoRef};
pub use refine::{Branch, CandidatePrompt, Stage1Result};
pub use sspo::{FeedbackMemory, FeedbackRecord, LoopConfig, RankingTable};

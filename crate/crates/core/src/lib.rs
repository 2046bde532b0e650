//! Update-then-rank comment updating.
//!
//! Candidate updated comments are generated by prompting an LLM with
//! retrieved demonstrations ([`augment`], [`prompt`], [`retrieve`], [`llm`]),
//! flattened into edit-token sequences ([`flatten`]) and ranked by a
//! dual-encoder model ([`rank`]). [`metrics`] scores predictions against
//! ground truth.
//!
//! Model math is generic over [`Scalar`]; the aliases below fix the common
//! precisions.

pub mod augment;
pub mod error;
pub mod flatten;
pub mod llm;
pub mod metrics;
pub mod normalize;
pub mod pipeline;
pub mod prompt;
pub mod rank;
pub mod retrieve;
pub mod sample;
pub mod scalar;
pub mod synthetic;
pub mod tokenize;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CupRankF32 = rank::CupRank<f32>;
pub type CupRankF64 = rank::CupRank<f64>;
pub type RankNetF32 = rank::RankNet<f32>;
pub type RankNetF64 = rank::RankNet<f64>;
pub type RankerParamsF32 = rank::RankerParams<f32>;
pub type RankerParamsF64 = rank::RankerParams<f64>;

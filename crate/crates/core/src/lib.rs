//! Training and verification harness for tool-using ranking agents.
//!
//! A request pairs a user's recent history with a shuffled candidate set that
//! contains exactly one logged next item. An agent may call recommendation
//! tools (profile, item lookup, candidate analysis, behavioural statistics and
//! collaborative retrieval) before emitting a top-K list. The crate provides:
//!
//! - [`corpus`]: catalog/interaction model, JSONL ingestion, a planted
//!   synthetic generator and chronological request construction.
//! - [`collab`]: a co-occurrence embedding model behind the collaborative tools.
//! - [`tools`]: the tool registry and the seven tools.
//! - [`agentloop`]: the think/act/observe/rank loop and output validation.
//! - [`policy`]: the policy abstraction and a linear reference policy with a
//!   Plackett–Luce ranking head and exact gradients.
//! - [`reward`], [`grpo`], [`ppr`]: list-wise reward, group-relative policy
//!   optimisation and pair-wise preference refinement.
//! - [`metrics`] and [`verify`]: evaluation and numerical checks of the
//!   estimator and pair-loss properties against brute-force oracles.
//!
//! The guide under `book/` walks through each piece; its snippets run as
//! doctests of this crate.

pub mod agentloop;
pub mod collab;
pub mod corpus;
pub mod env;
mod error;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod ppr;
pub mod reward;
pub mod rng;
pub mod tools;
pub mod verify;

#[cfg(test)]
mod testutil;

pub use env::Environment;
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/tools.md")]
    mod tools {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/reward.md")]
    mod reward {}
    #[doc = include_str!("../../../book/src/grpo.md")]
    mod grpo {}
    #[doc = include_str!("../../../book/src/ppr.md")]
    mod ppr {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}

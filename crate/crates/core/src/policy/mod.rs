//! Policies: anything that turns a decision state into the next step.
//!
//! [`LinearPolicy`] is the reference implementation. It scores actions with
//! a softmax over per-action feature blocks and ranks candidates with a
//! Plackett–Luce distribution over linear scores, so every emitted step has
//! an exact log-probability and gradient.

mod features;
mod linear;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::agentloop::Step;
use crate::corpus::RequestView;
use crate::rng::Rng;
use crate::tools::{ToolCall, ToolContext, ToolId, ToolRegistry};
use crate::{Error, Result};

pub use features::{default_call, full_evidence, slot, slot_for, EvidenceState, SCORE_DIM};
pub use linear::{
    action_distribution, action_features, action_logprob_and_grad, candidate_scores,
    greedy_ranking, pair_choice, pair_logprob_and_grad, pair_probability, pl_logprob_and_grad,
    pl_probability, sample_ranking, trajectory_logprob_and_grad, Decode, LinearPolicy,
};

/// Bumped whenever feature definitions change; checkpoints from another
/// version are rejected.
pub const FEATURE_VERSION: u32 = 1;
/// Features per action block.
pub const ACTION_FEATURES: usize = 4;
/// Rank-now plus one action per tool.
pub const ACTION_COUNT: usize = 1 + ToolId::ALL.len();
pub const ACTION_DIM: usize = ACTION_COUNT * ACTION_FEATURES;
pub const SCORE_OFFSET: usize = ACTION_DIM;
pub const PAIR_OFFSET: usize = SCORE_OFFSET + SCORE_DIM;
pub const PARAM_DIM: usize = PAIR_OFFSET + SCORE_DIM;

const CHECKPOINT_FORMAT: &str = "toolrank.policy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Rank,
    Tool(ToolId),
}

impl Action {
    /// Index of the action's parameter block.
    pub fn index(self) -> usize {
        match self {
            Action::Rank => 0,
            Action::Tool(t) => 1 + t.index(),
        }
    }

    /// Rank-now followed by the registry's tools in index order.
    pub fn available(registry: &ToolRegistry) -> Vec<Action> {
        std::iter::once(Action::Rank)
            .chain(registry.tools().iter().map(|t| Action::Tool(*t)))
            .collect()
    }
}

/// Flat parameter vector: action blocks, then scoring weights, then the
/// pair-choice residual.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    values: Vec<f64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; PARAM_DIM],
        }
    }

    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if values.len() != PARAM_DIM {
            return Err(Error::Contract(format!(
                "expected {PARAM_DIM} parameters, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("parameters must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn theta_action(&self) -> &[f64] {
        &self.values[..ACTION_DIM]
    }

    pub fn action_block(&self, action: Action) -> &[f64] {
        let start = action.index() * ACTION_FEATURES;
        &self.values[start..start + ACTION_FEATURES]
    }

    pub fn theta_score(&self) -> &[f64] {
        &self.values[SCORE_OFFSET..PAIR_OFFSET]
    }

    pub fn theta_pair(&self) -> &[f64] {
        &self.values[PAIR_OFFSET..]
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self += step * direction`.
    pub fn add_scaled(&mut self, direction: &[f64], step: f64) {
        assert_eq!(direction.len(), PARAM_DIM, "gradient length");
        for (v, d) in self.values.iter_mut().zip(direction) {
            *v += step * d;
        }
    }

    fn blocks(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        out.insert("theta_action".to_owned(), self.theta_action().to_vec());
        out.insert("theta_score".to_owned(), self.theta_score().to_vec());
        out.insert("theta_pair".to_owned(), self.theta_pair().to_vec());
        out
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        let ckpt = PolicyCheckpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            feature_version: FEATURE_VERSION,
            action_features: ACTION_FEATURES,
            score_dim: SCORE_DIM,
            blocks: self.blocks(),
        };
        serde_json::to_writer_pretty(w, &ckpt)?;
        Ok(())
    }

    pub fn load(r: impl Read) -> Result<Self> {
        let ckpt: PolicyCheckpoint = serde_json::from_reader(r)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "not a policy checkpoint (format `{}`)",
                ckpt.format
            )));
        }
        if ckpt.feature_version != FEATURE_VERSION {
            return Err(Error::VersionMismatch {
                found: ckpt.feature_version,
                expected: FEATURE_VERSION,
            });
        }
        let mut values = Vec::with_capacity(PARAM_DIM);
        for (name, len) in [
            ("theta_action", ACTION_DIM),
            ("theta_score", SCORE_DIM),
            ("theta_pair", SCORE_DIM),
        ] {
            let block = ckpt
                .blocks
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
            if block.len() != len {
                return Err(Error::Checkpoint(format!(
                    "block `{name}` has {} entries, expected {len}",
                    block.len()
                )));
            }
            values.extend_from_slice(block);
        }
        Self::from_flat(values)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    format: String,
    feature_version: u32,
    action_features: usize,
    score_dim: usize,
    blocks: BTreeMap<String, Vec<f64>>,
}

/// What a policy sees when choosing its next step.
#[derive(Clone, Copy)]
pub struct DecisionState<'a> {
    pub ctx: &'a ToolContext<'a>,
    pub registry: &'a ToolRegistry,
    pub evidence: &'a EvidenceState,
    pub steps: &'a [Step],
    pub n_tool: usize,
    pub t_max: usize,
    pub k: usize,
}

impl DecisionState<'_> {
    pub fn request(&self) -> RequestView<'_> {
        self.ctx.request
    }
}

/// One policy output.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Think(String),
    Call { call: ToolCall, logprob: f64 },
    /// Structured ranking of 1-based candidate indices.
    Rank { ranking: Vec<usize>, logprob: f64 },
    /// Raw model output containing a `\boxed{[...]}` list.
    RankText { text: String, logprob: f64 },
}

pub trait Policy: Sync {
    fn decide(&self, state: &DecisionState<'_>, rng: &mut Rng) -> Decision;
}

/// Plays a fixed list of decisions; once exhausted it keeps thinking.
#[derive(Clone, Debug, Default)]
pub struct ScriptedPolicy {
    pub script: Vec<Decision>,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<Decision>) -> Self {
        Self { script }
    }

    /// Calls `tool` `calls` times with default arguments, then ranks `ranking`.
    pub fn tools_then_rank(tool: ToolId, calls: usize, ranking: Vec<usize>) -> Self {
        let mut script = vec![
            Decision::Call {
                call: ToolCall::new(tool),
                logprob: 0.0,
            };
            calls
        ];
        script.push(Decision::Rank {
            ranking,
            logprob: 0.0,
        });
        Self { script }
    }
}

impl Policy for ScriptedPolicy {
    fn decide(&self, state: &DecisionState<'_>, _rng: &mut Rng) -> Decision {
        let made = state.steps.iter().filter(|s| !s.masked).count();
        self.script
            .get(made)
            .cloned()
            .unwrap_or_else(|| Decision::Think("script exhausted".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    More,
    Less,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

impl Slot {
    pub fn other(self) -> Slot {
        match self {
            Slot::A => Slot::B,
            Slot::B => Slot::A,
        }
    }
}

/// "Which of A and B is the user more (or less) likely to pick?"
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTask {
    pub request_id: u64,
    /// 1-based candidate indices shown as A and B.
    pub a: usize,
    pub b: usize,
    pub features_a: [f64; SCORE_DIM],
    pub features_b: [f64; SCORE_DIM],
    pub direction: Direction,
    pub target: Slot,
}

#[cfg(test)]
mod tests;

//! The think → act → observe → … → rank loop and output validation.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::RecommendationRequest;
use crate::policy::{Decision, DecisionState, EvidenceState, Policy};
use crate::reward::RewardBreakdown;
use crate::rng::Rng;
use crate::tools::{Observation, ToolCall, ToolRegistry};
use crate::{Environment, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPayload {
    Think {
        note: String,
    },
    Act {
        call: ToolCall,
    },
    Obs {
        observation: Observation,
    },
    Rank {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ranking: Option<Vec<usize>>,
        /// Raw output, for policies that answer in text.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Think,
    Act,
    Obs,
    Rank,
}

/// One trace entry. Observations are masked and carry no log-probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(flatten)]
    pub payload: StepPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    pub masked: bool,
}

impl Step {
    pub fn think(note: impl Into<String>) -> Self {
        Self {
            payload: StepPayload::Think { note: note.into() },
            logprob: Some(0.0),
            masked: false,
        }
    }

    pub fn act(call: ToolCall, logprob: f64) -> Self {
        Self {
            payload: StepPayload::Act { call },
            logprob: Some(logprob),
            masked: false,
        }
    }

    pub fn obs(observation: Observation) -> Self {
        Self {
            payload: StepPayload::Obs { observation },
            logprob: None,
            masked: true,
        }
    }

    pub fn rank(ranking: Option<Vec<usize>>, text: Option<String>, logprob: f64) -> Self {
        Self {
            payload: StepPayload::Rank { ranking, text },
            logprob: Some(logprob),
            masked: false,
        }
    }

    pub fn kind(&self) -> StepKind {
        match self.payload {
            StepPayload::Think { .. } => StepKind::Think,
            StepPayload::Act { .. } => StepKind::Act,
            StepPayload::Obs { .. } => StepKind::Obs,
            StepPayload::Rank { .. } => StepKind::Rank,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Ok,
    BudgetExceeded,
    MalformedRanking,
    WrongLength,
    DuplicateIndex,
    OutOfRange,
    NoRanking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub is_valid: bool,
    pub reason: VerdictReason,
}

impl ValidityVerdict {
    pub const OK: Self = Self {
        is_valid: true,
        reason: VerdictReason::Ok,
    };

    pub fn invalid(reason: VerdictReason) -> Self {
        Self {
            is_valid: reason == VerdictReason::Ok,
            reason,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub request_id: u64,
    /// Tools the policy could choose from.
    pub tools: ToolRegistry,
    pub t_max: usize,
    pub k: usize,
    /// Evidence before the first step; replaying the observations on top of
    /// it reconstructs every decision state.
    pub initial_evidence: EvidenceState,
    pub steps: Vec<Step>,
    pub ranking: Option<Vec<usize>>,
    pub n_tool: usize,
    pub total_logprob: f64,
    pub verdict: ValidityVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
}

impl Trajectory {
    /// Sum of step log-probabilities, skipping masked steps.
    pub fn sum_logprob(&self) -> f64 {
        self.steps
            .iter()
            .filter(|s| !s.masked)
            .filter_map(|s| s.logprob)
            .sum()
    }

    pub fn count(&self, kind: StepKind) -> usize {
        self.steps.iter().filter(|s| s.kind() == kind).count()
    }

    pub fn reward_total(&self) -> Option<f64> {
        self.reward.as_ref().map(|r| r.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub k: usize,
    pub t_max: usize,
    pub max_steps: usize,
}

impl LoopConfig {
    /// Step cap `2·t_max + 2`: every allowed call with its observation, one
    /// think step and the final ranking.
    pub fn new(k: usize, t_max: usize) -> Self {
        Self {
            k,
            t_max,
            max_steps: 2 * t_max + 2,
        }
    }
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self::new(10, 10)
    }
}

/// Checks a 1-based ranking: length first, then range, then duplicates.
pub fn check_ranking(ranking: &[usize], n: usize, k: usize) -> ValidityVerdict {
    if ranking.len() != k {
        return ValidityVerdict::invalid(VerdictReason::WrongLength);
    }
    if ranking.iter().any(|&r| r == 0 || r > n) {
        return ValidityVerdict::invalid(VerdictReason::OutOfRange);
    }
    let mut seen = vec![false; n];
    for &r in ranking {
        if std::mem::replace(&mut seen[r - 1], true) {
            return ValidityVerdict::invalid(VerdictReason::DuplicateIndex);
        }
    }
    ValidityVerdict::OK
}

/// Extracts the last `\boxed{[...]}` list from `text` and validates it.
pub fn parse_boxed_ranking(
    text: &str,
    n: usize,
    k: usize,
) -> std::result::Result<Vec<usize>, ValidityVerdict> {
    let malformed = ValidityVerdict::invalid(VerdictReason::MalformedRanking);
    let start = text.rfind("\\boxed{").ok_or(malformed)?;
    let rest = text[start + "\\boxed{".len()..].trim_start();
    let rest = rest.strip_prefix('[').ok_or(malformed)?;
    let close = rest.find(']').ok_or(malformed)?;
    if !rest[close + 1..].trim_start().starts_with('}') {
        return Err(malformed);
    }
    let body = rest[..close].trim();
    let mut values = Vec::new();
    if !body.is_empty() {
        for tok in body.split(',') {
            let v: i64 = tok.trim().parse().map_err(|_| malformed)?;
            values.push(v);
        }
    }
    if values.len() != k {
        return Err(ValidityVerdict::invalid(VerdictReason::WrongLength));
    }
    if values.iter().any(|&v| v < 1 || v as u64 > n as u64) {
        return Err(ValidityVerdict::invalid(VerdictReason::OutOfRange));
    }
    let ranking: Vec<usize> = values.into_iter().map(|v| v as usize).collect();
    match check_ranking(&ranking, n, k) {
        v if v.is_valid => Ok(ranking),
        v => Err(v),
    }
}

/// Recomputes the verdict of a finished trajectory.
pub fn validate(
    trajectory: &Trajectory,
    request: &RecommendationRequest,
    k: usize,
    t_max: usize,
) -> ValidityVerdict {
    if trajectory.count(StepKind::Act) > t_max {
        return ValidityVerdict::invalid(VerdictReason::BudgetExceeded);
    }
    let rank = trajectory.steps.iter().rev().find_map(|s| match &s.payload {
        StepPayload::Rank { ranking, text } => Some((ranking, text)),
        _ => None,
    });
    match rank {
        None => ValidityVerdict::invalid(VerdictReason::NoRanking),
        Some((Some(ranking), _)) => check_ranking(ranking, request.n(), k),
        Some((None, Some(text))) => match parse_boxed_ranking(text, request.n(), k) {
            Ok(_) => ValidityVerdict::OK,
            Err(v) => v,
        },
        Some((None, None)) => ValidityVerdict::invalid(VerdictReason::MalformedRanking),
    }
}

/// Runs one episode of `policy` on `request`.
pub fn run_trajectory<P: Policy + ?Sized>(
    policy: &P,
    env: &Environment,
    request: &RecommendationRequest,
    config: &LoopConfig,
    rng: &mut Rng,
) -> Trajectory {
    let ctx = env.context(request);
    let initial = crate::policy::EvidenceState::initial(&ctx);
    let mut evidence = initial.clone();
    let mut steps: Vec<Step> = Vec::new();
    let mut n_tool = 0usize;
    let mut ranking = None;
    let verdict = loop {
        if steps.len() >= config.max_steps.max(1) {
            break ValidityVerdict::invalid(VerdictReason::NoRanking);
        }
        let state = DecisionState {
            ctx: &ctx,
            registry: &env.registry,
            evidence: &evidence,
            steps: &steps,
            n_tool,
            t_max: config.t_max,
            k: config.k,
        };
        match policy.decide(&state, rng) {
            Decision::Think(note) => steps.push(Step::think(note)),
            Decision::Call { call, logprob } => {
                steps.push(Step::act(call.clone(), logprob));
                n_tool += 1;
                if n_tool > config.t_max {
                    steps.push(Step::obs(Observation::failure(format!(
                        "tool budget of {} calls exceeded",
                        config.t_max
                    ))));
                    break ValidityVerdict::invalid(VerdictReason::BudgetExceeded);
                }
                evidence.record_call(&call);
                let obs = env.registry.invoke(&call, &ctx);
                evidence.absorb(&obs);
                steps.push(Step::obs(obs));
            }
            Decision::Rank {
                ranking: r,
                logprob,
            } => {
                let v = check_ranking(&r, request.n(), config.k);
                steps.push(Step::rank(Some(r.clone()), None, logprob));
                if v.is_valid {
                    ranking = Some(r);
                }
                break v;
            }
            Decision::RankText { text, logprob } => {
                let parsed = parse_boxed_ranking(&text, request.n(), config.k);
                steps.push(Step::rank(parsed.clone().ok(), Some(text), logprob));
                match parsed {
                    Ok(r) => {
                        ranking = Some(r);
                        break ValidityVerdict::OK;
                    }
                    Err(v) => break v,
                }
            }
        }
    };
    let mut traj = Trajectory {
        request_id: request.id,
        tools: env.registry.clone(),
        t_max: config.t_max,
        k: config.k,
        initial_evidence: initial,
        steps,
        ranking,
        n_tool,
        total_logprob: 0.0,
        verdict,
        reward: None,
    };
    traj.total_logprob = traj.sum_logprob();
    traj
}

pub fn write_trajectories<'a>(
    mut w: impl Write,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io("<trajectories>", e))?;
    }
    Ok(())
}

pub fn read_trajectories(r: impl BufRead) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trajectories>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: "<trajectories>".into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    default_call, Action, Decision, DecisionState, Direction, EvidenceState, PairTask, Policy,
    PolicyParams, Slot, ACTION_FEATURES, PAIR_OFFSET, PARAM_DIM, SCORE_DIM, SCORE_OFFSET,
};
use crate::agentloop::{StepPayload, Trajectory};
use crate::rng::Rng;
use crate::tools::ToolRegistry;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    /// Most likely action and per-slot argmax ranking; ties go to the lowest index.
    #[default]
    Greedy,
    Sample,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Features of `action` in the current state:
/// tools `[1, not yet called, n_tool/T, budget spent]`,
/// rank-now `[1, share of tools called, n_tool/T, budget spent]`.
pub fn action_features(
    action: Action,
    evidence: &EvidenceState,
    n_tool: usize,
    t_max: usize,
    registry: &ToolRegistry,
) -> [f64; ACTION_FEATURES] {
    let progress = n_tool as f64 / t_max.max(1) as f64;
    let spent = if n_tool >= t_max { 1.0 } else { 0.0 };
    match action {
        Action::Rank => {
            let share = if registry.is_empty() {
                0.0
            } else {
                evidence.distinct_invoked(registry) as f64 / registry.len() as f64
            };
            [1.0, share, progress, spent]
        }
        Action::Tool(t) => [1.0, if evidence.invoked(t) { 0.0 } else { 1.0 }, progress, spent],
    }
}

fn action_logits(
    params: &PolicyParams,
    actions: &[Action],
    evidence: &EvidenceState,
    n_tool: usize,
    t_max: usize,
    registry: &ToolRegistry,
) -> (Vec<[f64; ACTION_FEATURES]>, Vec<f64>) {
    let feats: Vec<[f64; ACTION_FEATURES]> = actions
        .iter()
        .map(|a| action_features(*a, evidence, n_tool, t_max, registry))
        .collect();
    let logits = actions
        .iter()
        .zip(&feats)
        .map(|(a, f)| dot(params.action_block(*a), f))
        .collect();
    (feats, logits)
}

/// Probability of every available action.
pub fn action_distribution(
    params: &PolicyParams,
    evidence: &EvidenceState,
    n_tool: usize,
    t_max: usize,
    registry: &ToolRegistry,
) -> Vec<(Action, f64)> {
    let actions = Action::available(registry);
    let (_, logits) = action_logits(params, &actions, evidence, n_tool, t_max, registry);
    actions
        .into_iter()
        .zip(log_softmax(&logits))
        .map(|(a, lp)| (a, lp.exp()))
        .collect()
}

/// `log π(chosen)` and its gradient over the full parameter vector.
pub fn action_logprob_and_grad(
    params: &PolicyParams,
    evidence: &EvidenceState,
    n_tool: usize,
    t_max: usize,
    registry: &ToolRegistry,
    chosen: Action,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; PARAM_DIM];
    let lp = add_action_grad(params, evidence, n_tool, t_max, registry, chosen, &mut grad)?;
    Ok((lp, grad))
}

fn add_action_grad(
    params: &PolicyParams,
    evidence: &EvidenceState,
    n_tool: usize,
    t_max: usize,
    registry: &ToolRegistry,
    chosen: Action,
    grad: &mut [f64],
) -> Result<f64> {
    let actions = Action::available(registry);
    let c = actions
        .iter()
        .position(|a| *a == chosen)
        .ok_or_else(|| Error::Contract(format!("action {chosen:?} is not available")))?;
    let (feats, logits) = action_logits(params, &actions, evidence, n_tool, t_max, registry);
    let lps = log_softmax(&logits);
    for (i, (a, f)) in actions.iter().zip(&feats).enumerate() {
        let w = f64::from(u8::from(i == c)) - lps[i].exp();
        let start = a.index() * ACTION_FEATURES;
        for (j, x) in f.iter().enumerate() {
            grad[start + j] += w * x;
        }
    }
    Ok(lps[c])
}

/// `s_i = θ_score · ψ_i` for every candidate.
pub fn candidate_scores(params: &PolicyParams, evidence: &EvidenceState) -> Vec<f64> {
    evidence
        .features
        .iter()
        .map(|row| dot(params.theta_score(), row))
        .collect()
}

fn check_ranking(ranking: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &r in ranking {
        if r == 0 || r > n || seen[r - 1] {
            return Err(Error::Contract(format!(
                "ranking {ranking:?} is not a list of distinct indices in 1..={n}"
            )));
        }
        seen[r - 1] = true;
    }
    Ok(())
}

/// Plackett–Luce probability of the 1-based `ranking` under `scores`.
pub fn pl_probability(scores: &[f64], ranking: &[usize]) -> f64 {
    pl_logprob(scores, ranking).exp()
}

fn pl_logprob(scores: &[f64], ranking: &[usize]) -> f64 {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut total = 0.0;
    for &r in ranking {
        let logits: Vec<f64> = remaining.iter().map(|&i| scores[i]).collect();
        let lps = log_softmax(&logits);
        let at = remaining.iter().position(|&i| i == r - 1).expect("checked ranking");
        total += lps[at];
        remaining.remove(at);
    }
    total
}

/// Log-probability of a 1-based ranking and its gradient.
pub fn pl_logprob_and_grad(
    params: &PolicyParams,
    evidence: &EvidenceState,
    ranking: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; PARAM_DIM];
    let lp = add_pl_grad(params, evidence, ranking, &mut grad)?;
    Ok((lp, grad))
}

fn add_pl_grad(
    params: &PolicyParams,
    evidence: &EvidenceState,
    ranking: &[usize],
    grad: &mut [f64],
) -> Result<f64> {
    let n = evidence.n();
    check_ranking(ranking, n)?;
    let scores = candidate_scores(params, evidence);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for &r in ranking {
        let logits: Vec<f64> = remaining.iter().map(|&i| scores[i]).collect();
        let lps = log_softmax(&logits);
        let at = remaining.iter().position(|&i| i == r - 1).expect("checked ranking");
        total += lps[at];
        for (slot_pos, &i) in remaining.iter().enumerate() {
            let w = f64::from(u8::from(slot_pos == at)) - lps[slot_pos].exp();
            for (j, x) in evidence.features[i].iter().enumerate() {
                grad[SCORE_OFFSET + j] += w * x;
            }
        }
        remaining.remove(at);
    }
    Ok(total)
}

fn draw_ranking(scores: &[f64], k: usize, mut pick: impl FnMut(&[f64]) -> usize) -> (Vec<usize>, f64) {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut ranking = Vec::with_capacity(k);
    let mut logprob = 0.0;
    for _ in 0..k.min(scores.len()) {
        let logits: Vec<f64> = remaining.iter().map(|&i| scores[i]).collect();
        let lps = log_softmax(&logits);
        let at = pick(&lps);
        logprob += lps[at];
        ranking.push(remaining.remove(at) + 1);
    }
    (ranking, logprob)
}

/// Samples a top-`k` list without replacement; returns 1-based indices.
pub fn sample_ranking(scores: &[f64], k: usize, rng: &mut Rng) -> (Vec<usize>, f64) {
    draw_ranking(scores, k, |lps| {
        let probs: Vec<f64> = lps.iter().map(|l| l.exp()).collect();
        sample_index(&probs, rng)
    })
}

/// Per-slot argmax ranking (lowest index on ties) with its PL log-probability.
pub fn greedy_ranking(scores: &[f64], k: usize) -> (Vec<usize>, f64) {
    draw_ranking(scores, k, argmax)
}

fn pair_logits(params: &PolicyParams, task: &PairTask) -> ([f64; SCORE_DIM], [f64; 2]) {
    let mut w = [0.0; SCORE_DIM];
    for (j, x) in w.iter_mut().enumerate() {
        *x = params.theta_score()[j] + params.theta_pair()[j];
    }
    let sa = dot(&w, &task.features_a);
    let sb = dot(&w, &task.features_b);
    let logits = match task.direction {
        Direction::More => [sa, sb],
        Direction::Less => [-sa, -sb],
    };
    (w, logits)
}

/// Probability of answering A.
pub fn pair_probability(params: &PolicyParams, task: &PairTask) -> f64 {
    let (_, logits) = pair_logits(params, task);
    log_softmax(&logits)[0].exp()
}

pub fn pair_choice(params: &PolicyParams, task: &PairTask, rng: &mut Rng) -> (Slot, f64) {
    let (_, logits) = pair_logits(params, task);
    let lps = log_softmax(&logits);
    let probs = [lps[0].exp(), lps[1].exp()];
    let i = sample_index(&probs, rng);
    (if i == 0 { Slot::A } else { Slot::B }, lps[i])
}

/// `log P(choice)` and its gradient; it reaches `theta_score` and
/// `theta_pair` identically.
pub fn pair_logprob_and_grad(params: &PolicyParams, task: &PairTask, choice: Slot) -> (f64, Vec<f64>) {
    let (_, logits) = pair_logits(params, task);
    let lps = log_softmax(&logits);
    let (c, other) = match choice {
        Slot::A => (0, 1),
        Slot::B => (1, 0),
    };
    let p_other = lps[other].exp();
    let sign = match task.direction {
        Direction::More => 1.0,
        Direction::Less => -1.0,
    };
    let (fc, fo) = match choice {
        Slot::A => (&task.features_a, &task.features_b),
        Slot::B => (&task.features_b, &task.features_a),
    };
    let mut grad = vec![0.0; PARAM_DIM];
    for j in 0..SCORE_DIM {
        let g = sign * p_other * (fc[j] - fo[j]);
        grad[SCORE_OFFSET + j] = g;
        grad[PAIR_OFFSET + j] = g;
    }
    (lps[c], grad)
}

/// Recomputes the log-probability of every unmasked step of `trajectory`
/// under `params`, with the summed gradient.
pub fn trajectory_logprob_and_grad(
    params: &PolicyParams,
    trajectory: &Trajectory,
) -> Result<(f64, Vec<f64>)> {
    let registry = &trajectory.tools;
    let t_max = trajectory.t_max;
    let mut evidence = trajectory.initial_evidence.clone();
    let mut n_tool = 0usize;
    let mut grad = vec![0.0; PARAM_DIM];
    let mut total = 0.0;
    for step in &trajectory.steps {
        match &step.payload {
            StepPayload::Think { .. } => {}
            StepPayload::Act { call } => {
                let tool = call
                    .tool()
                    .ok_or_else(|| Error::Replay(format!("unknown tool `{}`", call.name)))?;
                total += add_action_grad(
                    params,
                    &evidence,
                    n_tool,
                    t_max,
                    registry,
                    Action::Tool(tool),
                    &mut grad,
                )
                .map_err(|e| Error::Replay(e.to_string()))?;
                evidence.record_call(call);
                n_tool += 1;
            }
            StepPayload::Obs { observation } => evidence.absorb(observation),
            StepPayload::Rank { ranking, text } => {
                if text.is_some() {
                    return Err(Error::Replay("raw-text rankings cannot be replayed".into()));
                }
                let ranking = ranking
                    .as_ref()
                    .ok_or_else(|| Error::Replay("rank step without a ranking".into()))?;
                total += add_action_grad(
                    params,
                    &evidence,
                    n_tool,
                    t_max,
                    registry,
                    Action::Rank,
                    &mut grad,
                )
                .map_err(|e| Error::Replay(e.to_string()))?;
                total += add_pl_grad(params, &evidence, ranking, &mut grad)
                    .map_err(|e| Error::Replay(e.to_string()))?;
            }
        }
    }
    Ok((total, grad))
}

/// The reference policy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearPolicy {
    pub params: PolicyParams,
    pub decode: Decode,
}

impl LinearPolicy {
    pub fn new(params: PolicyParams, decode: Decode) -> Self {
        Self { params, decode }
    }
}

impl Policy for LinearPolicy {
    fn decide(&self, state: &DecisionState<'_>, rng: &mut Rng) -> Decision {
        if state.steps.is_empty() {
            return Decision::Think("gather evidence, then rank".into());
        }
        let dist = action_distribution(
            &self.params,
            state.evidence,
            state.n_tool,
            state.t_max,
            state.registry,
        );
        let probs: Vec<f64> = dist.iter().map(|(_, p)| *p).collect();
        let i = match self.decode {
            Decode::Greedy => argmax(&probs),
            Decode::Sample => sample_index(&probs, rng),
        };
        let (action, p) = dist[i];
        match action {
            Action::Rank => {
                let scores = candidate_scores(&self.params, state.evidence);
                let (ranking, lp) = match self.decode {
                    Decode::Greedy => greedy_ranking(&scores, state.k),
                    Decode::Sample => sample_ranking(&scores, state.k, rng),
                };
                Decision::Rank {
                    ranking,
                    logprob: p.ln() + lp,
                }
            }
            Action::Tool(t) => Decision::Call {
                call: default_call(t, state.ctx, state.evidence),
                logprob: p.ln(),
            },
        }
    }
}

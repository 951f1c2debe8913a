//! Stage 1: list-wise group-relative policy optimisation.
//!
//! For each request the current policy samples a group of trajectories. A
//! trajectory's advantage is its reward minus the group mean (no variance
//! normalisation, no clipping, no KL term). Groups in which every reward is
//! negative are dropped; the update averages `(1/G) Σ Â ∇log p(τ)` over the
//! groups that remain.

use std::cmp::Ordering;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agentloop::{run_trajectory, LoopConfig, Trajectory};
use crate::corpus::RecommendationRequest;
use crate::metrics::EvalReport;
use crate::policy::{trajectory_logprob_and_grad, Decode, LinearPolicy, Policy, PolicyParams, PARAM_DIM};
use crate::reward::assign_reward;
use crate::rng;
use crate::{Environment, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_size: usize,
    /// Step size. Sized for a policy with a few dozen parameters.
    pub lr: f64,
    pub epochs: usize,
    pub k: usize,
    pub t_max: usize,
    pub seed: u64,
    /// Run the evaluation hook every this many updates (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            batch_size: 64,
            lr: 1.0,
            epochs: 3,
            k: 10,
            t_max: 10,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be finite and nonnegative".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        Ok(())
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig::new(self.k, self.t_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub request_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub kept: bool,
}

/// Sum in ascending order so the result does not depend on input order.
pub(crate) fn ordered_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

/// `R_g − mean(R)`.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = ordered_sum(rewards) / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// A group is informative unless every reward is negative.
pub fn keep_group(rewards: &[f64]) -> bool {
    rewards.iter().any(|r| *r >= 0.0)
}

impl GroupRollout {
    pub fn from_trajectories(request_id: u64, trajectories: Vec<Trajectory>) -> Self {
        let rewards: Vec<f64> = trajectories
            .iter()
            .map(|t| t.reward_total().expect("trajectory must be scored"))
            .collect();
        Self {
            request_id,
            advantages: group_advantages(&rewards),
            kept: keep_group(&rewards),
            rewards,
            trajectories,
        }
    }
}

/// Samples `group_size` scored trajectories; rollout `g` draws from the
/// stream `(stream_seed, g)`.
pub fn rollout_group<P: Policy + ?Sized>(
    policy: &P,
    env: &Environment,
    request: &RecommendationRequest,
    group_size: usize,
    loop_config: &LoopConfig,
    stream_seed: u64,
) -> GroupRollout {
    let trajectories = (0..group_size as u64)
        .map(|g| {
            let mut r = rng::stream(&[stream_seed, g]);
            let mut t = run_trajectory(policy, env, request, loop_config, &mut r);
            assign_reward(&mut t, request, loop_config.k);
            t
        })
        .collect();
    GroupRollout::from_trajectories(request.id, trajectories)
}

fn cmp_terms(a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| {
        a.1.iter()
            .zip(&b.1)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// `(1/G) Σ_g Â_g ∇log p(τ_g)`. Terms are summed in a canonical order, so
/// permuting the group leaves the result bit-identical.
pub fn group_gradient(params: &PolicyParams, group: &GroupRollout) -> Result<Vec<f64>> {
    let mut terms = Vec::with_capacity(group.trajectories.len());
    for (t, a) in group.trajectories.iter().zip(&group.advantages) {
        let (_, g) = trajectory_logprob_and_grad(params, t)?;
        terms.push((*a, g));
    }
    terms.sort_by(cmp_terms);
    let mut out = vec![0.0; PARAM_DIM];
    for (a, g) in &terms {
        for (o, x) in out.iter_mut().zip(g) {
            *o += a * x;
        }
    }
    let inv = 1.0 / group.trajectories.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// Fig.-3-style statistics for one batch of rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub step: usize,
    pub epoch: usize,
    pub groups: usize,
    pub mean_reward: f64,
    pub kept_fraction: f64,
    pub mean_n_tool: f64,
    /// Share of positive-reward trajectories that called at least one tool.
    pub tool_use_rate: Option<f64>,
    pub invalid_rate: f64,
    pub rollout_hit_at_k: f64,
    pub updated: bool,
    pub grad_norm: f64,
}

impl BatchStats {
    pub fn from_groups(groups: &[GroupRollout]) -> Self {
        let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
        let n = trajs.len().max(1) as f64;
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let positive: Vec<&&Trajectory> = trajs
            .iter()
            .filter(|t| t.reward_total().is_some_and(|r| r > 0.0))
            .collect();
        let tool_use_rate = (!positive.is_empty()).then(|| {
            positive.iter().filter(|t| t.n_tool > 0).count() as f64 / positive.len() as f64
        });
        Self {
            step: 0,
            epoch: 0,
            groups: groups.len(),
            mean_reward: ordered_sum(&rewards) / n,
            kept_fraction: groups.iter().filter(|g| g.kept).count() as f64
                / groups.len().max(1) as f64,
            mean_n_tool: trajs.iter().map(|t| t.n_tool as f64).sum::<f64>() / n,
            tool_use_rate,
            invalid_rate: trajs.iter().filter(|t| !t.verdict.is_valid).count() as f64 / n,
            rollout_hit_at_k: trajs
                .iter()
                .filter(|t| t.reward.as_ref().is_some_and(|r| r.hit_rank.is_some()))
                .count() as f64
                / n,
            updated: false,
            grad_norm: 0.0,
        }
    }
}

/// One ascent step on the kept groups of a batch. When every group was
/// dropped the parameters are returned unchanged with `updated = false`.
pub fn grpo_step(
    params: &PolicyParams,
    groups: &[GroupRollout],
    lr: f64,
) -> Result<(PolicyParams, BatchStats)> {
    let mut stats = BatchStats::from_groups(groups);
    let kept: Vec<&GroupRollout> = groups.iter().filter(|g| g.kept).collect();
    if kept.is_empty() {
        return Ok((params.clone(), stats));
    }
    let grads: Vec<Vec<f64>> = kept
        .par_iter()
        .map(|g| group_gradient(params, g))
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; PARAM_DIM];
    for g in &grads {
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    let inv = 1.0 / kept.len() as f64;
    total.iter_mut().for_each(|t| *t *= inv);
    let mut next = params.clone();
    next.add_scaled(&total, lr);
    stats.updated = true;
    stats.grad_norm = total.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((next, stats))
}

/// Rolls out a group per request with the sampling policy at `params`.
pub fn rollout_batch(
    params: &PolicyParams,
    env: &Environment,
    batch: &[&RecommendationRequest],
    config: &TrainConfig,
    seed_parts: &[u64],
) -> Vec<GroupRollout> {
    let policy = LinearPolicy::new(params.clone(), Decode::Sample);
    let loop_cfg = config.loop_config();
    batch
        .par_iter()
        .map(|req| {
            let mut parts = seed_parts.to_vec();
            parts.push(req.id);
            rollout_group(
                &policy,
                env,
                req,
                config.group_size,
                &loop_cfg,
                rng::derive_seed(&parts),
            )
        })
        .collect()
}

/// Rollout statistics of `params` on `requests` without updating anything.
pub fn measure_rollouts(
    params: &PolicyParams,
    env: &Environment,
    requests: &[RecommendationRequest],
    config: &TrainConfig,
    seed: u64,
) -> BatchStats {
    let refs: Vec<&RecommendationRequest> = requests.iter().collect();
    let groups = rollout_batch(params, env, &refs, config, &[seed, 0x5747]);
    BatchStats::from_groups(&groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<BatchStats>,
    pub evals: Vec<EvalPoint>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl TrainHistory {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "step,epoch,groups,mean_reward,kept_fraction,mean_n_tool,tool_use_rate,invalid_rate,rollout_hit_at_k,updated,grad_norm"
        )?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{:.6}",
                s.step,
                s.epoch,
                s.groups,
                s.mean_reward,
                s.kept_fraction,
                s.mean_n_tool,
                opt(s.tool_use_rate),
                s.invalid_rate,
                s.rollout_hit_at_k,
                s.updated,
                s.grad_norm
            )?;
        }
        Ok(())
    }

    pub fn write_eval_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,count,invalid,h@1,h@5,h@10,n@1,n@5,n@10")?;
        for e in &self.evals {
            let r = &e.report;
            let h = |k| opt(r.hit_at.get(&k).copied());
            let n = |k| opt(r.ndcg_at.get(&k).copied());
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                e.step,
                r.count,
                r.invalid,
                h(1),
                h(5),
                h(10),
                n(1),
                n(5),
                n(10)
            )?;
        }
        Ok(())
    }
}

/// Runs `config.epochs` passes over `train`. Each epoch visits the requests
/// in a seed-determined order, in batches of `config.batch_size`.
pub fn train_stage1(
    params: &PolicyParams,
    env: &Environment,
    train: &[RecommendationRequest],
    config: &TrainConfig,
    mut eval: Option<&mut dyn FnMut(&PolicyParams) -> EvalReport>,
) -> Result<(PolicyParams, TrainHistory)> {
    config.validate()?;
    let mut params = params.clone();
    let mut history = TrainHistory::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<&RecommendationRequest> = train.iter().collect();
        order.shuffle(&mut rng::stream(&[config.seed, epoch as u64, 0x0DE7]));
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let groups = rollout_batch(
                &params,
                env,
                batch,
                config,
                &[config.seed, epoch as u64, b as u64],
            );
            let (next, mut stats) = grpo_step(&params, &groups, config.lr)?;
            params = next;
            step += 1;
            stats.step = step;
            stats.epoch = epoch;
            history.steps.push(stats);
            if config.eval_every > 0 && step.is_multiple_of(config.eval_every) {
                if let Some(f) = eval.as_mut() {
                    history.evals.push(EvalPoint {
                        step,
                        report: f(&params),
                    });
                }
            }
        }
    }
    if let Some(f) = eval.as_mut() {
        if history.evals.last().is_none_or(|e| e.step != step) {
            history.evals.push(EvalPoint {
                step,
                report: f(&params),
            });
        }
    }
    Ok((params, history))
}

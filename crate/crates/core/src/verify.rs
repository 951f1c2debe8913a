//! Numerical checks of the two theoretical claims behind training, against
//! brute-force references.
//!
//! [`TinyEnv`] is a real [`Environment`] small enough that every trajectory
//! the reference policy can produce is listed, so expectations under the
//! policy are exact sums. [`check_unbiasedness`] compares the mean of many
//! group-relative gradient estimates against that exact gradient.
//! [`check_logistic_bound`] covers the pairwise bound, and
//! [`finite_difference_suite`] checks every analytic gradient.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::agentloop::{run_trajectory, LoopConfig, StepPayload, Trajectory};
use crate::corpus::{Catalog, Interaction, InteractionStream, Item, ItemId, RecommendationRequest, SplitTag, UserId};
use crate::grpo::{group_gradient, rollout_group};
use crate::policy::{
    action_logprob_and_grad, pair_logprob_and_grad, pl_logprob_and_grad, trajectory_logprob_and_grad, Action,
    Decision, Decode, Direction, EvidenceState, LinearPolicy, PairTask, PolicyParams, ScriptedPolicy, Slot,
    PARAM_DIM, SCORE_DIM, SCORE_OFFSET,
};
use crate::reward::assign_reward;
use crate::rng;
use crate::tools::{ToolCall, ToolId, ToolRegistry};
use crate::{Environment, Error, Result};

/// A one-request world with `n` candidates, lists of length `k`, a single
/// behavioural tool and a budget of one call.
#[derive(Clone, Debug)]
pub struct TinyEnv {
    pub env: Environment,
    pub request: RecommendationRequest,
    pub loop_config: LoopConfig,
    trajectories: Vec<Trajectory>,
}

fn item(id: &str, category: &str, price: f64) -> Item {
    Item {
        item_id: ItemId::from(id),
        title: format!("Item {id}"),
        categories: vec![category.to_string()],
        price: Some(price),
        avg_rating: Some(4.0),
        review_count: Some(10),
        extra: Map::new(),
    }
}

/// Every ordered `k`-subset of `1..=n`.
pub(crate) fn arrangements(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for i in 1..=n {
            if !prefix.contains(&i) {
                prefix.push(i);
                rec(n, k, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::new(), &mut out);
    out
}

impl TinyEnv {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if !(2..=3).contains(&n) || !(1..=2).contains(&k) || k > n {
            return Err(Error::Config(format!(
                "tiny environment needs n in 2..=3 and k in 1..=2 with k <= n, got n={n} k={k}"
            )));
        }
        let catalog = Catalog::new(vec![
            item("h1", "Games", 20.0),
            item("h2", "Games", 24.0),
            item("h3", "Books", 12.0),
            item("c1", "Music", 22.0),
            item("c2", "Games", 60.0),
            item("c3", "Books", 11.0),
        ])?;
        let user = UserId::from("u");
        let stream = InteractionStream::from_interactions(["h1", "h2", "h3", "c2"].iter().enumerate().map(
            |(i, id)| Interaction {
                user_id: user.clone(),
                item_id: ItemId::from(*id),
                timestamp: 1_000 * (i as i64 + 1),
                rating: Some(5.0),
                extra: Map::new(),
            },
        ));
        let mut env = Environment::new(catalog, stream.clone(), stream, None);
        env.registry = ToolRegistry::with_tools([ToolId::CandidatesAnalyze]);
        let candidates: Vec<ItemId> = ["c1", "c2", "c3"][..n].iter().map(|s| ItemId::from(*s)).collect();
        let request = RecommendationRequest {
            id: 0,
            user_id: user,
            timestamp: 4_000,
            target_position: 3,
            history: ["h1", "h2", "h3"].iter().map(|s| ItemId::from(*s)).collect(),
            candidates,
            positive_index: 2,
            split: SplitTag::Train,
        };
        let loop_config = LoopConfig::new(k, 1);
        let mut tiny = Self {
            env,
            request,
            loop_config,
            trajectories: Vec::new(),
        };
        tiny.trajectories = tiny.enumerate();
        Ok(tiny)
    }

    fn play(&self, script: Vec<Decision>) -> Trajectory {
        let mut script = script;
        script.insert(0, Decision::Think("plan".into()));
        let mut t = run_trajectory(
            &ScriptedPolicy::new(script),
            &self.env,
            &self.request,
            &self.loop_config,
            &mut rng::stream(&[0]),
        );
        assign_reward(&mut t, &self.request, self.loop_config.k);
        t
    }

    fn enumerate(&self) -> Vec<Trajectory> {
        let call = || Decision::Call {
            call: ToolCall::new(ToolId::CandidatesAnalyze),
            logprob: 0.0,
        };
        let mut out = Vec::new();
        for calls in 0..=self.loop_config.t_max {
            for r in arrangements(self.request.n(), self.loop_config.k) {
                let mut script = vec![call(); calls];
                script.push(Decision::Rank {
                    ranking: r,
                    logprob: 0.0,
                });
                out.push(self.play(script));
            }
        }
        out.push(self.play(vec![call(); self.loop_config.t_max + 1]));
        out
    }

    /// Every trajectory the sampling policy can produce, scored.
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Index of `t` within [`Self::trajectories`], matched on tool calls and list.
    pub fn index_of(&self, t: &Trajectory) -> Option<usize> {
        self.trajectories
            .iter()
            .position(|e| e.n_tool == t.n_tool && e.ranking == t.ranking && e.verdict == t.verdict)
    }

    /// `(π(τ), R(τ), ∇log π(τ))` for every trajectory.
    pub fn table(&self, params: &PolicyParams) -> Result<Vec<(f64, f64, Vec<f64>)>> {
        self.trajectories
            .iter()
            .map(|t| {
                let (lp, g) = trajectory_logprob_and_grad(params, t)?;
                Ok((lp.exp(), t.reward_total().expect("scored"), g))
            })
            .collect()
    }

    pub fn probabilities(&self, params: &PolicyParams) -> Result<Vec<f64>> {
        Ok(self.table(params)?.into_iter().map(|(p, _, _)| p).collect())
    }

    /// `J(θ) = Σ π(τ) R(τ)`.
    pub fn objective(&self, params: &PolicyParams) -> Result<f64> {
        Ok(self.table(params)?.iter().map(|(p, r, _)| p * r).sum())
    }
}

/// `Σ_τ π(τ) R(τ) ∇log π(τ)` by enumeration.
pub fn exact_policy_gradient(env: &TinyEnv, params: &PolicyParams) -> Result<Vec<f64>> {
    let mut out = vec![0.0; PARAM_DIM];
    for (p, r, g) in env.table(params)? {
        for (o, x) in out.iter_mut().zip(&g) {
            *o += p * r * x;
        }
    }
    Ok(out)
}

/// Running per-coordinate mean and variance.
#[derive(Clone, Debug)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn merge(mut self, other: &Moments) -> Self {
        if other.n == 0.0 {
            return self;
        }
        let n = self.n + other.n;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * other.n / n;
            self.m2[i] += other.m2[i] + d * d * self.n * other.n / n;
        }
        self.n = n;
        self
    }

    /// Standard error of each coordinate's mean.
    fn std_err(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|s| (s / (self.n - 1.0).max(1.0) / self.n).sqrt())
            .collect()
    }
}

fn z_scores(mean: &[f64], target: &[f64], se: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(target)
        .zip(se)
        .map(|((m, t), s)| {
            let d = m - t;
            if *s > 0.0 {
                d / s
            } else if d.abs() <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        d / n
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub seed: u64,
    pub samples: usize,
    pub group_size: usize,
    pub exact_grad: Vec<f64>,
    pub estimate_mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub cosine: f64,
    /// `(estimate − exact) / SE` per coordinate.
    pub z_scores: Vec<f64>,
    pub max_abs_z: f64,
    /// Same, against `(1 − 1/G)` times the exact gradient: the expectation
    /// of the estimator when the baseline includes the sample itself.
    pub max_abs_z_scaled: f64,
    /// `‖mean ∇log π‖` over all sampled trajectories and the matching
    /// `√Σ SE²` it should be compared with.
    pub baseline_norm: f64,
    pub baseline_se: f64,
}

impl UnbiasednessReport {
    pub fn cosine_ok(&self) -> bool {
        self.cosine >= 0.99
    }

    pub fn z_ok(&self) -> bool {
        self.max_abs_z <= 4.0
    }

    pub fn baseline_ok(&self) -> bool {
        self.baseline_norm <= 4.0 * self.baseline_se
    }

    pub fn passed(&self) -> bool {
        self.cosine_ok() && self.z_ok() && self.baseline_ok()
    }
}

const CHUNK: usize = 1_000;

/// Draws `samples` groups of `group_size` rollouts from the sampling policy
/// at `params` and compares the mean group-relative gradient with the
/// enumerated one. Group `m` uses the stream `(seed, m)`.
pub fn check_unbiasedness(
    env: &TinyEnv,
    params: &PolicyParams,
    group_size: usize,
    samples: usize,
    seed: u64,
) -> Result<UnbiasednessReport> {
    if group_size < 2 {
        return Err(Error::Config("group size must be at least 2".into()));
    }
    let exact = exact_policy_gradient(env, params)?;
    let policy = LinearPolicy::new(params.clone(), Decode::Sample);
    let chunks: Vec<(Moments, Moments)> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| -> Result<(Moments, Moments)> {
            let mut est = Moments::new(PARAM_DIM);
            let mut score = Moments::new(PARAM_DIM);
            for m in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let group = rollout_group(
                    &policy,
                    &env.env,
                    &env.request,
                    group_size,
                    &env.loop_config,
                    rng::derive_seed(&[seed, m as u64]),
                );
                est.push(&group_gradient(params, &group)?);
                for t in &group.trajectories {
                    score.push(&trajectory_logprob_and_grad(params, t)?.1);
                }
            }
            Ok((est, score))
        })
        .collect::<Result<_>>()?;
    let (est, score) = chunks.iter().fold(
        (Moments::new(PARAM_DIM), Moments::new(PARAM_DIM)),
        |(a, b), (x, y)| (a.merge(x), b.merge(y)),
    );
    let se = est.std_err();
    let z = z_scores(&est.mean, &exact, &se);
    let scale = 1.0 - 1.0 / group_size as f64;
    let scaled: Vec<f64> = exact.iter().map(|g| g * scale).collect();
    let z_scaled = z_scores(&est.mean, &scaled, &se);
    Ok(UnbiasednessReport {
        seed,
        samples,
        group_size,
        cosine: cosine(&est.mean, &exact),
        max_abs_z: max_abs(&z),
        max_abs_z_scaled: max_abs(&z_scaled),
        z_scores: z,
        baseline_norm: norm(&score.mean),
        baseline_se: norm(&score.std_err()),
        estimate_mean: est.mean,
        std_err: se,
        exact_grad: exact,
    })
}

/// An evenly spaced grid `lo, lo + step, ..., hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
            step: 0.01,
        }
    }
}

impl Grid {
    /// Points are `lo + i·step`, computed from the integer index so that the
    /// grid holds no accumulated rounding.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step).round() as i64;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

/// `2 ln(1 + e^{−x})`, without overflow for large `|x|`.
pub fn bidirectional_logistic_loss(margin: f64) -> f64 {
    let softplus = if margin > 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    };
    2.0 * softplus
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticBoundReport {
    pub points: usize,
    /// Points where the loss falls below `ln 2 · 1[margin < 0]`.
    pub bound_violations: usize,
    pub negative_second_differences: usize,
    /// Largest gap between the loss computed from the two direction tasks
    /// and the closed form.
    pub max_route_gap: f64,
}

impl LogisticBoundReport {
    pub fn passed(&self) -> bool {
        self.bound_violations == 0 && self.negative_second_differences == 0 && self.max_route_gap <= 1e-12
    }
}

/// Loss of the two direction tasks for a pair with score margin `margin`,
/// computed through the policy: `−log P(more → c⁺) − log P(less → c⁻)`.
pub fn direction_task_loss(margin: f64) -> f64 {
    let mut params = PolicyParams::zeros();
    params.values_mut()[SCORE_OFFSET] = 1.0;
    let mut features_a = [0.0; SCORE_DIM];
    features_a[0] = margin;
    let more = PairTask {
        request_id: 0,
        a: 1,
        b: 2,
        features_a,
        features_b: [0.0; SCORE_DIM],
        direction: Direction::More,
        target: Slot::A,
    };
    let less = PairTask {
        direction: Direction::Less,
        target: Slot::B,
        ..more.clone()
    };
    -pair_logprob_and_grad(&params, &more, Slot::A).0 - pair_logprob_and_grad(&params, &less, Slot::B).0
}

pub fn check_logistic_bound(grid: &Grid) -> LogisticBoundReport {
    let xs = grid.points();
    let loss: Vec<f64> = xs.iter().map(|x| bidirectional_logistic_loss(*x)).collect();
    let ln2 = std::f64::consts::LN_2;
    let bound_violations = xs
        .iter()
        .zip(&loss)
        .filter(|(x, l)| **l < if **x < 0.0 { ln2 } else { 0.0 })
        .count();
    let negative_second_differences = loss.windows(3).filter(|w| w[0] - 2.0 * w[1] + w[2] < 0.0).count();
    let max_route_gap = xs
        .iter()
        .zip(&loss)
        .map(|(x, l)| (direction_task_loss(*x) - l).abs())
        .fold(0.0, f64::max);
    LogisticBoundReport {
        points: xs.len(),
        bound_violations,
        negative_second_differences,
        max_route_gap,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdConfig {
    pub cases: usize,
    pub step: f64,
    /// Standard deviation of the random parameter draws.
    pub param_scale: f64,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            cases: 50,
            step: 1e-5,
            param_scale: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub cases: usize,
    pub action_max_rel_err: f64,
    pub ranking_max_rel_err: f64,
    pub pair_max_rel_err: f64,
    pub trajectory_max_rel_err: f64,
    /// Rewriting the text of masked observations left every gradient as is.
    pub masked_obs_invariant: bool,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.action_max_rel_err
            .max(self.ranking_max_rel_err)
            .max(self.pair_max_rel_err)
            .max(self.trajectory_max_rel_err)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance && self.masked_obs_invariant
    }
}

/// `max_i |a_i − n_i| / max(‖a‖∞, ‖n‖∞)`; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = max_abs(analytic).max(max_abs(numeric));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central differences of `f` at `params`.
pub fn numeric_gradient(params: &PolicyParams, step: f64, mut f: impl FnMut(&PolicyParams) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; PARAM_DIM];
    let mut p = params.clone();
    for (i, o) in out.iter_mut().enumerate() {
        let x = params.as_slice()[i];
        p.values_mut()[i] = x + step;
        let up = f(&p);
        p.values_mut()[i] = x - step;
        let down = f(&p);
        p.values_mut()[i] = x;
        *o = (up - down) / (2.0 * step);
    }
    out
}

/// Independent `N(0, scale²)` draws for every coordinate.
pub fn sample_params(rng: &mut rng::Rng, scale: f64) -> PolicyParams {
    let normal = Normal::new(0.0, scale).expect("positive scale");
    PolicyParams::from_flat((0..PARAM_DIM).map(|_| normal.sample(rng)).collect()).expect("finite draws")
}

fn random_evidence(rng: &mut rng::Rng, n: usize) -> EvidenceState {
    let mut ev = EvidenceState::from_features(
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect(),
    );
    for c in ev.calls.iter_mut() {
        *c = rng.random_range(0..3);
    }
    ev
}

/// Central differences against the analytic gradients of the action choice,
/// the ranking distribution, the pair choice and whole trajectories on
/// `cases` random draws. Trajectories are sampled in `env` on `requests`.
pub fn finite_difference_suite(
    env: &Environment,
    requests: &[RecommendationRequest],
    cfg: &FdConfig,
) -> Result<FdReport> {
    if requests.is_empty() {
        return Err(Error::Config("finite-difference suite needs at least one request".into()));
    }
    let registry = &env.registry;
    let actions = Action::available(registry);
    let loop_cfg = LoopConfig::default();
    let results: Vec<[f64; 4]> = (0..cfg.cases)
        .into_par_iter()
        .map(|case| -> Result<[f64; 4]> {
            let mut rng = rng::stream(&[cfg.seed, case as u64]);
            let params = sample_params(&mut rng, cfg.param_scale);
            let n = rng.random_range(2..=20);
            let ev = random_evidence(&mut rng, n);
            let n_tool = rng.random_range(0..=loop_cfg.t_max);

            let action = actions[rng.random_range(0..actions.len())];
            let (_, a) = action_logprob_and_grad(&params, &ev, n_tool, loop_cfg.t_max, registry, action)?;
            let num = numeric_gradient(&params, cfg.step, |p| {
                action_logprob_and_grad(p, &ev, n_tool, loop_cfg.t_max, registry, action)
                    .expect("available")
                    .0
            });
            let e_action = relative_error(&a, &num);

            let k = rng.random_range(1..=n.min(10));
            let ranking = crate::policy::sample_ranking(&crate::policy::candidate_scores(&params, &ev), k, &mut rng).0;
            let (_, a) = pl_logprob_and_grad(&params, &ev, &ranking)?;
            let num = numeric_gradient(&params, cfg.step, |p| pl_logprob_and_grad(p, &ev, &ranking).expect("valid").0);
            let e_rank = relative_error(&a, &num);

            let task = PairTask {
                request_id: 0,
                a: 1,
                b: 2,
                features_a: ev.features[0],
                features_b: ev.features[1],
                direction: if rng.random::<bool>() { Direction::More } else { Direction::Less },
                target: Slot::A,
            };
            let choice = if rng.random::<bool>() { Slot::A } else { Slot::B };
            let (_, a) = pair_logprob_and_grad(&params, &task, choice);
            let num = numeric_gradient(&params, cfg.step, |p| pair_logprob_and_grad(p, &task, choice).0);
            let e_pair = relative_error(&a, &num);

            let req = &requests[rng.random_range(0..requests.len())];
            let policy = LinearPolicy::new(params.clone(), Decode::Sample);
            let traj = run_trajectory(&policy, env, req, &loop_cfg, &mut rng);
            let e_traj = if traj.steps.iter().any(|s| s.logprob.is_some_and(|l| l != 0.0)) {
                let (_, a) = trajectory_logprob_and_grad(&params, &traj)?;
                let num = numeric_gradient(&params, cfg.step, |p| {
                    trajectory_logprob_and_grad(p, &traj).expect("replayable").0
                });
                relative_error(&a, &num)
            } else {
                0.0
            };
            Ok([e_action, e_rank, e_pair, e_traj])
        })
        .collect::<Result<_>>()?;
    let col = |j: usize| results.iter().map(|r| r[j]).fold(0.0, f64::max);
    Ok(FdReport {
        cases: cfg.cases,
        action_max_rel_err: col(0),
        ranking_max_rel_err: col(1),
        pair_max_rel_err: col(2),
        trajectory_max_rel_err: col(3),
        masked_obs_invariant: masked_obs_invariant(env, requests, cfg)?,
    })
}

/// Replays trajectories with every observation's text rewritten and checks
/// the gradient does not move.
fn masked_obs_invariant(env: &Environment, requests: &[RecommendationRequest], cfg: &FdConfig) -> Result<bool> {
    let mut rng = rng::stream(&[cfg.seed, 0x0B5]);
    for req in requests.iter().take(10) {
        let params = sample_params(&mut rng, cfg.param_scale);
        let traj = run_trajectory(
            &LinearPolicy::new(params.clone(), Decode::Sample),
            env,
            req,
            &LoopConfig::default(),
            &mut rng,
        );
        let mut edited = traj.clone();
        for s in &mut edited.steps {
            if let StepPayload::Obs { observation } = &mut s.payload {
                observation.text = "(redacted)".into();
            }
        }
        if trajectory_logprob_and_grad(&params, &traj)? != trajectory_logprob_and_grad(&params, &edited)? {
            return Ok(false);
        }
    }
    Ok(true)
}

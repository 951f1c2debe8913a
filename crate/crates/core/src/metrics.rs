//! Hit ratio and NDCG over a split, plus tool-usage aggregates.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agentloop::{run_trajectory, LoopConfig, Trajectory};
use crate::corpus::RecommendationRequest;
use crate::policy::{Decode, LinearPolicy, Policy, PolicyParams};
use crate::reward::assign_reward;
use crate::{rng, Environment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Length of the list the agent emits.
    pub k: usize,
    pub t_max: usize,
    pub decode: Decode,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            k: 10,
            t_max: 10,
            decode: Decode::Greedy,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hit_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub count: usize,
    /// Requests whose output failed validation; scored as misses.
    pub invalid: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn hit(&self, k: usize) -> f64 {
        self.hit_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Aggregates per-request hit ranks (`None` for a miss or invalid output).
    pub fn from_hit_ranks(hit_ranks: &[Option<usize>], invalid: usize, ks: &[usize], fingerprint: String) -> Self {
        let n = hit_ranks.len().max(1) as f64;
        let mut hit_at = BTreeMap::new();
        let mut ndcg_at = BTreeMap::new();
        for &k in ks {
            let mut hits = 0usize;
            let mut gains = Vec::with_capacity(hit_ranks.len());
            for r in hit_ranks.iter().flatten().filter(|r| **r <= k) {
                hits += 1;
                gains.push(1.0 / ((r + 1) as f64).log2());
            }
            gains.sort_by(f64::total_cmp);
            hit_at.insert(k, hits as f64 / n);
            ndcg_at.insert(k, gains.iter().sum::<f64>() / n);
        }
        Self {
            hit_at,
            ndcg_at,
            count: hit_ranks.len(),
            invalid,
            fingerprint,
        }
    }
}

/// Expected H@k of a policy that lists k of n candidates uniformly at random.
pub fn uniform_expected_hit(n: usize, k: usize) -> f64 {
    k.min(n) as f64 / n as f64
}

/// Expected N@k of the same policy: the positive sits at each of the first
/// `min(k, n)` positions with probability `1/n`.
pub fn uniform_expected_ndcg(n: usize, k: usize) -> f64 {
    (1..=k.min(n))
        .map(|r| 1.0 / (n as f64 * ((r + 1) as f64).log2()))
        .sum()
}

fn fingerprint(cfg: &EvalConfig, requests: &[RecommendationRequest], extra: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for r in requests {
        h.update(r.id.to_le_bytes());
    }
    h.update(extra);
    hex::encode(h.finalize())
}

/// One trajectory per request; request `i` draws from the stream
/// `(seed, request id)` so the result does not depend on thread count.
pub fn evaluate_policy<P: Policy + ?Sized>(
    policy: &P,
    env: &Environment,
    requests: &[RecommendationRequest],
    cfg: &EvalConfig,
) -> (EvalReport, Vec<Trajectory>) {
    let loop_cfg = LoopConfig::new(cfg.k, cfg.t_max);
    let trajs: Vec<Trajectory> = requests
        .par_iter()
        .map(|req| {
            let mut r = rng::stream(&[cfg.seed, req.id]);
            let mut t = run_trajectory(policy, env, req, &loop_cfg, &mut r);
            assign_reward(&mut t, req, cfg.k);
            t
        })
        .collect();
    let hit_ranks: Vec<Option<usize>> = trajs
        .iter()
        .map(|t| t.reward.as_ref().and_then(|r| r.hit_rank))
        .collect();
    let invalid = trajs.iter().filter(|t| !t.verdict.is_valid).count();
    let report = EvalReport::from_hit_ranks(&hit_ranks, invalid, &cfg.ks, fingerprint(cfg, requests, &[]));
    (report, trajs)
}

/// Evaluates the reference policy at `params`.
pub fn evaluate(
    params: &PolicyParams,
    env: &Environment,
    requests: &[RecommendationRequest],
    cfg: &EvalConfig,
) -> EvalReport {
    let policy = LinearPolicy::new(params.clone(), cfg.decode);
    let (mut report, _) = evaluate_policy(&policy, env, requests, cfg);
    let bytes: Vec<u8> = params.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    report.fingerprint = fingerprint(cfg, requests, &bytes);
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolUsage {
    pub trajectories: usize,
    pub mean_tool_calls: f64,
    /// `None` when no trajectory earned a positive reward.
    pub tool_use_rate: Option<f64>,
}

pub fn tool_usage_stats(trajectories: &[Trajectory]) -> ToolUsage {
    let n = trajectories.len();
    let positive: Vec<&Trajectory> = trajectories
        .iter()
        .filter(|t| t.reward_total().is_some_and(|r| r > 0.0))
        .collect();
    ToolUsage {
        trajectories: n,
        mean_tool_calls: trajectories.iter().map(|t| t.n_tool as f64).sum::<f64>() / n.max(1) as f64,
        tool_use_rate: (!positive.is_empty())
            .then(|| positive.iter().filter(|t| t.n_tool > 0).count() as f64 / positive.len() as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agentloop::{ValidityVerdict, VerdictReason};
    use crate::policy::{Decision, DecisionState, EvidenceState, ScriptedPolicy};
    use crate::reward::{Gate, RewardBreakdown};
    use crate::rng::Rng;
    use crate::testutil::small_env;
    use crate::tools::ToolRegistry;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    /// Always puts the logged item first; it is told the answers up front.
    struct Oracle(BTreeMap<u64, usize>);

    impl Policy for Oracle {
        fn decide(&self, state: &DecisionState<'_>, _: &mut Rng) -> Decision {
            let pos = self.0[&state.ctx.request.id];
            let mut ranking = vec![pos];
            ranking.extend((1..=state.ctx.request.n()).filter(|&i| i != pos).take(state.k - 1));
            Decision::Rank { ranking, logprob: 0.0 }
        }
    }

    /// Lists k candidates uniformly at random.
    struct Uniform;

    impl Policy for Uniform {
        fn decide(&self, state: &DecisionState<'_>, rng: &mut Rng) -> Decision {
            let mut all: Vec<usize> = (1..=state.ctx.request.n()).collect();
            all.shuffle(rng);
            all.truncate(state.k);
            Decision::Rank { ranking: all, logprob: 0.0 }
        }
    }

    #[test]
    fn oracle_policy_is_perfect() {
        let (env, split) = small_env();
        let answers = split.test.iter().map(|r| (r.id, r.positive_index)).collect();
        let (r, _) = evaluate_policy(&Oracle(answers), &env, &split.test, &EvalConfig::default());
        assert!(r.count > 0);
        for k in [1, 5, 10] {
            assert_eq!(r.hit(k), 1.0);
            assert_eq!(r.ndcg(k), 1.0);
        }
        assert_eq!(r.invalid, 0);
    }

    /// Brute force over every ordered k-subset of n candidates.
    fn enumerate_uniform(n: usize, k: usize) -> (f64, f64) {
        fn rec(n: usize, k: usize, prefix: &mut Vec<usize>, acc: &mut (f64, f64, usize)) {
            if prefix.len() == k {
                acc.2 += 1;
                if let Some(p) = prefix.iter().position(|&i| i == 0) {
                    acc.0 += 1.0;
                    acc.1 += 1.0 / ((p + 2) as f64).log2();
                }
                return;
            }
            for i in 0..n {
                if !prefix.contains(&i) {
                    prefix.push(i);
                    rec(n, k, prefix, acc);
                    prefix.pop();
                }
            }
        }
        let mut acc = (0.0, 0.0, 0);
        rec(n, k, &mut Vec::new(), &mut acc);
        (acc.0 / acc.2 as f64, acc.1 / acc.2 as f64)
    }

    #[test]
    fn uniform_constants_match_enumeration() {
        for (n, k) in [(3, 1), (5, 3), (6, 4), (7, 7), (8, 3)] {
            let (h, g) = enumerate_uniform(n, k);
            assert!((uniform_expected_hit(n, k) - h).abs() < 1e-12);
            assert!((uniform_expected_ndcg(n, k) - g).abs() < 1e-12);
        }
        let mean: f64 = (1..=10).map(|r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / 10.0;
        assert!((uniform_expected_ndcg(20, 10) - 0.5 * mean).abs() < 1e-15);
        assert_eq!(uniform_expected_hit(20, 10), 0.5);
        assert_eq!(uniform_expected_hit(20, 1), 0.05);
    }

    #[test]
    fn uniform_policy_approaches_the_constants() {
        let (env, split) = small_env();
        let reqs: Vec<RecommendationRequest> = split.all().cloned().collect();
        let mut hits = Vec::new();
        for seed in 0..20 {
            let cfg = EvalConfig {
                seed,
                ..Default::default()
            };
            let (_, trajs) = evaluate_policy(&Uniform, &env, &reqs, &cfg);
            hits.extend(trajs.iter().map(|t| t.reward.as_ref().unwrap().hit_rank));
        }
        let r = EvalReport::from_hit_ranks(&hits, 0, &[1, 10], String::new());
        let n = hits.len() as f64;
        let se10 = (0.25 / n).sqrt();
        let se1 = (0.05 * 0.95 / n).sqrt();
        assert!((r.hit(10) - 0.5).abs() < 4.0 * se10, "{}", r.hit(10));
        assert!((r.hit(1) - 0.05).abs() < 4.0 * se1, "{}", r.hit(1));
        assert!((r.ndcg(10) - uniform_expected_ndcg(20, 10)).abs() < 4.0 * se10);
    }

    #[test]
    fn invalid_outputs_count_as_misses() {
        let (env, split) = small_env();
        let reqs = &split.test[..5];
        let bad = ScriptedPolicy::new(vec![Decision::Rank {
            ranking: vec![1, 1, 2, 3, 4, 5, 6, 7, 8, 9],
            logprob: 0.0,
        }]);
        let (r, _) = evaluate_policy(&bad, &env, reqs, &EvalConfig::default());
        assert_eq!(r.invalid, 5);
        assert_eq!(r.hit(10), 0.0);
        assert_eq!(r.count, 5);
    }

    #[test]
    fn evaluation_is_deterministic_and_fingerprinted() {
        let (env, split) = small_env();
        let p = PolicyParams::zeros();
        let cfg = EvalConfig::default();
        let a = evaluate(&p, &env, &split.val, &cfg);
        let b = evaluate(&p, &env, &split.val, &cfg);
        assert_eq!(a, b);
        let mut q = p.clone();
        q.values_mut()[0] = 1.0;
        assert_ne!(evaluate(&q, &env, &split.val, &cfg).fingerprint, a.fingerprint);
    }

    fn scored(n_tool: usize, total: Option<f64>) -> Trajectory {
        let cfg = LoopConfig::default();
        Trajectory {
            request_id: 0,
            tools: ToolRegistry::default(),
            t_max: cfg.t_max,
            k: cfg.k,
            initial_evidence: EvidenceState::from_features(vec![]),
            steps: Vec::new(),
            ranking: None,
            n_tool,
            total_logprob: 0.0,
            verdict: ValidityVerdict::invalid(VerdictReason::NoRanking),
            reward: total.map(|t| RewardBreakdown {
                total: t,
                rank_component: t,
                gate: Gate::Ndcg,
                tool_bonus: 0.0,
                hit_rank: None,
            }),
        }
    }

    #[test]
    fn tool_usage_examples() {
        let t: Vec<Trajectory> = (0..4).map(|c| scored(c, Some(-1.0))).collect();
        let s = tool_usage_stats(&t);
        assert_eq!(s.mean_tool_calls, 1.5);
        assert_eq!(s.tool_use_rate, None);
        let t = vec![scored(2, Some(1.0)), scored(0, Some(0.5)), scored(1, Some(-1.0))];
        assert_eq!(tool_usage_stats(&t).tool_use_rate, Some(0.5));
    }

    proptest! {
        #[test]
        fn metrics_are_monotone_and_recount_exactly(
            ranks in prop::collection::vec(prop::option::of(1usize..=10), 1..80),
        ) {
            let ks = [1, 2, 3, 5, 10];
            let r = EvalReport::from_hit_ranks(&ranks, 0, &ks, String::new());
            let mut prev = (0.0, 0.0);
            for k in ks {
                let (h, g) = (r.hit(k), r.ndcg(k));
                let brute = ranks.iter().filter(|x| x.is_some_and(|x| x <= k)).count() as f64 / ranks.len() as f64;
                prop_assert_eq!(h, brute);
                prop_assert!(g <= h + 1e-12 && (0.0..=1.0).contains(&h));
                prop_assert!(h >= prev.0 && g >= prev.1 - 1e-12);
                prev = (h, g);
            }
        }
    }
}

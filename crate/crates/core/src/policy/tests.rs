use rand::Rng as _;

use super::*;
use crate::agentloop::{run_trajectory, LoopConfig, Step};
use crate::rng;
use crate::testutil::small_env;
use crate::tools::ToolRegistry;

fn random_params(seed: u64, scale: f64) -> PolicyParams {
    let mut r = rng::stream(&[seed, 99]);
    PolicyParams::from_flat((0..PARAM_DIM).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect())
        .unwrap()
}

fn fd_gradient(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..PARAM_DIM)
        .map(|i| {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-12, f64::max);
    diff / scale
}

#[test]
fn zero_params_give_uniform_actions() {
    let ev = EvidenceState::from_features(vec![[0.0; SCORE_DIM]; 4]);
    let registry = ToolRegistry::default();
    let dist = action_distribution(&PolicyParams::zeros(), &ev, 0, 10, &registry);
    assert_eq!(dist.len(), 8);
    for (a, p) in &dist {
        assert!((p - 1.0 / 8.0).abs() < 1e-15);
        let (lp, _) =
            action_logprob_and_grad(&PolicyParams::zeros(), &ev, 0, 10, &registry, *a).unwrap();
        assert!((lp + 8f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn saturated_action_is_chosen_with_logprob_near_zero() {
    let ev = EvidenceState::from_features(vec![[0.0; SCORE_DIM]; 4]);
    let registry = ToolRegistry::default();
    let mut params = PolicyParams::zeros();
    let target = Action::Tool(ToolId::GetRatingBehavior);
    params.values_mut()[target.index() * ACTION_FEATURES] = 50.0;
    let (lp, _) = action_logprob_and_grad(&params, &ev, 0, 10, &registry, target).unwrap();
    assert!(lp > -1e-15 * 1e6 && lp <= 0.0, "{lp}");
    let dist = action_distribution(&params, &ev, 0, 10, &registry);
    assert!(dist.iter().find(|(a, _)| *a == target).unwrap().1 > 1.0 - 1e-15);
}

#[test]
fn unavailable_action_is_a_contract_error() {
    let ev = EvidenceState::from_features(vec![[0.0; SCORE_DIM]; 2]);
    let registry = ToolRegistry::without_collab();
    let r = action_logprob_and_grad(
        &PolicyParams::zeros(),
        &ev,
        0,
        10,
        &registry,
        Action::Tool(ToolId::GetSimilarUsers),
    );
    assert!(r.is_err());
}

#[test]
fn two_action_zero_param_gradient_matches_hand_derivation() {
    let ev = EvidenceState::from_features(vec![[0.0; SCORE_DIM]; 2]);
    let registry = ToolRegistry::with_tools([ToolId::CandidatesAnalyze]);
    let chosen = Action::Tool(ToolId::CandidatesAnalyze);
    let (lp, grad) =
        action_logprob_and_grad(&PolicyParams::zeros(), &ev, 0, 1, &registry, chosen).unwrap();
    assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    // (onehot − uniform) ⊗ features: tool block gets 0.5·[1,1,0,0], rank block −0.5·[1,0,0,0]
    let mut expected = vec![0.0; PARAM_DIM];
    let tool = chosen.index() * ACTION_FEATURES;
    expected[tool] = 0.5;
    expected[tool + 1] = 0.5;
    expected[0] = -0.5;
    assert_eq!(grad, expected);
}

#[test]
fn scores_are_linear_in_evidence() {
    let zero = PolicyParams::zeros();
    let ev = EvidenceState::from_features(vec![[0.3; SCORE_DIM], [0.7; SCORE_DIM]]);
    assert_eq!(candidate_scores(&zero, &ev), vec![0.0, 0.0]);

    let params = random_params(3, 1.0);
    let mut before = EvidenceState::from_features(vec![[0.0; SCORE_DIM]; 2]);
    before.features[0][slot::PRICE_MATCH] = 0.4;
    before.features[1][slot::PRICE_MATCH] = 0.9;
    let mut after = before.clone();
    after.features[0][slot::USER_SIMILARITY] = 0.25;
    after.features[1][slot::USER_SIMILARITY] = -0.5;
    let s0 = candidate_scores(&params, &before);
    let s1 = candidate_scores(&params, &after);
    let w = params.theta_score()[slot::USER_SIMILARITY];
    assert!((s1[0] - s0[0] - w * 0.25).abs() < 1e-15);
    assert!((s1[1] - s0[1] - w * -0.5).abs() < 1e-15);

    let dup = EvidenceState::from_features(vec![[0.2; SCORE_DIM], [0.2; SCORE_DIM]]);
    let s = candidate_scores(&params, &dup);
    assert_eq!(s[0], s[1]);
}

#[test]
fn plackett_luce_closed_forms() {
    let perms = [[1, 2, 3], [1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];
    for p in perms {
        assert!((pl_probability(&[0.4, 0.4, 0.4], &p) - 1.0 / 6.0).abs() < 1e-15);
    }
    let scores = [10.0, 0.0, -10.0];
    let e = |x: f64| x.exp();
    let expected = e(10.0) / (e(10.0) + 1.0 + e(-10.0));
    assert!((pl_probability(&scores, &[1]) - expected).abs() < 1e-15);

    // shift invariance and per-slot normalisation
    let scores = [0.3, -1.2, 2.0, 0.7];
    let shifted: Vec<f64> = scores.iter().map(|s| s + 17.0).collect();
    let mut total = 0.0;
    for a in 1..=4 {
        let mut slot_total = 0.0;
        for b in (1..=4).filter(|&b| b != a) {
            let p = pl_probability(&scores, &[a, b]);
            assert!((p - pl_probability(&shifted, &[a, b])).abs() < 1e-14);
            slot_total += p;
        }
        assert!((slot_total - pl_probability(&scores, &[a])).abs() < 1e-12);
        total += slot_total;
    }
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn sampled_rankings_match_exact_probabilities() {
    let scores = [0.5, -0.3, 1.1, 0.0];
    let draws = 100_000;
    let mut counts = std::collections::HashMap::new();
    let mut r = rng::stream(&[17]);
    for _ in 0..draws {
        let (ranking, lp) = sample_ranking(&scores, 2, &mut r);
        assert!((lp - pl_probability(&scores, &ranking).ln()).abs() < 1e-12);
        *counts.entry(ranking).or_insert(0usize) += 1;
    }
    for a in 1..=4 {
        for b in (1..=4).filter(|&b| b != a) {
            let p = pl_probability(&scores, &[a, b]);
            let observed = *counts.get(&vec![a, b]).unwrap_or(&0) as f64 / draws as f64;
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((observed - p).abs() <= 3.0 * sigma, "{a},{b}: {observed} vs {p}");
        }
    }
}

#[test]
fn greedy_ranking_breaks_ties_by_index() {
    let (r, lp) = greedy_ranking(&[0.0; 5], 3);
    assert_eq!(r, vec![1, 2, 3]);
    assert!((lp - (1.0f64 / 60.0).ln()).abs() < 1e-12);
    assert_eq!(greedy_ranking(&[0.1, 0.9, 0.5], 3).0, vec![2, 3, 1]);
}

fn task(direction: Direction, fa: f64, fb: f64) -> PairTask {
    let mut features_a = [0.0; SCORE_DIM];
    let mut features_b = [0.0; SCORE_DIM];
    features_a[slot::CATEGORY_MATCH] = fa;
    features_b[slot::CATEGORY_MATCH] = fb;
    PairTask {
        request_id: 0,
        a: 1,
        b: 2,
        features_a,
        features_b,
        direction,
        target: Slot::A,
    }
}

#[test]
fn pair_choice_direction_identity() {
    let mut params = PolicyParams::zeros();
    assert_eq!(pair_probability(&params, &task(Direction::More, 0.3, 0.3)), 0.5);
    assert_eq!(pair_probability(&params, &task(Direction::Less, 0.3, 0.3)), 0.5);

    params.values_mut()[SCORE_OFFSET + slot::CATEGORY_MATCH] = 1.5;
    params.values_mut()[PAIR_OFFSET + slot::CATEGORY_MATCH] = 0.5;
    let more = task(Direction::More, 0.9, 0.2);
    let less = task(Direction::Less, 0.9, 0.2);
    let delta: f64 = 2.0 * (0.9 - 0.2);
    let sigma = 1.0 / (1.0 + (-delta).exp());
    let p_more_a = pair_probability(&params, &more);
    let p_less_b = 1.0 - pair_probability(&params, &less);
    assert!((p_more_a - sigma).abs() < 1e-12);
    assert!((p_less_b - sigma).abs() < 1e-12);

    let mut r1 = rng::stream(&[4]);
    let mut r2 = rng::stream(&[4]);
    assert_eq!(pair_choice(&params, &more, &mut r1), pair_choice(&params, &more, &mut r2));
}

#[test]
fn pair_gradient_matches_finite_differences() {
    for (i, direction) in [Direction::More, Direction::Less].into_iter().enumerate() {
        let params = random_params(10 + i as u64, 1.0);
        let mut t = task(direction, 0.8, 0.1);
        t.features_a[slot::SESSION] = 0.4;
        t.features_b[slot::PRICE_MATCH] = 0.6;
        for choice in [Slot::A, Slot::B] {
            let (_, g) = pair_logprob_and_grad(&params, &t, choice);
            let fd = fd_gradient(&params, |p| pair_logprob_and_grad(p, &t, choice).0);
            assert!(rel_err(&g, &fd) < 1e-6);
        }
    }
}

#[test]
fn trajectory_gradient_matches_finite_differences() {
    let (env, split) = small_env();
    let req = &split.train[3];
    let script = ScriptedPolicy::tools_then_rank(ToolId::CandidatesAnalyze, 1, vec![4, 1, 7]);
    let cfg = LoopConfig::new(3, 10);
    let traj = run_trajectory(&script, &env, req, &cfg, &mut rng::stream(&[1]));
    assert!(traj.verdict.is_valid);
    assert_eq!(traj.n_tool, 1);
    for seed in 0..5 {
        let params = random_params(seed, 1.0);
        let (lp, g) = trajectory_logprob_and_grad(&params, &traj).unwrap();
        assert!(lp < 0.0);
        let fd = fd_gradient(&params, |p| trajectory_logprob_and_grad(p, &traj).unwrap().0);
        assert!(rel_err(&g, &fd) < 1e-6, "seed {seed}: {}", rel_err(&g, &fd));
    }
}

#[test]
fn replay_reproduces_sampled_logprob_and_ignores_observations() {
    let (env, split) = small_env();
    let params = random_params(8, 0.8);
    let policy = LinearPolicy::new(params.clone(), Decode::Sample);
    let cfg = LoopConfig::default();
    for (i, req) in split.train.iter().take(20).enumerate() {
        let mut traj = run_trajectory(&policy, &env, req, &cfg, &mut rng::stream(&[i as u64]));
        let (lp, g) = trajectory_logprob_and_grad(&params, &traj).unwrap();
        assert!((lp - traj.total_logprob).abs() < 1e-9, "{lp} vs {}", traj.total_logprob);

        // sentinel logprobs and duplicated observations change nothing
        let obs_positions: Vec<usize> = (0..traj.steps.len())
            .filter(|&s| traj.steps[s].masked)
            .collect();
        for &s in obs_positions.iter().rev() {
            traj.steps[s].logprob = Some(1e9);
            let dup: Step = traj.steps[s].clone();
            traj.steps.insert(s, dup);
        }
        assert!((traj.sum_logprob() - lp).abs() < 1e-9);
        let (lp2, g2) = trajectory_logprob_and_grad(&params, &traj).unwrap();
        assert_eq!(lp, lp2);
        assert_eq!(g, g2);
    }
}

#[test]
fn decisions_are_seed_deterministic() {
    let (env, split) = small_env();
    let policy = LinearPolicy::new(random_params(2, 1.0), Decode::Sample);
    let cfg = LoopConfig::default();
    let a = run_trajectory(&policy, &env, &split.train[0], &cfg, &mut rng::stream(&[5]));
    let b = run_trajectory(&policy, &env, &split.train[0], &cfg, &mut rng::stream(&[5]));
    assert_eq!(a, b);
}

#[test]
fn full_evidence_fills_every_tool_slot() {
    let (env, split) = small_env();
    let req = &split.test[0];
    let ctx = env.context(req);
    let ev = full_evidence(&ctx, &env.registry);
    assert!(ev.searched.iter().all(|s| *s));
    for tool in ToolId::ALL {
        assert!(ev.invoked(tool));
    }
    let col = |c: usize| ev.features.iter().map(|r| r[c]).collect::<Vec<_>>();
    assert!(col(slot::CATEGORY_MATCH).iter().any(|v| *v > 0.0));
    assert!(col(slot::ITEM_QUALITY).iter().all(|v| *v > 0.0));
}

#[test]
fn checkpoint_round_trip_and_version_guard() {
    let params = random_params(1, 2.0);
    let mut buf = Vec::new();
    params.save(&mut buf).unwrap();
    assert_eq!(PolicyParams::load(buf.as_slice()).unwrap(), params);

    let text = String::from_utf8(buf).unwrap();
    let old = text.replace(
        &format!("\"feature_version\": {FEATURE_VERSION}"),
        "\"feature_version\": 0",
    );
    assert!(matches!(
        PolicyParams::load(old.as_bytes()),
        Err(crate::Error::VersionMismatch { found: 0, .. })
    ));
    assert!(PolicyParams::from_flat(vec![0.0; 3]).is_err());
    assert!(PolicyParams::from_flat(vec![f64::NAN; PARAM_DIM]).is_err());
}

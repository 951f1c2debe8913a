//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria 6 to 9 drive the `toolrank` binary end to end; the rest call the
//! library directly and compare against oracles written here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use serde_json::Value;
use toolrank::agentloop::{Trajectory, ValidityVerdict, VerdictReason};
use toolrank::collab::CollabConfig;
use toolrank::corpus::{generate_synthetic, ItemId, RecommendationRequest, SplitConfig, SplitTag, SyntheticConfig, UserId};
use toolrank::metrics::uniform_expected_ndcg;
use toolrank::policy::EvidenceState;
use toolrank::ppr::hard_negative_set;
use toolrank::reward::{ndcg_at_k, overall_reward};
use toolrank::rng;
use toolrank::tools::ToolRegistry;
use toolrank::verify::{
    check_logistic_bound, check_unbiasedness, finite_difference_suite, sample_params, FdConfig, Grid, TinyEnv,
};
use toolrank::Environment;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// All ordered selections of `k` distinct values from `1..=n`.
fn arrangements(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for prefix in arrangements(n, k - 1) {
        for c in (1..=n).filter(|c| !prefix.contains(c)) {
            let mut next = prefix.clone();
            next.push(c);
            out.push(next);
        }
    }
    out
}

fn request(n: usize, positive_index: usize) -> RecommendationRequest {
    RecommendationRequest {
        id: 1,
        user_id: UserId::from("u"),
        timestamp: 0,
        target_position: 1,
        history: vec![ItemId::from("h")],
        candidates: (1..=n).map(|i| ItemId::new(format!("c{i}"))).collect(),
        positive_index,
        split: SplitTag::Test,
    }
}

fn trajectory(n: usize, k: usize, ranking: Vec<usize>, n_tool: usize, verdict: ValidityVerdict) -> Trajectory {
    Trajectory {
        request_id: 1,
        tools: ToolRegistry::default(),
        t_max: 10,
        k,
        initial_evidence: EvidenceState::from_features(vec![[0.0; 8]; n]),
        steps: Vec::new(),
        ranking: Some(ranking),
        n_tool,
        total_logprob: 0.0,
        verdict,
        reward: None,
    }
}

/// DCG over graded relevances divided by the DCG of their ideal ordering.
fn dcg_oracle(ranking: &[usize], positive: usize, n: usize) -> f64 {
    let dcg = |rels: &[f64]| -> f64 {
        rels.iter()
            .enumerate()
            .map(|(i, r)| (2f64.powf(*r) - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let got: Vec<f64> = ranking.iter().map(|&c| f64::from(u8::from(c == positive))).collect();
    let mut ideal: Vec<f64> = (1..=n).map(|c| f64::from(u8::from(c == positive))).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    ideal.truncate(ranking.len());
    dcg(&got) / dcg(&ideal)
}

fn reward_table() -> Outcome {
    let start = Instant::now();
    let k = 10;
    let req = request(20, 7);
    let with_positive_at = |at: usize| -> Vec<usize> {
        let mut r: Vec<usize> = (1..=20).filter(|&c| c != 7).take(k - 1).collect();
        r.insert(at - 1, 7);
        r
    };
    let cases = [
        ("hit@1 with tools", trajectory(20, k, with_positive_at(1), 2, ValidityVerdict::OK), 1.1),
        ("hit@1 without tools", trajectory(20, k, with_positive_at(1), 0, ValidityVerdict::OK), 1.0),
        ("hit@3", trajectory(20, k, with_positive_at(3), 1, ValidityVerdict::OK), 0.5),
        ("miss", trajectory(20, k, (8..=17).collect(), 3, ValidityVerdict::OK), -0.5),
        (
            "invalid",
            trajectory(20, k, with_positive_at(1), 11, ValidityVerdict::invalid(VerdictReason::BudgetExceeded)),
            -1.0,
        ),
    ];
    let mut failures = Vec::new();
    for (name, t, want) in &cases {
        let got = overall_reward(t, &req, k).total;
        if got != *want {
            failures.push(format!("{name}: {got} != {want}"));
        }
    }
    let rankings = arrangements(5, 3);
    let mut checked = 0;
    let mut max_err = 0.0f64;
    for positive in 1..=5 {
        let req = request(5, positive);
        for r in &rankings {
            let oracle = dcg_oracle(r, positive, 5);
            let ndcg = ndcg_at_k(r, positive, 3).expect("valid ranking");
            let total = overall_reward(&trajectory(5, 3, r.clone(), 0, ValidityVerdict::OK), &req, 3).total;
            let want_total = if r.contains(&positive) { oracle } else { -0.5 };
            max_err = max_err.max((ndcg - oracle).abs()).max((total - want_total).abs());
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let passed = failures.is_empty() && rankings.len() == 60 && max_err <= 1e-12 && elapsed < Duration::from_secs(1);
    outcome(
        passed,
        format!(
            "{} table cases{}, {} rankings x 5 positives ({checked} checks), max error {max_err:.1e}, {elapsed:.2?}",
            cases.len(),
            if failures.is_empty() { String::new() } else { format!(" FAILED {failures:?}") },
            rankings.len()
        ),
    )
}

fn unbiasedness() -> Outcome {
    let start = Instant::now();
    let tiny = TinyEnv::new(3, 2).expect("tiny env");
    let mut lines = Vec::new();
    let mut passed = true;
    for seed in 0..3u64 {
        let params = sample_params(&mut rng::stream(&[seed, 0]), 0.5);
        let rep = check_unbiasedness(&tiny, &params, 8, 100_000, rng::derive_seed(&[seed, 1])).expect("estimator runs");
        passed &= rep.passed();
        lines.push(format!(
            "seed {seed}: cos {:.5} max|z| {:.1} baseline {:.2e}/se {:.2e} [max|z| vs (1-1/G) x exact: {:.2}]",
            rep.cosine, rep.max_abs_z, rep.baseline_norm, rep.baseline_se, rep.max_abs_z_scaled
        ));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(120);
    outcome(passed, format!("{}; {elapsed:.1?}", lines.join("; ")))
}

fn fd_environment() -> (Environment, Vec<RecommendationRequest>) {
    let data = generate_synthetic(
        &SyntheticConfig {
            n_items: 80,
            n_users: 60,
            n_categories: 5,
            ..Default::default()
        },
        11,
    )
    .expect("synthetic data");
    let (env, split) = Environment::build(
        data.catalog,
        data.stream,
        &SplitConfig {
            seed: 11,
            ..Default::default()
        },
        Some(&CollabConfig {
            dim: 8,
            iterations: 5,
            ..Default::default()
        }),
    )
    .expect("environment");
    (env, split.train)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (env, requests) = fd_environment();
    let rep = finite_difference_suite(
        &env,
        &requests,
        &FdConfig {
            cases: 50,
            step: 1e-5,
            param_scale: 0.5,
            seed: 5,
        },
    )
    .expect("fd suite");
    let elapsed = start.elapsed();
    let passed = rep.cases == 50 && rep.passed(1e-5) && elapsed < Duration::from_secs(60);
    outcome(
        passed,
        format!(
            "{} cases, max relative error action {:.1e} ranking {:.1e} pair {:.1e} trajectory {:.1e}, masked obs invariant {}, {elapsed:.1?}",
            rep.cases,
            rep.action_max_rel_err,
            rep.ranking_max_rel_err,
            rep.pair_max_rel_err,
            rep.trajectory_max_rel_err,
            rep.masked_obs_invariant
        ),
    )
}

fn logistic_bound() -> Outcome {
    let rep = check_logistic_bound(&Grid {
        lo: -10.0,
        hi: 10.0,
        step: 0.01,
    });
    let passed = rep.points == 2001
        && rep.bound_violations == 0
        && rep.negative_second_differences == 0
        && rep.max_route_gap <= 1e-12;
    outcome(
        passed,
        format!(
            "{} points, {} violations, {} negative second differences, route gap {:.1e}",
            rep.points, rep.bound_violations, rep.negative_second_differences, rep.max_route_gap
        ),
    )
}

fn hard_negatives() -> Outcome {
    let rankings = arrangements(6, 4);
    let mut mismatches = 0;
    let mut absent = 0;
    for r in &rankings {
        for y in 1..=6 {
            let oracle: Vec<usize> = match r.iter().position(|&c| c == y) {
                Some(p) => r.iter().copied().filter(|&c| r.iter().position(|&x| x == c).unwrap() < p).collect(),
                None => {
                    absent += 1;
                    r.clone()
                }
            };
            let got = hard_negative_set(r, y).map(<[usize]>::to_vec);
            let want = (!oracle.is_empty()).then_some(oracle);
            let same = match (&got, &want) {
                (Some(g), Some(w)) => {
                    let (mut g, mut w) = (g.clone(), w.clone());
                    g.sort_unstable();
                    w.sort_unstable();
                    g == w
                }
                (None, None) => true,
                _ => false,
            };
            mismatches += usize::from(!same);
        }
    }
    outcome(
        rankings.len() == 360 && mismatches == 0 && absent > 0,
        format!("{} rankings x 6 positives ({absent} with the positive absent), {mismatches} mismatches", rankings.len()),
    )
}

const BIN: &str = env!("CARGO_BIN_EXE_toolrank");

/// The pinned learnability world: 200 items, 500 users, n=20, K=10, G=8,
/// batch 64, 3 epochs.
const DESK_CONFIG: &str = r#"
seed = 7
output_dir = "out"
k = 10
t_max = 10

[data.synthetic]
n_items = 200
n_users = 500

[split]
n_candidates = 20

[stage1]
group_size = 8
batch_size = 64
epochs = 3
eval_every = 0

[stage2]
group_size = 8
epochs = 1
"#;

const SMOKE_CONFIG: &str = r#"
seed = 3
output_dir = "out"

[data.synthetic]
n_items = 80
n_users = 60
n_categories = 5

[collab]
dim = 8
iterations = 5

[stage1]
batch_size = 16
epochs = 1
eval_every = 2

[stage2]
batch_size = 16
lr = 1.0

[verify]
tiny_candidates = 2
tiny_k = 1
samples = 2000
repeats = 1
fd_cases = 5
grid = [-2.0, 2.0, 0.5]
"#;

fn toolrank(config: &Path, args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .map_err(|e| format!("cannot start toolrank: {e}"))?;
    if !out.status.success() {
        return Err(format!("toolrank {args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(start.elapsed())
}

fn read_json(path: &Path) -> Value {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn number(v: &Value, pointer: &str) -> f64 {
    v.pointer(pointer)
        .and_then(Value::as_f64)
        .unwrap_or_else(|| panic!("missing {pointer}"))
}

/// One stage-1 plus stage-2 run of the desk-scale pipeline, shared by
/// criteria 6 to 8.
struct DeskRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
    stage1_time: Duration,
    stage2_time: Duration,
}

fn desk_run() -> Result<DeskRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("desk.toml");
    std::fs::write(&config, DESK_CONFIG).map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let mut stage1_time = Duration::ZERO;
    for args in [&["gen-data"][..], &["fit-collab"], &["train", "--stage", "1"]] {
        stage1_time += toolrank(&config, args)?;
    }
    let stage1 = out.join("models/stage1.json");
    toolrank(&config, &["eval", "--checkpoint", stage1.to_str().unwrap(), "--split", "test"])?;
    let stage2_time = toolrank(&config, &["train", "--stage", "2"])?;
    let stage2 = out.join("models/stage2.json");
    toolrank(&config, &["eval", "--checkpoint", stage2.to_str().unwrap(), "--split", "test"])?;
    Ok(DeskRun {
        _dir: dir,
        out,
        stage1_time,
        stage2_time,
    })
}

/// Expected N@10 of a uniformly random top-10 over 20 candidates, by
/// enumerating where the positive lands.
fn uniform_ndcg_oracle(n: usize, k: usize) -> f64 {
    (1..=n)
        .map(|pos| if pos <= k { 1.0 / ((pos + 1) as f64).log2() } else { 0.0 })
        .sum::<f64>()
        / n as f64
}

fn learnability(run: &DeskRun) -> Outcome {
    let report = read_json(&run.out.join("reports/eval_stage1_test.json"));
    let hit1 = number(&report, "/hit_at/1");
    let ndcg10 = number(&report, "/ndcg_at/10");
    let uniform = uniform_expected_ndcg(20, 10);
    let oracle = uniform_ndcg_oracle(20, 10);
    let passed = (uniform - oracle).abs() <= 1e-12
        && hit1 >= 0.15
        && ndcg10 >= uniform + 0.10
        && run.stage1_time < Duration::from_secs(15 * 60);
    outcome(
        passed,
        format!(
            "test H@1 {hit1:.4} (need >= 0.15, uniform 0.05), N@10 {ndcg10:.4} (need >= {:.4}), {:.1?}",
            uniform + 0.10,
            run.stage1_time
        ),
    )
}

fn ppr_effect(run: &DeskRun) -> Outcome {
    let summary = read_json(&run.out.join("logs/stage2_summary.json"));
    let before = number(&summary, "/held_out_violation_before");
    let after = number(&summary, "/held_out_violation_after");
    let pairs = number(&summary, "/held_out_pairs");
    let hit_before = number(&read_json(&run.out.join("reports/eval_stage1_test.json")), "/hit_at/1");
    let hit_after = number(&read_json(&run.out.join("reports/eval_stage2_test.json")), "/hit_at/1");
    let reduction = (before - after) / before;
    let passed = pairs > 0.0
        && reduction >= 0.10
        && hit_after >= hit_before - 0.01
        && run.stage2_time < Duration::from_secs(5 * 60);
    outcome(
        passed,
        format!(
            "violation on {pairs} held-out pairs {before:.4} -> {after:.4} ({:.1}% relative), test H@1 {hit_before:.4} -> {hit_after:.4}, {:.1?}",
            100.0 * reduction,
            run.stage2_time
        ),
    )
}

fn tool_use(run: &DeskRun) -> Outcome {
    let summary = read_json(&run.out.join("logs/stage1_summary.json"));
    let before = number(&summary, "/rollouts_before/tool_use_rate");
    let after = number(&summary, "/rollouts_after/tool_use_rate");
    outcome(
        after > before,
        format!("tool-use rate among positive-reward rollouts {before:.4} -> {after:.4}"),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable run dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable artifact"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("smoke.toml");
    std::fs::write(&config, SMOKE_CONFIG).expect("write config");
    let out = dir.path().join("out");
    let stage1 = out.join("models/stage1.json");
    let stage2 = out.join("models/stage2.json");
    let commands: Vec<Vec<&str>> = vec![
        vec!["gen-data"],
        vec!["fit-collab"],
        vec!["train", "--stage", "1"],
        vec!["train", "--stage", "2"],
        vec!["eval", "--checkpoint", stage1.to_str().unwrap(), "--split", "val"],
        vec!["eval", "--checkpoint", stage2.to_str().unwrap(), "--split", "test"],
        vec!["verify"],
    ];
    let run_all = || -> BTreeMap<PathBuf, Vec<u8>> {
        let _ = std::fs::remove_dir_all(&out);
        for args in &commands {
            // verify reports through its exit code; only its outputs matter here
            let status = Command::new(BIN)
                .arg("--config")
                .arg(&config)
                .args(args)
                .output()
                .expect("toolrank runs");
            assert!(
                status.status.success() || args[0] == "verify",
                "{args:?}: {}",
                String::from_utf8_lossy(&status.stderr)
            );
        }
        snapshot(&out)
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|p| first.get(*p) != second.get(*p))
        .map(|p| p.display().to_string())
        .collect();
    outcome(
        // 3 data files, 3 checkpoints, 6 logs, 3 reports and the manifest
        differing.is_empty() && first.len() == 16,
        format!(
            "{} subcommands, {} artifacts compared{}",
            commands.len(),
            first.len(),
            if differing.is_empty() { String::new() } else { format!(", differing: {differing:?}") }
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    let mut all_passed = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all_passed &= o.passed;
        println!("criterion {n} {name}: {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "reward table", guarded(reward_table));
    report(2, "group-relative estimator unbiasedness", guarded(unbiasedness));
    report(3, "gradient correctness", guarded(gradients));
    report(4, "logistic bound", guarded(logistic_bound));
    report(5, "hard-negative set", guarded(hard_negatives));
    match desk_run() {
        Ok(run) => {
            report(6, "stage-1 learnability", guarded(|| learnability(&run)));
            report(7, "stage-2 preference refinement", guarded(|| ppr_effect(&run)));
            report(8, "tool-use dynamics", guarded(|| tool_use(&run)));
        }
        Err(e) => {
            for (n, name) in [(6, "stage-1 learnability"), (7, "stage-2 preference refinement"), (8, "tool-use dynamics")] {
                report(n, name, outcome(false, format!("pipeline failed: {e}")));
            }
        }
    }
    report(9, "determinism", guarded(determinism));
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use toolrank::collab::{self, CollabConfig, CollabModel};
use toolrank::corpus::{
    chronological_split, generate_synthetic, ingest_interactions, train_visible, write_catalog,
    write_interactions, Catalog, DatasetSplit, InteractionStream, SplitConfig, SplitTag, SyntheticConfig,
};
use toolrank::grpo::{measure_rollouts, train_stage1, BatchStats};
use toolrank::metrics::{evaluate, EvalReport};
use toolrank::policy::PolicyParams;
use toolrank::ppr::{mine_pairs, train_stage2, violation_rate, PprEpoch};
use toolrank::rng;
use toolrank::verify::{
    check_logistic_bound, check_unbiasedness, finite_difference_suite, sample_params, FdConfig, FdReport, Grid,
    LogisticBoundReport, TinyEnv, UnbiasednessReport,
};
use toolrank::Environment;

use crate::config::{RunConfig, Source};
use crate::manifest;

pub const CATALOG: &str = "data/catalog.jsonl";
pub const INTERACTIONS: &str = "data/interactions.jsonl";
pub const SPLIT: &str = "data/split.json";
pub const COLLAB: &str = "models/collab.json";
pub const STAGE1: &str = "models/stage1.json";
pub const STAGE2: &str = "models/stage2.json";

/// One subcommand invocation: where it writes and what it wrote.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        Self {
            dir: cfg.output_dir.clone(),
            cfg,
            outputs: Vec::new(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Path of an upstream artifact, or an error naming the subcommand that
    /// produces it.
    fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            bail!("{} not found; run `toolrank {producer}` with this config first", p.display());
        }
        Ok(p)
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        }
        self.outputs.push(rel.to_owned());
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("cannot create {}", p.display()))?))
    }

    fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut w = self.create(rel)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn finish(&self, command: &str) -> Result<()> {
        manifest::record(&self.dir, command, &self.cfg, &self.outputs)
    }
}

fn load_data(run: &Run) -> Result<(Catalog, InteractionStream, DatasetSplit)> {
    let cat = run.require(CATALOG, "gen-data")?;
    let inter = run.require(INTERACTIONS, "gen-data")?;
    let split_path = run.require(SPLIT, "gen-data")?;
    let (catalog, stream) = ingest_interactions(&cat, &inter)?;
    let split: DatasetSplit = serde_json::from_reader(BufReader::new(File::open(&split_path)?))
        .with_context(|| format!("corrupt {}", split_path.display()))?;
    Ok((catalog, stream, split))
}

fn environment(run: &Run) -> Result<(Environment, DatasetSplit)> {
    let (catalog, stream, split) = load_data(run)?;
    let visible = train_visible(&stream, &split);
    let collab = if run.cfg.collab.enabled {
        let p = run.require(COLLAB, "fit-collab")?;
        Some(CollabModel::load(BufReader::new(File::open(p)?))?)
    } else {
        None
    };
    Ok((Environment::new(catalog, stream, visible, collab), split))
}

fn load_params(path: &Path) -> Result<PolicyParams> {
    let f = File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    PolicyParams::load(BufReader::new(f)).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

pub fn gen_data(run: &mut Run) -> Result<()> {
    let (catalog, stream) = match run.cfg.data.source {
        Source::Synthetic => {
            let d = generate_synthetic(&run.cfg.data.synthetic, run.cfg.data_seed())?;
            (d.catalog, d.stream)
        }
        Source::Files => {
            let (c, i) = (run.cfg.data.catalog.clone(), run.cfg.data.interactions.clone());
            ingest_interactions(c.expect("checked"), i.expect("checked"))?
        }
    };
    let split = chronological_split(&catalog, &stream, &run.cfg.split_config())?;
    let mut w = run.create(CATALOG)?;
    write_catalog(&mut w, &catalog)?;
    w.flush()?;
    let mut w = run.create(INTERACTIONS)?;
    write_interactions(&mut w, &stream)?;
    w.flush()?;
    let mut w = run.create(SPLIT)?;
    serde_json::to_writer(&mut w, &split)?;
    w.write_all(b"\n")?;
    w.flush()?;
    println!(
        "gen-data: {} items, {} interactions, {}/{}/{} requests",
        catalog.len(),
        stream.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    run.finish("gen-data")
}

pub fn fit_collab(run: &mut Run) -> Result<()> {
    let cc = run
        .cfg
        .collab_config()
        .ok_or_else(|| anyhow!("collab.enabled is false in this config"))?;
    let (catalog, stream, split) = load_data(run)?;
    let visible = train_visible(&stream, &split);
    let model = collab::fit(&catalog, &visible, &cc, split.split_seed)?;
    let mut w = run.create(COLLAB)?;
    model.save(&mut w)?;
    w.flush()?;
    println!("fit-collab: {} items, {} users, dim {}", catalog.len(), visible.user_count(), cc.dim);
    run.finish("fit-collab")
}

#[derive(Serialize)]
struct Stage1Summary {
    rollouts_before: BatchStats,
    rollouts_after: BatchStats,
    val: EvalReport,
}

#[derive(Serialize)]
struct Stage2Summary {
    epochs: Vec<PprEpoch>,
    /// Pairs mined from the validation split with the stage-1 policy.
    held_out_pairs: usize,
    held_out_violation_before: f64,
    held_out_violation_after: f64,
    val_before: EvalReport,
    val_after: EvalReport,
}

fn stage1(run: &mut Run, env: &Environment, split: &DatasetSplit) -> Result<()> {
    let tc = run.cfg.train_config();
    let ec = run.cfg.eval_config();
    let zero = PolicyParams::zeros();
    let before = measure_rollouts(&zero, env, &split.train, &tc, tc.seed);
    let mut hook = |p: &PolicyParams| evaluate(p, env, &split.val, &ec);
    let (params, history) = train_stage1(&zero, env, &split.train, &tc, Some(&mut hook))?;
    let after = measure_rollouts(&params, env, &split.train, &tc, tc.seed);
    let mut w = run.create(STAGE1)?;
    params.save(&mut w)?;
    w.flush()?;
    let mut w = run.create("logs/stage1_steps.csv")?;
    history.write_csv(&mut w)?;
    w.flush()?;
    let mut w = run.create("logs/stage1_eval.csv")?;
    history.write_eval_csv(&mut w)?;
    w.flush()?;
    let val = history.evals.last().map(|e| e.report.clone()).expect("final eval");
    println!(
        "train stage 1: {} updates, val H@1 {:.4} N@10 {:.4}",
        history.steps.len(),
        val.hit(1),
        val.ndcg(10)
    );
    run.write_json(
        "logs/stage1_summary.json",
        &Stage1Summary {
            rollouts_before: before,
            rollouts_after: after,
            val,
        },
    )
}

fn stage2(run: &mut Run, env: &Environment, split: &DatasetSplit) -> Result<()> {
    let start = load_params(&run.require(STAGE1, "train --stage 1")?)?;
    let pc = run.cfg.ppr_config();
    let ec = run.cfg.eval_config();
    let held = mine_pairs(&start, env, &split.val, pc.k, pc.t_max, &[pc.seed, u64::MAX]);
    let val_before = evaluate(&start, env, &split.val, &ec);
    let (params, history) = train_stage2(&start, env, &split.train, &pc)?;
    let summary = Stage2Summary {
        epochs: history.epochs.clone(),
        held_out_pairs: held.len(),
        held_out_violation_before: violation_rate(&start, &held),
        held_out_violation_after: violation_rate(&params, &held),
        val_before,
        val_after: evaluate(&params, env, &split.val, &ec),
    };
    let mut w = run.create(STAGE2)?;
    params.save(&mut w)?;
    w.flush()?;
    let mut w = run.create("logs/stage2_steps.csv")?;
    history.write_csv(&mut w)?;
    w.flush()?;
    let mut w = run.create("logs/stage2_pairs.jsonl")?;
    history.write_pairs(&mut w)?;
    w.flush()?;
    println!(
        "train stage 2: {} pairs, held-out violation {:.4} -> {:.4}, val H@1 {:.4} -> {:.4}",
        history.pairs.len(),
        summary.held_out_violation_before,
        summary.held_out_violation_after,
        summary.val_before.hit(1),
        summary.val_after.hit(1)
    );
    run.write_json("logs/stage2_summary.json", &summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

pub fn train(run: &mut Run, stage: Stage) -> Result<()> {
    let (env, split) = environment(run)?;
    if matches!(stage, Stage::One | Stage::Both) {
        stage1(run, &env, &split)?;
    }
    if matches!(stage, Stage::Two | Stage::Both) {
        stage2(run, &env, &split)?;
    }
    let name = match stage {
        Stage::One => "train-1",
        Stage::Two => "train-2",
        Stage::Both => "train-both",
    };
    run.finish(name)
}

pub fn eval(run: &mut Run, checkpoint: &Path, split_tag: SplitTag) -> Result<()> {
    let params = load_params(checkpoint)?;
    let (env, split) = environment(run)?;
    let report = evaluate(&params, &env, split.part(split_tag), &run.cfg.eval_config());
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let rel = format!("reports/eval_{stem}_{}.json", split_tag.as_str());
    run.write_json(&rel, &report)?;
    // A closed pipe (`| head`) is not an error for a report printout.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&report)?);
    run.finish(&format!("eval-{stem}-{}", split_tag.as_str()))
}

#[derive(Serialize)]
pub struct VerifyReport {
    pub unbiasedness: Vec<UnbiasednessReport>,
    pub logistic_bound: LogisticBoundReport,
    pub finite_differences: FdReport,
    pub passed: bool,
}

/// A small world for the finite-difference trajectories.
fn fd_environment(seed: u64) -> Result<(Environment, DatasetSplit)> {
    let data = generate_synthetic(
        &SyntheticConfig {
            n_items: 80,
            n_users: 60,
            n_categories: 5,
            ..Default::default()
        },
        seed,
    )?;
    Ok(Environment::build(
        data.catalog,
        data.stream,
        &SplitConfig {
            seed,
            ..Default::default()
        },
        Some(&CollabConfig {
            dim: 8,
            iterations: 5,
            ..Default::default()
        }),
    )?)
}

/// Runs every check; `Ok(false)` when one of them fails.
pub fn verify(run: &mut Run) -> Result<bool> {
    let v = run.cfg.verify.clone();
    let seed = run.cfg.verify_seed();
    let tiny = TinyEnv::new(v.tiny_candidates, v.tiny_k)?;
    let mut unbiasedness = Vec::new();
    for r in 0..v.repeats as u64 {
        let params = sample_params(&mut rng::stream(&[seed, r, 0]), v.param_scale);
        let rep = check_unbiasedness(&tiny, &params, v.group_size, v.samples, rng::derive_seed(&[seed, r, 1]))?;
        println!(
            "verify: unbiasedness #{r}: cosine {:.5}, max |z| {:.2} (vs (1-1/G)-scaled gradient {:.2}), baseline {:.3e} <= 4 x {:.3e}: {}",
            rep.cosine,
            rep.max_abs_z,
            rep.max_abs_z_scaled,
            rep.baseline_norm,
            rep.baseline_se,
            if rep.passed() { "ok" } else { "FAILED" }
        );
        unbiasedness.push(rep);
    }
    let logistic_bound = check_logistic_bound(&Grid {
        lo: v.grid[0],
        hi: v.grid[1],
        step: v.grid[2],
    });
    println!(
        "verify: logistic bound over {} points: {} violations, {} negative second differences, route gap {:.2e}: {}",
        logistic_bound.points,
        logistic_bound.bound_violations,
        logistic_bound.negative_second_differences,
        logistic_bound.max_route_gap,
        if logistic_bound.passed() { "ok" } else { "FAILED" }
    );
    let (env, split) = fd_environment(seed)?;
    let finite_differences = finite_difference_suite(
        &env,
        &split.train,
        &FdConfig {
            cases: v.fd_cases,
            step: v.fd_step,
            param_scale: v.param_scale,
            seed,
        },
    )?;
    println!(
        "verify: finite differences over {} cases: max relative error {:.2e}: {}",
        finite_differences.cases,
        finite_differences.max_rel_err(),
        if finite_differences.passed(v.fd_tolerance) { "ok" } else { "FAILED" }
    );
    let passed = unbiasedness.iter().all(|r| r.passed())
        && logistic_bound.passed()
        && finite_differences.passed(v.fd_tolerance);
    run.write_json(
        "reports/verify.json",
        &VerifyReport {
            unbiasedness,
            logistic_bound,
            finite_differences,
            passed,
        },
    )?;
    run.finish("verify")?;
    Ok(passed)
}

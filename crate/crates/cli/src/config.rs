use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toolrank::collab::CollabConfig;
use toolrank::corpus::{SplitConfig, SyntheticConfig};
use toolrank::grpo::TrainConfig;
use toolrank::metrics::EvalConfig;
use toolrank::ppr::PprConfig;
use toolrank::rng::derive_seed;

pub const ENV_OUTPUT_DIR: &str = "TOOLRANK_OUTPUT_DIR";
pub const ENV_CATALOG: &str = "TOOLRANK_CATALOG";
pub const ENV_INTERACTIONS: &str = "TOOLRANK_INTERACTIONS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Source,
    pub catalog: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            catalog: None,
            interactions: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub n_candidates: usize,
    pub history_cap: usize,
    pub min_history: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitConfig::default();
        Self {
            ratios: d.ratios,
            n_candidates: d.shape.n_candidates,
            history_cap: d.shape.history_cap,
            min_history: d.min_history,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollabSection {
    pub enabled: bool,
    pub dim: usize,
    pub iterations: usize,
    pub ridge: f64,
    pub ppmi_shift: f64,
}

impl Default for CollabSection {
    fn default() -> Self {
        let d = CollabConfig::default();
        Self {
            enabled: true,
            dim: d.dim,
            iterations: d.iterations,
            ridge: d.ridge,
            ppmi_shift: d.ppmi_shift,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub group_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub eval_every: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            group_size: d.group_size,
            batch_size: d.batch_size,
            lr: d.lr,
            epochs: d.epochs,
            eval_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub group_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let d = PprConfig::default();
        Self {
            group_size: d.group_size,
            batch_size: d.batch_size,
            lr: d.lr,
            epochs: d.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub tiny_candidates: usize,
    pub tiny_k: usize,
    pub group_size: usize,
    pub samples: usize,
    pub repeats: usize,
    pub param_scale: f64,
    pub fd_cases: usize,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    pub grid: [f64; 3],
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            tiny_candidates: 3,
            tiny_k: 2,
            group_size: 8,
            samples: 100_000,
            repeats: 3,
            param_scale: 0.5,
            fd_cases: 50,
            fd_step: 1e-5,
            fd_tolerance: 1e-5,
            grid: [-10.0, 10.0, 0.01],
        }
    }
}

/// Everything one pipeline run needs. Every random choice derives from
/// `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub collab: CollabSection,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub verify: VerifySection,
}

fn default_k() -> usize {
    10
}

fn default_t_max() -> usize {
    10
}

/// Sub-seed tags.
const DATA: u64 = 1;
const SPLIT: u64 = 2;
const STAGE1: u64 = 3;
const STAGE2: u64 = 4;
const EVAL: u64 = 5;
const VERIFY: u64 = 6;

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).with_context(|| format!("invalid config {}", origin.display()))
    }

    /// Reads `path` and applies path overrides from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text, path)?;
        cfg.apply_env(|k| std::env::var_os(k).map(PathBuf::from));
        cfg.resolve_relative(path.parent().unwrap_or(Path::new(".")));
        cfg.check()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<PathBuf>) {
        if let Some(p) = var(ENV_OUTPUT_DIR) {
            self.output_dir = p;
        }
        if let Some(p) = var(ENV_CATALOG) {
            self.data.catalog = Some(p);
        }
        if let Some(p) = var(ENV_INTERACTIONS) {
            self.data.interactions = Some(p);
        }
    }

    /// Relative paths are taken relative to the config file.
    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.data.catalog.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.interactions.as_mut() {
            fix(p);
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.data.source == Source::Files && (self.data.catalog.is_none() || self.data.interactions.is_none()) {
            bail!("data.source = \"files\" needs data.catalog and data.interactions (or {ENV_CATALOG} / {ENV_INTERACTIONS})");
        }
        if self.k == 0 || self.k > self.split.n_candidates {
            bail!("k must be in 1..={}, got {}", self.split.n_candidates, self.k);
        }
        Ok(())
    }

    fn sub_seed(&self, tag: u64) -> u64 {
        derive_seed(&[self.seed, tag])
    }

    pub fn data_seed(&self) -> u64 {
        self.sub_seed(DATA)
    }

    pub fn verify_seed(&self) -> u64 {
        self.sub_seed(VERIFY)
    }

    pub fn split_config(&self) -> SplitConfig {
        let mut c = SplitConfig {
            ratios: self.split.ratios,
            min_history: self.split.min_history,
            seed: self.sub_seed(SPLIT),
            ..Default::default()
        };
        c.shape.n_candidates = self.split.n_candidates;
        c.shape.history_cap = self.split.history_cap;
        c
    }

    pub fn collab_config(&self) -> Option<CollabConfig> {
        self.collab.enabled.then_some(CollabConfig {
            dim: self.collab.dim,
            iterations: self.collab.iterations,
            ridge: self.collab.ridge,
            ppmi_shift: self.collab.ppmi_shift,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            group_size: self.stage1.group_size,
            batch_size: self.stage1.batch_size,
            lr: self.stage1.lr,
            epochs: self.stage1.epochs,
            k: self.k,
            t_max: self.t_max,
            seed: self.sub_seed(STAGE1),
            eval_every: self.stage1.eval_every,
        }
    }

    pub fn ppr_config(&self) -> PprConfig {
        PprConfig {
            group_size: self.stage2.group_size,
            batch_size: self.stage2.batch_size,
            lr: self.stage2.lr,
            epochs: self.stage2.epochs,
            k: self.k,
            t_max: self.t_max,
            seed: self.sub_seed(STAGE2),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: self.eval.ks.clone(),
            k: self.k,
            t_max: self.t_max,
            seed: self.sub_seed(EVAL),
            ..Default::default()
        }
    }
}

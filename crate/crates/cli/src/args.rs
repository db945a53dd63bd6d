use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mil_core::bilevel::{LossKind, MaskCache, CACHE_DIR_ENV};
use mil_core::experiment::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "mil", version = env!("MIL_BUILD_ID"), about = "Masked imitation learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test demonstrations and normalization stats per seed.
    GenData(GenDataArgs),
    /// Run coordinate descent over the modality mask for every seed.
    RunMil(RunMilArgs),
    /// Run the full baseline comparison suite.
    RunBaselines(RunArgs),
    /// Rank every mask by validation loss.
    BruteForce(BruteForceArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Render SVG figures from a metrics CSV.
    Plot(PlotArgs),
}

/// Experiment settings. Flags override the config file, which overrides
/// built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Environment: shifted-goal-reach, distractor-regression or corridor-two-stage [default: shifted-goal-reach]
    #[arg(long)]
    pub env: Option<String>,
    /// Comma-separated seeds [default: 0,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Training trajectories per seed [default: 100]
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Validation trajectories per seed [default: 10]
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Test trajectories per seed [default: 50]
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Outer loss: action, state, aug or online [default: per environment]
    #[arg(long)]
    pub loss_kind: Option<LossKind>,
    /// Visiting order of modalities, by name [default: schema order]
    #[arg(long, value_delimiter = ',')]
    pub modality_order: Option<Vec<String>>,
    /// Outer convergence threshold on the loss change between sweeps [default: 1e-4]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Sweep cap [default: 8]
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    /// Inner epoch cap [default: 2000]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Inner Adam learning rate [default: 1e-3]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Success temperature of the augmented loss [default: 0.2]
    #[arg(long)]
    pub t1: Option<f64>,
    /// Failure temperature of the augmented loss [default: 1]
    #[arg(long)]
    pub t2: Option<f64>,
    /// Comma-separated noise scales for augmentation [default: 0.005,0.01,0.05]
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Augmented trajectories per alpha per validation trajectory [default: 2]
    #[arg(long)]
    pub aug_count_per_alpha: Option<usize>,
    /// Masks averaged by MaskAverage [default: 5]
    #[arg(long)]
    pub k_masks: Option<usize>,
    /// MaskDropout drop probability [default: 0.5]
    #[arg(long)]
    pub p_drop: Option<f64>,
    /// Test episodes for online metrics [default: 50]
    #[arg(long)]
    pub test_episodes: Option<usize>,
    /// Baselines also train on validation data
    #[arg(long)]
    pub train_on_all: bool,
    /// Retrain every mask instead of reusing cached branches
    #[arg(long)]
    pub disable_cache: bool,
    /// Add MIL with the online outer loss to the baseline suite
    #[arg(long)]
    pub online_eval: bool,
    /// Record wall-clock times (otherwise written as 0)
    #[arg(long)]
    pub timing: bool,
    /// Persistent branch cache directory
    #[arg(long, env = CACHE_DIR_ENV)]
    pub cache_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident).+ <- $flag:ident) => {
                if let Some(v) = &self.$flag {
                    c.$($field).+ = v.clone();
                }
            };
        }
        set!(env <- env);
        set!(seeds <- seeds);
        set!(n_train <- n_train);
        set!(n_val <- n_val);
        set!(n_test <- n_test);
        set!(outer.epsilon <- epsilon);
        set!(outer.max_sweeps <- max_sweeps);
        set!(train.max_epochs <- max_epochs);
        set!(train.learning_rate <- learning_rate);
        set!(t1 <- t1);
        set!(t2 <- t2);
        set!(alphas <- alphas);
        set!(aug_count_per_alpha <- aug_count_per_alpha);
        set!(k_masks <- k_masks);
        set!(p_drop <- p_drop);
        set!(test_episodes <- test_episodes);
        if let Some(kind) = self.loss_kind {
            c.loss_kind = Some(kind);
        }
        if self.modality_order.is_some() {
            c.modality_order = self.modality_order.clone();
        }
        c.train_on_all |= self.train_on_all;
        c.disable_cache |= self.disable_cache;
        c.online_eval |= self.online_eval;
        c.timing |= self.timing;
        c.validate()?;
        Ok(c)
    }

    pub fn cache(&self, config: &ExperimentConfig) -> Result<MaskCache> {
        Ok(match (&self.cache_dir, config.disable_cache) {
            (_, true) => MaskCache::disabled(),
            (Some(dir), false) => MaskCache::with_dir(dir)?,
            (None, false) => MaskCache::new(),
        })
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; one subdirectory per seed
    #[arg(long, short, default_value = "data")]
    pub out: PathBuf,
    /// Also write noise-augmented validation trajectories
    #[arg(long)]
    pub aug: bool,
    /// Overwrite existing files
    #[arg(long)]
    pub force: bool,
}

/// Settings shared by commands that train policies.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by gen-data; generated in memory when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory
    #[arg(long, short, default_value = "out")]
    pub out: PathBuf,
    /// Seeds run concurrently
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct RunMilArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Replace training with a fixed loss table, e.g. "11=1.0,01=0.2,10=0.5,00=0.9"
    #[arg(long)]
    pub stub_losses: Option<String>,
}

#[derive(Debug, Args)]
pub struct BruteForceArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also rank the all-zeros mask
    #[arg(long)]
    pub include_empty: bool,
    /// Mask reports from run-mil to compare against the ranking
    #[arg(long = "mil-report")]
    pub mil_reports: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = mil_core::gradcheck::DEFAULT_CASES)]
    pub cases: usize,
    #[arg(long, default_value_t = mil_core::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = mil_core::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Write the full report as JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Negative control: corrupt one analytic entry per case
    #[arg(long, hide = true)]
    pub corrupt_analytic: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metrics CSV written by run-mil, run-baselines or brute-force
    pub metrics: PathBuf,
    /// Output directory for SVG files
    #[arg(long, short, default_value = "plots")]
    pub out: PathBuf,
}

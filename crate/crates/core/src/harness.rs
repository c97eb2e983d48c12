//! Run configuration, presets and experiment orchestration.
//!
//! Configuration precedence: command-line flag > config-file key > preset >
//! built-in default. Config files are TOML with the same kebab-case keys as
//! the command-line flags.
//!
//! A run writes to its output directory:
//! - `config.resolved`: the fully resolved configuration (TOML),
//! - `metrics.csv`: one [`MetricsRecord`] per row,
//! - `params.json`: the final parameters,
//! - `summary.json`: held-out test scores.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{self, Dataset, EpisodeSource, EpisodeSpec, TaskFamily};
use crate::error::{Error, Result};
use crate::fairness::{DistanceKind, FairnessConfig, PenaltyShape};
use crate::meta::{self, EvalSummary, LearnerKind, MetaConfig, OuterOptimizer, Trainer};
use crate::metrics::{self, MetricsRecord, Split};
use crate::nn::{MlpSpec, ParameterSet};

pub const PRESETS: [&str; 3] = ["omniglot-5way", "omniglot-20way", "miniimagenet-5way"];

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub learner: LearnerKind,
    pub meta: MetaConfig,
    pub fairness: FairnessConfig,
    pub episode: EpisodeSpec,
    pub hidden_dims: Vec<usize>,
    /// Output width of the embedding network for prototype and matching
    /// learners. Fair MAML always outputs `ways` logits.
    pub embedding_dim: usize,
    pub data: DataConfig,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub test_episodes: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset file; when absent a synthetic family is generated.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub feature_dim: usize,
    pub bias_strength: f64,
    /// Classes reserved for validation and test episodes. Defaults to
    /// `max(ways, 30% of classes)`.
    pub holdout_classes: Option<usize>,
    /// Seed for the synthetic family and the class split; defaults to the
    /// run seed.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            learner: LearnerKind::FairMaml,
            meta: MetaConfig::default(),
            fairness: FairnessConfig::default(),
            episode: EpisodeSpec {
                ways: 2,
                shots: 5,
                query_shots: 15,
            },
            hidden_dims: vec![64, 64],
            embedding_dim: 16,
            data: DataConfig {
                path: None,
                classes: 10,
                feature_dim: 8,
                bias_strength: 0.8,
                holdout_classes: None,
                seed: None,
            },
            eval_every: 50,
            eval_episodes: 100,
            test_episodes: 200,
            seed: 0,
            deterministic: false,
            out: PathBuf::from("runs/latest"),
        }
    }
}

/// Values a preset fixes. `meta_batch_one_shot` applies when `shots == 1`.
struct Preset {
    ways: usize,
    inner_lr: f64,
    inner_steps: usize,
    eval_inner_steps: usize,
    meta_batch: usize,
    meta_batch_one_shot: usize,
    classes: usize,
}

fn preset(name: &str) -> Result<Preset> {
    match name {
        "omniglot-5way" => Ok(Preset {
            ways: 5,
            inner_lr: 0.4,
            inner_steps: 1,
            eval_inner_steps: 3,
            meta_batch: 32,
            meta_batch_one_shot: 32,
            classes: 50,
        }),
        "omniglot-20way" => Ok(Preset {
            ways: 20,
            inner_lr: 0.1,
            inner_steps: 5,
            eval_inner_steps: 5,
            meta_batch: 16,
            meta_batch_one_shot: 16,
            classes: 100,
        }),
        "miniimagenet-5way" => Ok(Preset {
            ways: 5,
            inner_lr: 0.01,
            inner_steps: 5,
            eval_inner_steps: 10,
            meta_batch: 2,
            meta_batch_one_shot: 4,
            classes: 50,
        }),
        other => Err(Error::config("preset", format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")))),
    }
}

/// Optional settings, shared by the command line and config files.
#[derive(Args, Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Overrides {
    /// Named hyperparameter preset.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_parser = parse_learner)]
    pub learner: Option<LearnerKind>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub query_shots: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub inner_lr: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub outer_lr: Option<f64>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub eval_inner_steps: Option<usize>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Fairness multiplier (>= 0).
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    /// Constraint relaxation c (>= 0).
    #[arg(long, allow_hyphen_values = true)]
    pub relaxation: Option<f64>,
    #[arg(long, value_parser = parse_penalty)]
    pub penalty: Option<PenaltyShape>,
    #[arg(long, value_parser = parse_distance)]
    pub distance: Option<DistanceKind>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub first_order: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub meta_fairness: Option<bool>,
    /// Outer optimizer: adam or sgd.
    #[arg(long, value_parser = parse_outer)]
    pub outer_optimizer: Option<OuterOptimizer>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded execution; timing columns are written as 0.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    /// Dataset file (otherwise a synthetic family is generated).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub bias_strength: Option<f64>,
    #[arg(long)]
    pub holdout_classes: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub test_episodes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_learner(s: &str) -> std::result::Result<LearnerKind, String> {
    match s {
        "maml" | "fair-maml" => Ok(LearnerKind::FairMaml),
        "protonet" | "fair-protonet" => Ok(LearnerKind::FairProtonet),
        "matching" | "fair-matching" => Ok(LearnerKind::FairMatching),
        _ => Err(format!("unknown learner `{s}` (maml|protonet|matching)")),
    }
}

fn parse_penalty(s: &str) -> std::result::Result<PenaltyShape, String> {
    match s {
        "hinge" => Ok(PenaltyShape::Hinge),
        "raw" => Ok(PenaltyShape::Raw),
        _ => Err(format!("unknown penalty `{s}` (hinge|raw)")),
    }
}

fn parse_distance(s: &str) -> std::result::Result<DistanceKind, String> {
    match s {
        "max-prob" => Ok(DistanceKind::MaxProb),
        "signed-margin" => Ok(DistanceKind::SignedMargin),
        _ => Err(format!("unknown distance `{s}` (max-prob|signed-margin)")),
    }
}

fn parse_outer(s: &str) -> std::result::Result<OuterOptimizer, String> {
    match s {
        "adam" => Ok(OuterOptimizer::Adam),
        "sgd" => Ok(OuterOptimizer::Sgd),
        _ => Err(format!("unknown optimizer `{s}` (adam|sgd)")),
    }
}

impl Overrides {
    /// Reads a TOML config file; unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config file")
                .to_string();
            Error::config(key, e.message().trim().to_string())
        })
    }

    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$($target)+ = v;
                }
            };
        }
        set!(learner => learner);
        set!(ways => episode.ways);
        set!(shots => episode.shots);
        set!(query_shots => episode.query_shots);
        set!(inner_lr => meta.inner_lr);
        set!(outer_lr => meta.outer_lr);
        set!(inner_steps => meta.inner_steps);
        set!(eval_inner_steps => meta.eval_inner_steps);
        set!(meta_batch => meta.meta_batch);
        set!(iterations => meta.iterations);
        set!(first_order => meta.first_order);
        set!(meta_fairness => meta.meta_fairness);
        set!(outer_optimizer => meta.outer_optimizer);
        set!(lambda => fairness.lambda);
        set!(relaxation => fairness.relaxation);
        set!(penalty => fairness.penalty);
        set!(distance => fairness.distance);
        set!(seed => seed);
        set!(deterministic => deterministic);
        set!(classes => data.classes);
        set!(feature_dim => data.feature_dim);
        set!(bias_strength => data.bias_strength);
        set!(hidden => hidden_dims);
        set!(embedding_dim => embedding_dim);
        set!(eval_every => eval_every);
        set!(eval_episodes => eval_episodes);
        set!(test_episodes => test_episodes);
        set!(out => out);
        if let Some(p) = &self.data {
            cfg.data.path = Some(p.clone());
        }
        if let Some(h) = self.holdout_classes {
            cfg.data.holdout_classes = Some(h);
        }
        if let Some(s) = self.data_seed {
            cfg.data.seed = Some(s);
        }
    }
}

/// Resolves a configuration from command-line overrides and an optional
/// config file.
pub fn parse_config(cli: &Overrides, file: Option<&Overrides>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let preset_name = cli
        .preset
        .clone()
        .or_else(|| file.and_then(|f| f.preset.clone()));
    let mut preset_batch = None;
    if let Some(name) = &preset_name {
        let p = preset(name)?;
        cfg.preset = Some(name.clone());
        cfg.episode.ways = p.ways;
        cfg.meta.inner_lr = p.inner_lr;
        cfg.meta.inner_steps = p.inner_steps;
        cfg.meta.eval_inner_steps = p.eval_inner_steps;
        cfg.meta.iterations = 60_000;
        cfg.episode.query_shots = 15;
        cfg.episode.shots = 1;
        cfg.data.classes = p.classes;
        preset_batch = Some((p.meta_batch_one_shot, p.meta_batch));
    }
    if let Some(f) = file {
        f.apply(&mut cfg);
    }
    cli.apply(&mut cfg);
    // The preset's meta-batch depends on the final shot count unless set
    // explicitly.
    let batch_set = cli.meta_batch.is_some() || file.is_some_and(|f| f.meta_batch.is_some());
    if let (Some((one_shot, many_shot)), false) = (preset_batch, batch_set) {
        cfg.meta.meta_batch = if cfg.episode.shots == 1 { one_shot } else { many_shot };
    }
    if cfg.deterministic {
        cfg.meta.parallel = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.fairness.validate()?;
        self.episode.validate()?;
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden", "widths must be positive"));
        }
        if self.embedding_dim < 2 {
            return Err(Error::config("embedding-dim", "must be at least 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval-every", "must be at least 1"));
        }
        if self.eval_episodes == 0 || self.test_episodes == 0 {
            return Err(Error::config("eval-episodes", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.data.bias_strength) {
            return Err(Error::config("bias-strength", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn model_spec(&self, input_dim: usize) -> Result<MlpSpec> {
        let outputs = match self.learner {
            LearnerKind::FairMaml => self.episode.ways,
            _ => self.embedding_dim,
        };
        MlpSpec::new(input_dim, self.hidden_dims.clone(), outputs)
    }
}

/// Meta-train and held-out episode sources.
pub struct Sources {
    pub train: Box<dyn EpisodeSource>,
    pub heldout: Box<dyn EpisodeSource>,
    pub feature_dim: usize,
    pub heldout_classes: Vec<u32>,
}

/// Splits classes into meta-train and held-out groups.
pub fn build_sources(cfg: &RunConfig) -> Result<Sources> {
    enum Full {
        Family(TaskFamily),
        Data(Dataset),
    }
    let full = match &cfg.data.path {
        Some(path) => Full::Data(episodes::read_dataset(path)?),
        None => Full::Family(episodes::generate_synthetic_family(
            cfg.data.classes,
            cfg.data.feature_dim,
            cfg.data.bias_strength,
            cfg.data_seed(),
        )?),
    };
    let mut ids = match &full {
        Full::Family(f) => f.class_ids(),
        Full::Data(d) => d.class_ids(),
    };
    let ways = cfg.episode.ways;
    let holdout = cfg
        .data
        .holdout_classes
        .unwrap_or_else(|| ways.max((0.3 * ids.len() as f64).round() as usize));
    if holdout < ways || ids.len() < holdout + ways {
        return Err(Error::InsufficientData(format!(
            "{} classes cannot be split into {} held-out and at least {ways} training classes",
            ids.len(),
            holdout
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed() ^ 0x5eed_c1a5);
    ids.shuffle(&mut rng);
    let (held, train) = ids.split_at(holdout);
    let mut held = held.to_vec();
    held.sort_unstable();
    let sources = match full {
        Full::Family(f) => Sources {
            feature_dim: f.feature_dim,
            train: Box::new(f.restrict(train)),
            heldout: Box::new(f.restrict(&held)),
            heldout_classes: held,
        },
        Full::Data(d) => Sources {
            feature_dim: d.dim,
            train: Box::new(d.restrict(train)),
            heldout: Box::new(d.restrict(&held)),
            heldout_classes: held,
        },
    };
    Ok(sources)
}

const VAL_SEED_SALT: u64 = 0x76a1_0000_0000_0001;
const TEST_SEED_SALT: u64 = 0x7e57_0000_0000_0002;

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub learner: LearnerKind,
    pub iterations: usize,
    pub seed: u64,
    pub lambda: f64,
    pub test: EvalSummary,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub history: Vec<MetricsRecord>,
    pub params: ParameterSet,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))
}

/// Trains with periodic validation, scores held-out test episodes and
/// writes the run artifacts.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(format!("creating {}", cfg.out.display()), e))?;
    write_file(&cfg.out.join("config.resolved"), &cfg.to_toml()?)?;

    let mut meta = cfg.meta;
    if cfg.deterministic {
        meta.parallel = false;
    }
    let sources = build_sources(cfg)?;
    let model = cfg.model_spec(sources.feature_dim)?;
    let mut trainer = Trainer::new(cfg.learner, &model, meta, cfg.fairness, cfg.episode, cfg.seed)?;
    let val_episodes = meta::sample_episodes(
        sources.heldout.as_ref(),
        &cfg.episode,
        cfg.eval_episodes,
        cfg.seed ^ VAL_SEED_SALT,
    )?;

    let mut history = Vec::with_capacity(meta.iterations + meta.iterations / cfg.eval_every + 2);
    for i in 0..meta.iterations {
        history.push(trainer.step(sources.train.as_ref())?);
        if (i + 1) % cfg.eval_every == 0 || i + 1 == meta.iterations {
            let started = Instant::now();
            let (_, results) = meta::evaluate(cfg.learner, trainer.params(), &val_episodes, &meta, &cfg.fairness)?;
            let ms = started.elapsed().as_secs_f64() * 1e3;
            history.push(MetricsRecord::from_results(i, Split::Val, &results, ms));
        }
    }

    let params = trainer.into_params();
    let started = Instant::now();
    let test = evaluate_heldout(cfg, &meta, &params, sources.heldout.as_ref())?;
    history.push(MetricsRecord::from_results(
        meta.iterations,
        Split::Test,
        &test.1,
        started.elapsed().as_secs_f64() * 1e3,
    ));

    if cfg.deterministic {
        history = history.iter().map(MetricsRecord::without_timing).collect();
    }
    metrics::write_metrics_csv(&history, &cfg.out.join("metrics.csv"))?;
    write_file(&cfg.out.join("params.json"), &to_json(&params)?)?;
    let summary = RunSummary {
        learner: cfg.learner,
        iterations: meta.iterations,
        seed: cfg.seed,
        lambda: cfg.fairness.lambda,
        test: test.0,
    };
    write_file(&cfg.out.join("summary.json"), &to_json(&summary)?)?;
    Ok(RunOutcome {
        summary,
        history,
        params,
    })
}

fn evaluate_heldout(
    cfg: &RunConfig,
    meta: &MetaConfig,
    params: &ParameterSet,
    heldout: &dyn EpisodeSource,
) -> Result<(EvalSummary, Vec<meta::EvalResult>)> {
    let episodes = meta::sample_episodes(heldout, &cfg.episode, cfg.test_episodes, cfg.seed ^ TEST_SEED_SALT)?;
    meta::evaluate(cfg.learner, params, &episodes, meta, &cfg.fairness)
}

pub fn load_params(path: &Path) -> Result<ParameterSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Scores saved parameters on held-out test episodes; writes `eval.json`
/// into the output directory.
pub fn eval_saved(cfg: &RunConfig, params_path: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let params = load_params(params_path)?;
    let mut meta = cfg.meta;
    if cfg.deterministic {
        meta.parallel = false;
    }
    let sources = build_sources(cfg)?;
    let (summary, _) = evaluate_heldout(cfg, &meta, &params, sources.heldout.as_ref())?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(format!("creating {}", cfg.out.display()), e))?;
    write_file(&cfg.out.join("eval.json"), &to_json(&summary)?)?;
    Ok(summary)
}

/// Family parameters for `gen`.
#[derive(Args, Clone, Debug, PartialEq)]
pub struct GenParams {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.8)]
    pub bias_strength: f64,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Materializes a synthetic family into a dataset file.
pub fn gen_data(params: &GenParams, out: &Path) -> Result<Dataset> {
    let family = episodes::generate_synthetic_family(params.classes, params.feature_dim, params.bias_strength, params.seed)?;
    let data = family.materialize(params.per_class, params.seed.wrapping_add(1));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    episodes::write_dataset(&data, out)?;
    Ok(data)
}

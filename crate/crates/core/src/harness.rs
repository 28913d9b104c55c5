//! Experiment orchestration: per-seed task preparation, adaptation episodes
//! for a list of methods, the loss ablation, hyperparameter sweeps and
//! CSV/JSON reports.
//!
//! Each seed generates (or loads) its task and trains (or loads) its source
//! model once; every method then runs an isolated episode on the same
//! stream. Seeds run on separate threads and results are assembled in a
//! fixed order, so reports do not depend on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{run_episode, EpisodeResult, LossChoice, TTAConfig};
use crate::benchgen::{
    accuracy, gen_task, load_feature_csv, train_source, LabeledSet, ShiftSpec,
    SyntheticTaskSpec, TargetStream, TrainConfig,
};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{ArchSpec, Network, NormMode};

pub const REPORT_COLUMNS: &str = "method,seed,batches,online_accuracy,acc_mean,acc_std,ms_per_item";
pub const STD_CONVENTION: &str =
    "acc_std is the sample (n-1) standard deviation across seeds; absent for <2 seeds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskSource {
    /// Generated per seed; its `seed` field is replaced by the run seed.
    Synthetic(SyntheticTaskSpec),
    Csv {
        source: PathBuf,
        target: PathBuf,
        num_classes: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// A labelled adaptation setting run once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub label: String,
    pub loss: LossChoice,
    pub norm: NormMode,
}

impl Method {
    /// Resolves a method name. `none` is the frozen source model (running
    /// statistics, no update), `bn_adapt` re-estimates batch statistics
    /// without any parameter update, and every other name is a
    /// [`LossChoice`] adapted with batch statistics.
    pub fn parse(name: &str) -> Result<Self> {
        let (loss, norm) = match name {
            "none" => (LossChoice::None, NormMode::RunningStats),
            "bn_adapt" => (LossChoice::None, NormMode::BatchStats),
            other => (other.parse()?, NormMode::BatchStats),
        };
        Ok(Self {
            label: name.to_string(),
            loss,
            norm,
        })
    }
}

/// The weight grid of a sensitivity sweep: the Cartesian product of the
/// four value lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl SweepGrid {
    pub fn single(w: LossWeights) -> Self {
        Self {
            alpha: vec![w.alpha],
            beta: vec![w.beta],
            tau: vec![w.tau],
            epsilon: vec![w.epsilon],
        }
    }

    pub fn points(&self) -> Vec<LossWeights> {
        let mut out = Vec::new();
        for &alpha in &self.alpha {
            for &beta in &self.beta {
                for &tau in &self.tau {
                    for &epsilon in &self.epsilon {
                        out.push(LossWeights {
                            alpha,
                            beta,
                            tau,
                            epsilon,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Load this source model instead of training one per seed.
    pub checkpoint: Option<PathBuf>,
    pub tta: TTAConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub sweep: SweepGrid,
    pub out: PathBuf,
    pub format: ReportFormat,
    /// Record wall-clock time per item. Turning it off makes reports
    /// byte-reproducible apart from the timestamp.
    pub timing: bool,
}

impl ExperimentConfig {
    /// The pinned desk-scale acceptance setup.
    pub fn acceptance() -> Self {
        Self::from_file_config(FileConfig::default()).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("at least one method is required".into()));
        }
        self.tta.validate()?;
        if let TaskSource::Synthetic(spec) = &self.task {
            spec.validate()?;
        }
        let pts = self.sweep.points();
        if pts.is_empty() {
            return Err(Error::InvalidConfig("sweep grid is empty".into()));
        }
        for w in pts {
            w.validate()?;
        }
        Ok(())
    }

    /// SHA-256 over every field that can change results; output location,
    /// report format and the timing switch are excluded.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Semantic<'a> {
            task: &'a TaskSource,
            hidden: &'a [usize],
            train: &'a TrainConfig,
            checkpoint: &'a Option<PathBuf>,
            tta: &'a TTAConfig,
            methods: &'a [Method],
            seeds: &'a [u64],
            sweep: &'a SweepGrid,
        }
        let canonical = serde_json::to_string(&Semantic {
            task: &self.task,
            hidden: &self.hidden,
            train: &self.train,
            checkpoint: &self.checkpoint,
            tta: &self.tta,
            methods: &self.methods,
            seeds: &self.seeds,
            sweep: &self.sweep,
        })
        .expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: FileConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Self::from_file_config(file)
    }

    fn from_file_config(f: FileConfig) -> Result<Self> {
        let task = match f.task.as_str() {
            "synthetic" => TaskSource::Synthetic(SyntheticTaskSpec {
                num_classes: f.classes,
                feature_dim: f.feature_dim,
                samples_per_class_source: f.samples_per_class,
                target_stream_length: f.stream_length,
                class_separation: f.class_separation,
                shift: ShiftSpec {
                    rotation_angle: f.rotation,
                    mean_translation: f.translation,
                    scale_min: f.scale_min,
                    scale_max: f.scale_max,
                    noise_sigma: f.noise_sigma,
                },
                imbalance_exponent: f.imbalance,
                seed: 0,
            }),
            "csv" => {
                let (Some(source), Some(target)) = (f.source_csv, f.target_csv) else {
                    return Err(Error::InvalidConfig(
                        "task = \"csv\" needs source_csv and target_csv".into(),
                    ));
                };
                TaskSource::Csv {
                    source,
                    target,
                    num_classes: f.csv_classes,
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "task must be \"synthetic\" or \"csv\", got {other:?}"
                )))
            }
        };
        let weights = LossWeights {
            alpha: f.alpha,
            beta: f.beta,
            tau: f.tau,
            epsilon: f.epsilon,
        };
        let norm = match f.norm.as_str() {
            "batch_stats" => NormMode::BatchStats,
            "running_stats" => NormMode::RunningStats,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "norm must be batch_stats or running_stats, got {other:?}"
                )))
            }
        };
        let format = match f.format.as_str() {
            "csv" => ReportFormat::Csv,
            "json" => ReportFormat::Json,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "format must be csv or json, got {other:?}"
                )))
            }
        };
        let mut methods: Vec<Method> = f
            .methods
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<_>>()?;
        // explicit norm applies to adapting methods only
        for m in &mut methods {
            if m.loss != LossChoice::None {
                m.norm = norm;
            }
        }
        let cfg = Self {
            task,
            hidden: f.hidden,
            train: TrainConfig {
                epochs: f.train_epochs,
                lr: f.train_lr,
                momentum: f.train_momentum,
                batch_size: f.train_batch_size,
                seed: 0,
                val_fraction: f.val_fraction,
            },
            checkpoint: f.checkpoint,
            tta: TTAConfig {
                learning_rate: f.lr,
                momentum: f.momentum,
                batch_size: f.batch_size,
                loss: methods
                    .iter()
                    .map(|m| m.loss)
                    .find(|l| *l != LossChoice::None)
                    .unwrap_or(LossChoice::Lscd),
                weights,
                detach_pseudo_labels: f.detach_pseudo_labels,
                steps_per_batch: f.steps_per_batch,
                norm,
            },
            methods,
            seeds: f.seeds,
            sweep: SweepGrid {
                alpha: f.sweep_alpha.unwrap_or_else(|| vec![f.alpha]),
                beta: f.sweep_beta.unwrap_or_else(|| vec![f.beta]),
                tau: f.sweep_tau.unwrap_or_else(|| vec![f.tau]),
                epsilon: f.sweep_epsilon.unwrap_or_else(|| vec![f.epsilon]),
            },
            out: f.out,
            format,
            timing: f.timing,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn tta_for(&self, method: &Method) -> TTAConfig {
        TTAConfig {
            loss: method.loss,
            norm: method.norm,
            ..self.tta.clone()
        }
    }
}

/// Flat key-value config file. Every key is optional; defaults reproduce the
/// acceptance benchmark.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    task: String,
    classes: usize,
    feature_dim: usize,
    samples_per_class: usize,
    stream_length: usize,
    class_separation: f64,
    rotation: f64,
    translation: f64,
    scale_min: f64,
    scale_max: f64,
    noise_sigma: f64,
    imbalance: f64,
    source_csv: Option<PathBuf>,
    target_csv: Option<PathBuf>,
    csv_classes: Option<usize>,
    checkpoint: Option<PathBuf>,
    hidden: Vec<usize>,
    train_epochs: usize,
    train_lr: f64,
    train_momentum: f64,
    train_batch_size: usize,
    val_fraction: f64,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    steps_per_batch: usize,
    detach_pseudo_labels: bool,
    norm: String,
    alpha: f64,
    beta: f64,
    tau: f64,
    epsilon: f64,
    methods: Vec<String>,
    seeds: Vec<u64>,
    sweep_alpha: Option<Vec<f64>>,
    sweep_beta: Option<Vec<f64>>,
    sweep_tau: Option<Vec<f64>>,
    sweep_epsilon: Option<Vec<f64>>,
    out: PathBuf,
    format: String,
    timing: bool,
}

impl Default for FileConfig {
    fn default() -> Self {
        let spec = SyntheticTaskSpec::acceptance(0);
        let train = TrainConfig::default();
        let tta = TTAConfig::default();
        let w = LossWeights::default();
        Self {
            task: "synthetic".into(),
            classes: spec.num_classes,
            feature_dim: spec.feature_dim,
            samples_per_class: spec.samples_per_class_source,
            stream_length: spec.target_stream_length,
            class_separation: spec.class_separation,
            rotation: spec.shift.rotation_angle,
            translation: spec.shift.mean_translation,
            scale_min: spec.shift.scale_min,
            scale_max: spec.shift.scale_max,
            noise_sigma: spec.shift.noise_sigma,
            imbalance: spec.imbalance_exponent,
            source_csv: None,
            target_csv: None,
            csv_classes: None,
            checkpoint: None,
            hidden: vec![64, 64],
            train_epochs: train.epochs,
            train_lr: train.lr,
            train_momentum: train.momentum,
            train_batch_size: train.batch_size,
            val_fraction: train.val_fraction,
            lr: tta.learning_rate,
            momentum: tta.momentum,
            batch_size: tta.batch_size,
            steps_per_batch: tta.steps_per_batch,
            detach_pseudo_labels: tta.detach_pseudo_labels,
            norm: "batch_stats".into(),
            alpha: w.alpha,
            beta: w.beta,
            tau: w.tau,
            epsilon: w.epsilon,
            methods: vec!["none".into(), "lscd".into()],
            seeds: vec![0, 1, 2, 3, 4],
            sweep_alpha: None,
            sweep_beta: None,
            sweep_tau: None,
            sweep_epsilon: None,
            out: PathBuf::from("report.csv"),
            format: "csv".into(),
            timing: true,
        }
    }
}

/// Everything one seed needs: the labelled source set, the target stream and
/// the source model.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub source: LabeledSet,
    pub stream: TargetStream,
    pub network: Network,
    /// Held-out source accuracy (NaN for loaded checkpoints).
    pub source_accuracy: f64,
}

impl SeedContext {
    /// Accuracy of the unadapted source model on the whole target stream.
    pub fn frozen_target_accuracy(&self) -> Result<f64> {
        let logits = self.network.predict_logits(&self.stream.to_labeled().features)?;
        Ok(accuracy(&logits, self.stream.scoring_labels()))
    }
}

pub fn load_task(config: &ExperimentConfig, seed: u64) -> Result<(LabeledSet, TargetStream)> {
    match &config.task {
        TaskSource::Synthetic(spec) => gen_task(&SyntheticTaskSpec {
            seed,
            ..spec.clone()
        }),
        TaskSource::Csv {
            source,
            target,
            num_classes,
        } => {
            let mut s = load_feature_csv(source, *num_classes)?;
            let mut t = load_feature_csv(target, *num_classes)?;
            if s.dim() != t.dim() {
                return Err(Error::Shape(format!(
                    "source has {} features, target has {}",
                    s.dim(),
                    t.dim()
                )));
            }
            let c = s.num_classes.max(t.num_classes);
            s.num_classes = c;
            t.num_classes = c;
            Ok((s, TargetStream::from_labeled(t)))
        }
    }
}

pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let (source, stream) = load_task(config, seed)?;
    let arch = ArchSpec::new(source.dim(), config.hidden.clone(), source.num_classes);
    let (network, source_accuracy) = match &config.checkpoint {
        Some(path) => {
            let net = Network::load(path)?;
            if net.arch != arch {
                return Err(Error::Shape(format!(
                    "checkpoint architecture {:?} does not match task architecture {:?}",
                    net.arch, arch
                )));
            }
            (net, f64::NAN)
        }
        None => {
            let trained = train_source(
                &arch,
                &source,
                &TrainConfig {
                    seed,
                    ..config.train.clone()
                },
            )?;
            (trained.network, trained.val_accuracy)
        }
    };
    Ok(SeedContext {
        seed,
        source,
        stream,
        network,
        source_accuracy,
    })
}

/// One episode outcome reduced to what reports need.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub batches: usize,
    pub online_accuracy: f64,
    pub per_batch_accuracy: Vec<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub ms_per_item: Option<f64>,
}

impl RunSummary {
    fn from_episode(label: &str, seed: u64, ep: &EpisodeResult, timing: bool) -> Self {
        Self {
            label: label.to_string(),
            seed,
            batches: ep.records.len(),
            online_accuracy: ep.cumulative_accuracy,
            per_batch_accuracy: ep.records.iter().map(|r| r.accuracy).collect(),
            per_class_accuracy: ep.per_class_accuracy(),
            ms_per_item: if timing { ep.ms_per_item } else { None },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub source_accuracy: f64,
    pub frozen_target_accuracy: f64,
    pub runs: Vec<RunSummary>,
}

/// Per-seed results, in seed order; failed seeds carry their diagnostic.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub seeds: Vec<std::result::Result<SeedOutcome, (u64, String)>>,
}

impl GridOutcome {
    pub fn succeeded(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.seeds.iter().filter_map(|s| s.as_ref().ok())
    }

    pub fn failures(&self) -> Vec<(u64, String)> {
        self.seeds
            .iter()
            .filter_map(|s| s.as_ref().err().cloned())
            .collect()
    }
}

/// Runs every `(label, config)` variant on every seed.
pub fn run_variants(config: &ExperimentConfig, variants: &[(String, TTAConfig)]) -> Result<GridOutcome> {
    config.validate()?;
    let one_seed = |seed: u64| -> Result<SeedOutcome> {
        let ctx = prepare_seed(config, seed)?;
        let frozen_target_accuracy = ctx.frozen_target_accuracy()?;
        let mut runs = Vec::with_capacity(variants.len());
        for (label, tta) in variants {
            let ep = run_episode(&ctx.network, &ctx.stream, tta)?;
            runs.push(RunSummary::from_episode(label, seed, &ep, config.timing));
        }
        Ok(SeedOutcome {
            seed,
            source_accuracy: ctx.source_accuracy,
            frozen_target_accuracy,
            runs,
        })
    };
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| s.spawn(move || one_seed(seed).map_err(|e| (seed, e.to_string()))))
            .collect();
        handles
            .into_iter()
            .zip(&config.seeds)
            .map(|(h, &seed)| {
                h.join()
                    .unwrap_or_else(|_| Err((seed, "worker panicked".to_string())))
            })
            .collect()
    });
    Ok(GridOutcome { seeds: results })
}

/// One report row: a method on one seed, with the method's aggregate over
/// all successful seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub method: String,
    pub seed: u64,
    pub batches: usize,
    pub online_accuracy: f64,
    pub acc_mean: f64,
    pub acc_std: Option<f64>,
    pub ms_per_item: Option<f64>,
    #[serde(skip)]
    pub per_batch_accuracy: Vec<f64>,
    #[serde(skip)]
    pub per_class_accuracy: Vec<Option<f64>>,
}

/// Arithmetic mean and sample (n-1) standard deviation; the latter is absent
/// for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, Some((ss / (n - 1) as f64).sqrt()))
}

/// Flattens a grid outcome into records sorted by method label, then seed.
pub fn aggregate(outcome: &GridOutcome) -> Vec<MetricsRecord> {
    let mut runs: Vec<&RunSummary> = outcome.succeeded().flat_map(|s| &s.runs).collect();
    runs.sort_by(|a, b| a.label.cmp(&b.label).then(a.seed.cmp(&b.seed)));
    let mut out = Vec::with_capacity(runs.len());
    for group in runs.chunk_by(|a, b| a.label == b.label) {
        let accs: Vec<f64> = group.iter().map(|r| r.online_accuracy).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        for r in group {
            out.push(MetricsRecord {
                method: r.label.clone(),
                seed: r.seed,
                batches: r.batches,
                online_accuracy: r.online_accuracy,
                acc_mean,
                acc_std,
                ms_per_item: r.ms_per_item,
                per_batch_accuracy: r.per_batch_accuracy.clone(),
                per_class_accuracy: r.per_class_accuracy.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
    pub seeds: Vec<SeedOutcome>,
    pub failures: Vec<(u64, String)>,
}

impl ExperimentReport {
    fn from_outcome(config: &ExperimentConfig, outcome: GridOutcome) -> Self {
        let records = aggregate(&outcome);
        let failures = outcome.failures();
        Self {
            config_hash: config.config_hash(),
            records,
            seeds: outcome.succeeded().cloned().collect(),
            failures,
        }
    }

    /// Mean online accuracy of `method` over successful seeds.
    pub fn mean_accuracy(&self, method: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.method == method)
            .map(|r| r.acc_mean)
    }
}

/// Runs every configured method on every seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let variants: Vec<(String, TTAConfig)> = config
        .methods
        .iter()
        .map(|m| (m.label.clone(), config.tta_for(m)))
        .collect();
    let outcome = run_variants(config, &variants)?;
    Ok(ExperimentReport::from_outcome(config, outcome))
}

pub const ABLATION_ROWS: [(&str, LossChoice); 8] = [
    ("Baseline", LossChoice::None),
    ("A", LossChoice::WcseOnly),
    ("B", LossChoice::BcseOnly),
    ("C", LossChoice::LsdOnly),
    ("D", LossChoice::WcseBcse),
    ("E", LossChoice::WcseLsd),
    ("F", LossChoice::BcseLsd),
    ("G", LossChoice::Lscd),
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub components: (bool, bool, bool),
    /// `(seed, online accuracy)` per task instance.
    pub per_task: Vec<(u64, f64)>,
    pub average: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub experiment: ExperimentReport,
    pub rows: Vec<AblationRow>,
}

/// The eight-row loss ablation. The baseline is the frozen source model;
/// rows A-G adapt with the listed loss terms, omitted terms weighted zero.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationReport> {
    let variants: Vec<(String, TTAConfig)> = ABLATION_ROWS
        .iter()
        .map(|&(label, loss)| {
            let norm = if loss == LossChoice::None {
                NormMode::RunningStats
            } else {
                config.tta.norm
            };
            (label.to_string(), TTAConfig {
                loss,
                norm,
                ..config.tta.clone()
            })
        })
        .collect();
    let outcome = run_variants(config, &variants)?;
    let experiment = ExperimentReport::from_outcome(config, outcome);
    let rows = ABLATION_ROWS
        .iter()
        .map(|&(label, loss)| {
            let per_task: Vec<(u64, f64)> = experiment
                .records
                .iter()
                .filter(|r| r.method == label)
                .map(|r| (r.seed, r.online_accuracy))
                .collect();
            let accs: Vec<f64> = per_task.iter().map(|p| p.1).collect();
            AblationRow {
                label: label.to_string(),
                components: loss.components(),
                per_task,
                average: mean_std(&accs).0,
            }
        })
        .collect();
    Ok(AblationReport { experiment, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub weights: LossWeights,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub config_hash: String,
    pub points: Vec<SweepPoint>,
    pub failures: Vec<(u64, String)>,
}

/// Runs the composite objective at every grid point; the point with the
/// highest mean accuracy (first on ties) is flagged.
pub fn run_sensitivity(config: &ExperimentConfig) -> Result<SweepReport> {
    let grid = config.sweep.points();
    let variants: Vec<(String, TTAConfig)> = grid
        .iter()
        .enumerate()
        .map(|(i, w)| {
            (format!("{i:06}"), TTAConfig {
                loss: LossChoice::Lscd,
                weights: *w,
                ..config.tta.clone()
            })
        })
        .collect();
    let outcome = run_variants(config, &variants)?;
    let mut points: Vec<SweepPoint> = grid
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let label = format!("{i:06}");
            let per_seed: Vec<(u64, f64)> = outcome
                .succeeded()
                .flat_map(|s| s.runs.iter())
                .filter(|r| r.label == label)
                .map(|r| (r.seed, r.online_accuracy))
                .collect();
            let accs: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
            let (mean, std) = mean_std(&accs);
            SweepPoint {
                weights: *w,
                per_seed,
                mean,
                std,
                best: false,
            }
        })
        .collect();
    let best = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.mean.is_finite())
        .fold(None::<(usize, f64)>, |acc, (i, p)| match acc {
            Some((_, m)) if m >= p.mean => acc,
            _ => Some((i, p.mean)),
        });
    if let Some((i, _)) = best {
        points[i].best = true;
    }
    Ok(SweepReport {
        config_hash: config.config_hash(),
        points,
        failures: outcome.failures(),
    })
}

fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Renders records in the report schema. CSV starts with a commented line
/// holding the config hash and timestamp, then a commented std convention
/// line and the column header.
pub fn render_report(records: &[MetricsRecord], config_hash: &str, format: ReportFormat, ts: u64) -> String {
    match format {
        ReportFormat::Csv => {
            let mut s = format!("# config_hash={config_hash} timestamp={ts}\n# {STD_CONVENTION}\n");
            s.push_str(REPORT_COLUMNS);
            s.push('\n');
            for r in records {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.method,
                    r.seed,
                    r.batches,
                    r.online_accuracy,
                    r.acc_mean,
                    opt(r.acc_std),
                    opt(r.ms_per_item)
                );
            }
            s
        }
        ReportFormat::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                config_hash: &'a str,
                timestamp: u64,
                std_convention: &'a str,
                records: &'a [MetricsRecord],
            }
            let doc = Doc {
                config_hash,
                timestamp: ts,
                std_convention: STD_CONVENTION,
                records,
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("records serialize");
            s.push('\n');
            s
        }
    }
}

/// Writes the report and returns any warnings.
pub fn emit_report(
    records: &[MetricsRecord],
    path: impl AsRef<Path>,
    format: ReportFormat,
    config_hash: &str,
) -> Result<Vec<String>> {
    let path = path.as_ref();
    write_file(path, &render_report(records, config_hash, format, timestamp()))?;
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push(format!("{}: no records, wrote header only", path.display()));
    }
    Ok(warnings)
}

/// Ablation table: one row per configuration, one column per seed and the
/// average.
pub fn render_ablation_table(report: &AblationReport) -> String {
    let seeds: Vec<u64> = report.experiment.seeds.iter().map(|s| s.seed).collect();
    let mut s = format!("# config_hash={}\nmethod,wcse,bcse,lsd", report.experiment.config_hash);
    for seed in &seeds {
        let _ = write!(s, ",seed_{seed}");
    }
    s.push_str(",average\n");
    let mark = |b: bool| if b { "x" } else { "" };
    for row in &report.rows {
        let (a, b, c) = row.components;
        let _ = write!(s, "{},{},{},{}", row.label, mark(a), mark(b), mark(c));
        for seed in &seeds {
            let v = row.per_task.iter().find(|p| p.0 == *seed).map(|p| p.1);
            let _ = write!(s, ",{}", opt(v));
        }
        let _ = writeln!(s, ",{}", row.average);
    }
    s
}

/// Long-format sweep output: one row per grid point and seed, then one
/// `seed=mean` aggregate row per grid point; `best` marks the argmax
/// aggregate row.
pub fn render_sweep(report: &SweepReport, format: ReportFormat, ts: u64) -> String {
    match format {
        ReportFormat::Csv => {
            let mut s = format!(
                "# config_hash={} timestamp={ts}\nalpha,beta,tau,epsilon,seed,accuracy,best\n",
                report.config_hash
            );
            for p in &report.points {
                let w = p.weights;
                for (seed, acc) in &p.per_seed {
                    let _ = writeln!(s, "{},{},{},{},{seed},{acc},", w.alpha, w.beta, w.tau, w.epsilon);
                }
            }
            for p in &report.points {
                let w = p.weights;
                let _ = writeln!(
                    s,
                    "{},{},{},{},mean,{},{}",
                    w.alpha,
                    w.beta,
                    w.tau,
                    w.epsilon,
                    p.mean,
                    if p.best { "1" } else { "0" }
                );
            }
            s
        }
        ReportFormat::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                config_hash: &'a str,
                timestamp: u64,
                points: &'a [SweepPoint],
            }
            let doc = Doc {
                config_hash: &report.config_hash,
                timestamp: ts,
                points: &report.points,
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("sweep serializes");
            s.push('\n');
            s
        }
    }
}

pub fn emit_sweep(report: &SweepReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    write_file(path.as_ref(), &render_sweep(report, format, timestamp()))
}

pub fn emit_ablation_table(report: &AblationReport, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &render_ablation_table(report))
}

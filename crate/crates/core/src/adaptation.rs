//! Online test-time adaptation.
//!
//! For every incoming batch the engine predicts with the current parameters,
//! evaluates the unsupervised objective on that same forward pass, and then
//! updates the batch-norm scale and shift. The update only affects later
//! batches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::benchgen::TargetStream;
use crate::error::{Error, Result};
use crate::losses::{BaselineKind, LossWeights, Objective};
use crate::matrix::Matrix;
use crate::network::{Network, NormMode, ParamMask};
use crate::optim::NetworkOptimizer;
use crate::prob::{argmax_slice, DEFAULT_PROB_FLOOR};

/// Which objective drives adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossChoice {
    #[serde(rename = "lscd")]
    Lscd,
    #[serde(rename = "wcse_only")]
    WcseOnly,
    #[serde(rename = "bcse_only")]
    BcseOnly,
    #[serde(rename = "lsd_only")]
    LsdOnly,
    #[serde(rename = "wcse+bcse")]
    WcseBcse,
    #[serde(rename = "wcse+lsd")]
    WcseLsd,
    #[serde(rename = "bcse+lsd")]
    BcseLsd,
    #[serde(rename = "entropy")]
    Entropy,
    #[serde(rename = "hard_pl_ce")]
    HardPlCe,
    #[serde(rename = "confidence")]
    Confidence,
    /// No update: the frozen model.
    #[serde(rename = "none")]
    None,
}

impl LossChoice {
    pub const ALL: [LossChoice; 11] = [
        LossChoice::Lscd,
        LossChoice::WcseOnly,
        LossChoice::BcseOnly,
        LossChoice::LsdOnly,
        LossChoice::WcseBcse,
        LossChoice::WcseLsd,
        LossChoice::BcseLsd,
        LossChoice::Entropy,
        LossChoice::HardPlCe,
        LossChoice::Confidence,
        LossChoice::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossChoice::Lscd => "lscd",
            LossChoice::WcseOnly => "wcse_only",
            LossChoice::BcseOnly => "bcse_only",
            LossChoice::LsdOnly => "lsd_only",
            LossChoice::WcseBcse => "wcse+bcse",
            LossChoice::WcseLsd => "wcse+lsd",
            LossChoice::BcseLsd => "bcse+lsd",
            LossChoice::Entropy => "entropy",
            LossChoice::HardPlCe => "hard_pl_ce",
            LossChoice::Confidence => "confidence",
            LossChoice::None => "none",
        }
    }

    /// `(wcse, bcse, lsd)` inclusion flags.
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            LossChoice::Lscd => (true, true, true),
            LossChoice::WcseOnly => (true, false, false),
            LossChoice::BcseOnly => (false, true, false),
            LossChoice::LsdOnly => (false, false, true),
            LossChoice::WcseBcse => (true, true, false),
            LossChoice::WcseLsd => (true, false, true),
            LossChoice::BcseLsd => (false, true, true),
            _ => (false, false, false),
        }
    }

    /// The per-sample objective, or `None` for the frozen model. Terms left
    /// out of a combination get a zero coefficient.
    pub fn objective(self, w: &LossWeights, detach_pseudo_labels: bool) -> Option<Objective> {
        let baseline = match self {
            LossChoice::Entropy => Some(BaselineKind::Entropy),
            LossChoice::HardPlCe => Some(BaselineKind::HardPlCe),
            LossChoice::Confidence => Some(BaselineKind::Confidence),
            LossChoice::None => return None,
            _ => None,
        };
        if let Some(kind) = baseline {
            return Some(Objective::baseline(kind));
        }
        let (a, b, l) = self.components();
        let pick = |on: bool, v: f64| if on { v } else { 0.0 };
        Some(Objective {
            wcse: pick(a, w.alpha),
            bcse: pick(b, w.beta),
            lsd: pick(l, w.tau),
            epsilon: w.epsilon,
            baseline: None,
            detach_pseudo_labels,
            floor: DEFAULT_PROB_FLOOR,
        })
    }
}

impl fmt::Display for LossChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossChoice::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = LossChoice::ALL.iter().map(|c| c.name()).collect();
                Error::InvalidConfig(format!(
                    "unknown loss {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTAConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss: LossChoice,
    pub weights: LossWeights,
    pub detach_pseudo_labels: bool,
    pub steps_per_batch: usize,
    /// Statistics used by batch normalization while adapting.
    pub norm: NormMode,
}

impl Default for TTAConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 32,
            loss: LossChoice::Lscd,
            weights: LossWeights::default(),
            detach_pseudo_labels: false,
            steps_per_batch: 1,
            norm: NormMode::BatchStats,
        }
    }
}

impl TTAConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.steps_per_batch == 0 {
            return bad("steps_per_batch must be >= 1".into());
        }
        self.weights.validate()
    }
}

/// Predictions for one batch and the objective evaluated on the same pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    /// Mean per-sample objective; zero for the frozen model.
    pub loss_value: f64,
}

/// An adapting copy of a source network plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Engine {
    net: Network,
    optimizer: NetworkOptimizer,
    objective: Option<Objective>,
    config: TTAConfig,
}

impl Engine {
    pub fn new(source: &Network, config: TTAConfig) -> Result<Self> {
        config.validate()?;
        let net = source.clone();
        let optimizer = NetworkOptimizer::new(
            &net,
            ParamMask::BN_AFFINE,
            config.learning_rate,
            config.momentum,
        );
        let objective = config
            .loss
            .objective(&config.weights, config.detach_pseudo_labels);
        Ok(Self {
            net,
            optimizer,
            objective,
            config,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &TTAConfig {
        &self.config
    }

    /// Predicts `batch` with the current parameters, then adapts.
    pub fn adapt_batch(&mut self, batch: &Matrix) -> Result<BatchOutcome> {
        let (logits, trace) = self.net.forward(batch, self.config.norm)?;
        let predictions: Vec<usize> = logits.iter_rows().map(argmax_slice).collect();
        let Some(objective) = self.objective else {
            return Ok(BatchOutcome {
                predictions,
                loss_value: 0.0,
            });
        };
        let (loss_value, grad) = evaluate_batch(&objective, &logits);
        self.step(&trace, &grad)?;
        for _ in 1..self.config.steps_per_batch {
            let (logits, trace) = self.net.forward(batch, self.config.norm)?;
            let (_, grad) = evaluate_batch(&objective, &logits);
            self.step(&trace, &grad)?;
        }
        Ok(BatchOutcome {
            predictions,
            loss_value,
        })
    }

    fn step(&mut self, trace: &crate::network::ForwardTrace, grad: &Matrix) -> Result<()> {
        let grads = self.net.backward(trace, grad, ParamMask::BN_AFFINE)?;
        self.optimizer.step(&mut self.net, &grads)
    }
}

/// Mean objective over the rows of `logits` and the per-row logit gradients.
fn evaluate_batch(objective: &Objective, logits: &Matrix) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, z) in logits.iter_rows().enumerate() {
        let e = objective.evaluate(z);
        total += e.value;
        grad.row_mut(i).copy_from_slice(&e.grad_logits);
    }
    (total / logits.rows() as f64, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub index: usize,
    pub size: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub records: Vec<BatchRecord>,
    pub predictions: Vec<usize>,
    pub total_correct: usize,
    pub total_seen: usize,
    pub cumulative_accuracy: f64,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
    /// Trailing samples that could not form a batch of two.
    pub dropped: usize,
    /// Wall-clock milliseconds per processed sample; `None` where no clock
    /// is available.
    pub ms_per_item: Option<f64>,
}

impl EpisodeResult {
    /// Accuracy per class, `None` for classes absent from the stream.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.per_class_correct
            .iter()
            .zip(&self.per_class_total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect()
    }
}

#[cfg(not(target_arch = "wasm32"))]
struct Clock(std::time::Instant);
#[cfg(not(target_arch = "wasm32"))]
impl Clock {
    fn start() -> Self {
        Clock(std::time::Instant::now())
    }
    fn elapsed_ms(&self) -> Option<f64> {
        Some(self.0.elapsed().as_secs_f64() * 1e3)
    }
}
#[cfg(target_arch = "wasm32")]
struct Clock;
#[cfg(target_arch = "wasm32")]
impl Clock {
    fn start() -> Self {
        Clock
    }
    fn elapsed_ms(&self) -> Option<f64> {
        None
    }
}

/// Runs one episode over `stream` from a fresh copy of `source`.
///
/// Labels are joined with the predictions only after each batch has been
/// processed; the engine never sees them.
pub fn run_episode(source: &Network, stream: &TargetStream, config: &TTAConfig) -> Result<EpisodeResult> {
    if stream.dim() != source.input_dim() {
        return Err(Error::Shape(format!(
            "stream has {} features, network expects {}",
            stream.dim(),
            source.input_dim()
        )));
    }
    if stream.num_classes() > source.num_classes() {
        return Err(Error::Shape(format!(
            "stream has {} classes, network predicts {}",
            stream.num_classes(),
            source.num_classes()
        )));
    }
    let mut engine = Engine::new(source, config.clone())?;
    let c = source.num_classes();
    let labels = stream.scoring_labels();
    let mut records = Vec::new();
    let mut predictions = Vec::with_capacity(stream.len());
    let mut per_class_correct = vec![0; c];
    let mut per_class_total = vec![0; c];
    let mut dropped = 0;
    let mut offset = 0;
    let clock = Clock::start();
    for (index, batch) in stream.batches(config.batch_size).enumerate() {
        let n = batch.rows();
        if n < 2 {
            dropped += n;
            break;
        }
        let out = engine.adapt_batch(&batch)?;
        let truth = &labels[offset..offset + n];
        let mut rc = vec![0; c];
        let mut rt = vec![0; c];
        for (&p, &t) in out.predictions.iter().zip(truth) {
            rt[t] += 1;
            if p == t {
                rc[t] += 1;
            }
        }
        let correct: usize = rc.iter().sum();
        for k in 0..c {
            per_class_correct[k] += rc[k];
            per_class_total[k] += rt[k];
        }
        predictions.extend_from_slice(&out.predictions);
        records.push(BatchRecord {
            index,
            size: n,
            correct,
            accuracy: correct as f64 / n as f64,
            mean_loss: out.loss_value,
            per_class_correct: rc,
            per_class_total: rt,
        });
        offset += n;
    }
    let total_seen = offset;
    let total_correct: usize = records.iter().map(|r| r.correct).sum();
    let ms_per_item = clock
        .elapsed_ms()
        .map(|ms| if total_seen > 0 { ms / total_seen as f64 } else { 0.0 });
    Ok(EpisodeResult {
        records,
        predictions,
        total_correct,
        total_seen,
        cumulative_accuracy: if total_seen > 0 {
            total_correct as f64 / total_seen as f64
        } else {
            0.0
        },
        per_class_correct,
        per_class_total,
        dropped,
        ms_per_item,
    })
}

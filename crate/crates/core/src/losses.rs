//! Unsupervised adaptation objectives evaluated on a single prediction.
//!
//! Every loss returns its value together with the gradient with respect to
//! the logits that produced the prediction. Losses are first differentiated
//! with respect to the probabilities and then chained through the softmax
//! Jacobian, `dL/dz_c = y_c (dL/dy_c - sum_i y_i dL/dy_i)`, so the logit
//! gradient always sums to zero.
//!
//! The weak-category density depends on the argmax and is treated as
//! piecewise constant: it contributes no gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{self, argmax_slice, Logits, ProbVector, DEFAULT_PROB_FLOOR};

/// Per-class weak-category density: `epsilon` at the predicted class and
/// `1 - epsilon / (C - 1)` everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakDensity(Vec<f64>);

impl WeakDensity {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 0.5 {
        Ok(())
    } else {
        Err(Error::EpsilonOutOfRange(epsilon))
    }
}

pub fn weak_density(y: &ProbVector, epsilon: f64) -> Result<WeakDensity> {
    check_epsilon(epsilon)?;
    Ok(WeakDensity(density(y.as_slice(), epsilon)))
}

fn density(y: &[f64], epsilon: f64) -> Vec<f64> {
    let c = y.len();
    let top = argmax_slice(y);
    let other = 1.0 - epsilon / (c as f64 - 1.0);
    (0..c).map(|i| if i == top { epsilon } else { other }).collect()
}

/// Mixing coefficients of the composite objective plus the density smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 1.0,
            tau: 1.5,
            epsilon: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("tau", self.tau)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        check_epsilon(self.epsilon)
    }
}

/// A scalar loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

/// Chains `dL/dy` through the softmax Jacobian evaluated at `y`.
fn chain_softmax(y: &[f64], dl_dy: &[f64]) -> Vec<f64> {
    let mean: f64 = y.iter().zip(dl_dy).map(|(p, g)| p * g).sum();
    y.iter().zip(dl_dy).map(|(p, g)| p * (g - mean)).collect()
}

// Each `*_terms` returns (value, dL/dy).

fn wcse_terms(y: &[f64], epsilon: f64, detach: bool) -> (f64, Vec<f64>) {
    let d = density(y, epsilon);
    let mut value = 0.0;
    let grad = y
        .iter()
        .zip(&d)
        .map(|(&p, &dc)| {
            let lambda = dc.exp();
            let root = p.sqrt();
            let log = p.ln();
            value -= lambda * root * log;
            if detach {
                -lambda * root / p
            } else {
                -lambda * (log + 2.0) / (2.0 * root)
            }
        })
        .collect();
    (value, grad)
}

fn bcse_terms(y: &[f64], epsilon: f64, detach: bool) -> (f64, Vec<f64>) {
    let d = density(y, epsilon);
    let mut value = 0.0;
    let grad = y
        .iter()
        .zip(&d)
        .map(|(&p, &dc)| {
            let b = p * (1.0 - dc) + (1.0 - p) * dc;
            let lambda = b.exp();
            let log = p.ln();
            value -= lambda * p * log;
            let own = -lambda * (log + 1.0);
            if detach {
                own
            } else {
                // db/dy = 1 - 2d
                own - lambda * (1.0 - 2.0 * dc) * p * log
            }
        })
        .collect();
    (value, grad)
}

/// `sum_{i != c} v_i` for every `c`, from prefix and suffix sums so that it
/// stays accurate when `v_c` dominates.
fn exclusive_sums(v: &[f64]) -> Vec<f64> {
    let c = v.len();
    let mut suffix = vec![0.0; c + 1];
    for i in (0..c).rev() {
        suffix[i] = suffix[i + 1] + v[i];
    }
    let mut prefix = 0.0;
    let mut out = Vec::with_capacity(c);
    for i in 0..c {
        out.push(prefix + suffix[i + 1]);
        prefix += v[i];
    }
    out
}

/// Probability mass outside each class.
fn complements(y: &[f64]) -> Vec<f64> {
    exclusive_sums(y)
}

/// LSD value and its gradient with respect to the logits.
///
/// With `r_c = sum_{i != c} y_i` the logit gradient is
/// `y_j (log r_j - sum_i y_i log r_i) - y_j^2 + y_j sum_{i != j} y_i^2 / r_i`.
/// Chaining `dL/dy` through the softmax instead cancels terms of size
/// `1 / r_c`, which loses most digits once a class is near-certain.
fn lsd_logit_terms(y: &[f64]) -> (f64, Vec<f64>) {
    let rest = complements(y);
    let logs: Vec<f64> = rest.iter().map(|r| r.ln()).collect();
    let value: f64 = y.iter().zip(&logs).map(|(p, l)| p * l).sum();
    let ratios: Vec<f64> = y.iter().zip(&rest).map(|(p, r)| p * p / r).collect();
    let others = exclusive_sums(&ratios);
    let grad = y
        .iter()
        .zip(&logs)
        .zip(&others)
        .map(|((&p, &l), &s)| p * (l - value) - p * p + p * s)
        .collect();
    (value, grad)
}

fn entropy_terms(y: &[f64]) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let grad = y
        .iter()
        .map(|&p| {
            let log = p.ln();
            value -= p * log;
            -(log + 1.0)
        })
        .collect();
    (value, grad)
}

fn hard_pl_terms(y: &[f64]) -> (f64, Vec<f64>) {
    let top = argmax_slice(y);
    let mut grad = vec![0.0; y.len()];
    grad[top] = -1.0 / y[top];
    (-y[top].ln(), grad)
}

fn confidence_terms(y: &[f64]) -> (f64, Vec<f64>) {
    let top = argmax_slice(y);
    let mut grad = vec![0.0; y.len()];
    grad[top] = -1.0;
    (-y[top], grad)
}

fn finish(y: &[f64], (value, dl_dy): (f64, Vec<f64>)) -> LossEval {
    LossEval {
        value,
        grad_logits: chain_softmax(y, &dl_dy),
    }
}

/// Weak-confidence softmax entropy: `-sum_c exp(d_c) sqrt(y_c) log y_c`.
pub fn wcse_loss(y: &ProbVector, epsilon: f64) -> Result<LossEval> {
    check_epsilon(epsilon)?;
    Ok(finish(y.as_slice(), wcse_terms(y.as_slice(), epsilon, false)))
}

/// Balanced-categories softmax entropy: `-sum_c exp(b_c) y_c log y_c` with
/// `b = y (1 - d) + (1 - y) d`.
pub fn bcse_loss(y: &ProbVector, epsilon: f64) -> Result<LossEval> {
    check_epsilon(epsilon)?;
    Ok(finish(y.as_slice(), bcse_terms(y.as_slice(), epsilon, false)))
}

/// Low-saturation distribution loss: `sum_c y_c log(sum_{i != c} y_i)`.
pub fn lsd_loss(y: &ProbVector) -> LossEval {
    let (value, grad_logits) = lsd_logit_terms(y.as_slice());
    LossEval { value, grad_logits }
}

/// Composite objective on the clamped softmax of `z`:
/// `alpha * wcse + beta * bcse + tau * lsd`.
pub fn lscd_loss(z: &Logits, w: &LossWeights) -> Result<LossEval> {
    w.validate()?;
    Ok(Objective::lscd(*w).evaluate(z.as_slice()))
}

/// Comparison losses used as baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Soft pseudo-label entropy, `-sum_c y_c log y_c`.
    Entropy,
    /// Cross-entropy against the one-hot argmax, `-log y_top`.
    HardPlCe,
    /// Negative top-class probability.
    Confidence,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Entropy => "entropy",
            BaselineKind::HardPlCe => "hard_pl_ce",
            BaselineKind::Confidence => "confidence",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(BaselineKind::Entropy),
            "hard_pl_ce" => Ok(BaselineKind::HardPlCe),
            "confidence" => Ok(BaselineKind::Confidence),
            other => Err(Error::InvalidConfig(format!(
                "unknown baseline loss {other:?} (expected entropy, hard_pl_ce or confidence)"
            ))),
        }
    }
}

pub fn baseline_loss(kind: BaselineKind, y: &ProbVector) -> LossEval {
    let y = y.as_slice();
    let terms = match kind {
        BaselineKind::Entropy => entropy_terms(y),
        BaselineKind::HardPlCe => hard_pl_terms(y),
        BaselineKind::Confidence => confidence_terms(y),
    };
    finish(y, terms)
}

/// A fully specified per-sample objective over logits: a weighted sum of the
/// three proposed terms plus an optional baseline term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub wcse: f64,
    pub bcse: f64,
    pub lsd: f64,
    pub epsilon: f64,
    pub baseline: Option<BaselineKind>,
    /// Treat the WCSE pseudo-label `lambda * sqrt(y)` and the BCSE weight
    /// `lambda_bc` as constants when differentiating.
    pub detach_pseudo_labels: bool,
    pub floor: f64,
}

impl Objective {
    pub fn lscd(w: LossWeights) -> Self {
        Self {
            wcse: w.alpha,
            bcse: w.beta,
            lsd: w.tau,
            epsilon: w.epsilon,
            baseline: None,
            detach_pseudo_labels: false,
            floor: DEFAULT_PROB_FLOOR,
        }
    }

    pub fn baseline(kind: BaselineKind) -> Self {
        Self {
            wcse: 0.0,
            bcse: 0.0,
            lsd: 0.0,
            epsilon: LossWeights::default().epsilon,
            baseline: Some(kind),
            detach_pseudo_labels: false,
            floor: DEFAULT_PROB_FLOOR,
        }
    }

    /// Value and logit gradient at `softmax(z)` clamped to the floor.
    ///
    /// Clamping is treated as the identity when differentiating; it only
    /// binds when some probability is below the floor.
    pub fn evaluate(&self, z: &[f64]) -> LossEval {
        let raw = ProbVector::from_raw(prob::softmax_slice(z));
        let y = match prob::clamp_simplex(&raw, self.floor) {
            Ok(y) => y,
            Err(_) => raw,
        };
        self.evaluate_probs(&y)
    }

    pub fn evaluate_probs(&self, y: &ProbVector) -> LossEval {
        let y = y.as_slice();
        // LSD contributes its logit gradient directly; see `lsd_logit_terms`.
        let lsd = (self.lsd != 0.0).then(|| lsd_logit_terms(y));
        let mut value = lsd.as_ref().map_or(0.0, |(v, _)| self.lsd * v);
        let mut dl_dy = vec![0.0; y.len()];
        let mut add = |weight: f64, (v, g): (f64, Vec<f64>)| {
            value += weight * v;
            for (acc, gi) in dl_dy.iter_mut().zip(g) {
                *acc += weight * gi;
            }
        };
        if self.wcse != 0.0 {
            add(self.wcse, wcse_terms(y, self.epsilon, self.detach_pseudo_labels));
        }
        if self.bcse != 0.0 {
            add(self.bcse, bcse_terms(y, self.epsilon, self.detach_pseudo_labels));
        }
        match self.baseline {
            Some(BaselineKind::Entropy) => add(1.0, entropy_terms(y)),
            Some(BaselineKind::HardPlCe) => add(1.0, hard_pl_terms(y)),
            Some(BaselineKind::Confidence) => add(1.0, confidence_terms(y)),
            None => {}
        }
        let mut grad_logits = chain_softmax(y, &dl_dy);
        if let Some((_, g)) = lsd {
            for (acc, gi) in grad_logits.iter_mut().zip(g) {
                *acc += self.lsd * gi;
            }
        }
        LossEval { value, grad_logits }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn weak_density_examples() {
        assert_eq!(weak_density(&p(&[0.8, 0.2]), 0.01).unwrap().as_slice(), &[0.01, 0.99]);
        let d = weak_density(&p(&[0.1, 0.1, 0.7, 0.1]), 0.01).unwrap();
        let other = 1.0 - 0.01 / 3.0;
        assert_eq!(d.as_slice(), &[other, other, 0.01, other]);
        assert!((other - 0.996667).abs() < 1e-6);

        let y = ProbVector::from_raw(vec![1.0 / 45.0; 45]);
        let d = weak_density(&y, 0.01).unwrap();
        assert_eq!(d.as_slice()[0], 0.01);
        assert!(d.as_slice()[1..].iter().all(|&v| (v - 0.999773).abs() < 1e-6));
        assert_eq!(d.as_slice().iter().filter(|&&v| v == 0.01).count(), 1);
    }

    #[test]
    fn epsilon_range_enforced() {
        let y = p(&[0.8, 0.2]);
        assert!(weak_density(&y, 0.0).is_err());
        assert!(weak_density(&y, 0.5).is_err());
        assert!(wcse_loss(&y, 0.7).is_err());
        assert!(bcse_loss(&y, -0.1).is_err());
    }

    #[test]
    fn wcse_uniform_gradient_sums_to_zero() {
        let y = prob::softmax(&Logits::new(vec![0.0; 3]).unwrap());
        let g = wcse_loss(&y, 0.01).unwrap().grad_logits;
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn bcse_two_class_weights_coincide() {
        // with C = 2 both entries of b reduce to d_top + y_top (1 - 2 d_top)
        let y = [0.8, 0.2];
        let d = density(&y, 0.01);
        let b: Vec<f64> = y
            .iter()
            .zip(&d)
            .map(|(p, dc)| p * (1.0 - dc) + (1.0 - p) * dc)
            .collect();
        assert!((b[0] - b[1]).abs() < 1e-15);
        assert!((b[0] - 0.794).abs() < 1e-12);
    }

    #[test]
    fn bcse_vanishes_at_vertices() {
        let mut last = f64::INFINITY;
        for floor in [1e-3, 1e-5, 1e-7, 1e-9] {
            let y = p(&[1.0 - floor, floor]);
            let v = bcse_loss(&y, 0.01).unwrap().value;
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-7);
    }

    #[test]
    fn baseline_examples() {
        let e = baseline_loss(BaselineKind::Entropy, &p(&[0.5, 0.5]));
        assert!((e.value - std::f64::consts::LN_2).abs() < 1e-15);
        let h = baseline_loss(BaselineKind::HardPlCe, &p(&[0.9, 0.1]));
        assert!((h.value - 0.105_360_515_657_826_3).abs() < 1e-12);
        // gradient of -log softmax_top is y - onehot
        assert!((h.grad_logits[0] - (0.9 - 1.0)).abs() < 1e-15);
        assert!((h.grad_logits[1] - 0.1).abs() < 1e-15);
        let c = baseline_loss(BaselineKind::Confidence, &p(&[0.7, 0.2, 0.1]));
        assert_eq!(c.value, -0.7);
    }

    #[test]
    fn unknown_baseline_rejected() {
        assert!("kl".parse::<BaselineKind>().is_err());
        assert_eq!("hard_pl_ce".parse::<BaselineKind>().unwrap(), BaselineKind::HardPlCe);
    }

    #[test]
    fn lsd_only_weights_reduce_to_lsd() {
        let z = Logits::new(vec![1.2, -0.3, 0.4]).unwrap();
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            tau: 1.0,
            epsilon: 0.01,
        };
        let comp = lscd_loss(&z, &w).unwrap();
        let lsd = lsd_loss(&prob::softmax(&z));
        assert_eq!(comp.value, lsd.value);
        assert_eq!(comp.grad_logits, lsd.grad_logits);
    }

    #[test]
    fn two_class_symmetric_gradient_is_antisymmetric() {
        let z = Logits::new(vec![0.0, 0.0]).unwrap();
        let g = lscd_loss(&z, &LossWeights::default()).unwrap().grad_logits;
        assert!((g[0] + g[1]).abs() < 1e-15 * g[0].abs().max(1.0));
        assert!(g[0] != 0.0);
    }

    #[test]
    fn complements_match_direct_sums() {
        let y = [0.1, 0.25, 0.05, 0.6];
        let rest = complements(&y);
        for c in 0..4 {
            let direct: f64 = (0..4).filter(|&i| i != c).map(|i| y[i]).sum();
            assert!((rest[c] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn detached_gradients_differ_but_values_do_not() {
        let z = [0.9, -0.2, 0.3];
        let full = Objective::lscd(LossWeights::default());
        let detached = Objective {
            detach_pseudo_labels: true,
            ..full
        };
        let a = full.evaluate(&z);
        let b = detached.evaluate(&z);
        assert_eq!(a.value, b.value);
        assert_ne!(a.grad_logits, b.grad_logits);
        assert!(b.grad_logits.iter().sum::<f64>().abs() < 1e-12);
    }
}

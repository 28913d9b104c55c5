//! Numerically stable probability primitives: softmax, argmax and simplex clamping.

use crate::error::{Error, Result};

/// Default lower bound applied to probabilities before any logarithm.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-7;

/// Unnormalized class scores for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::TooFewClasses(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "logit",
                index: i,
                value: values[i],
            });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that `probs` is a probability vector: at least two entries,
    /// each in `[0, 1]`, summing to one within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::TooFewClasses(probs.len()));
        }
        if let Some(i) = probs
            .iter()
            .position(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(Error::NotAProbability {
                index: i,
                value: probs[i],
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized(sum));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Log-sum-exp with max subtraction.
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// `softmax(z)_c = exp(z_c - logsumexp(z))`.
pub fn softmax(z: &Logits) -> ProbVector {
    ProbVector::from_raw(softmax_slice(z.as_slice()))
}

pub(crate) fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for p in &mut out {
        *p /= s;
    }
    out
}

/// Index of the largest entry. Exact ties resolve to the lowest index.
pub fn argmax_tiebreak(y: &ProbVector) -> usize {
    argmax_slice(y.as_slice())
}

pub(crate) fn argmax_slice(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Raises every entry to at least `floor` and renormalizes onto the simplex.
///
/// Entries below the floor are pinned at exactly `floor`; the remaining mass
/// is shared among the other entries in proportion to their original values,
/// repeating until no rescaled entry falls below the floor. `floor` must lie
/// in `(0, 1/C)`. Vectors with no entry below the floor are returned as-is,
/// which makes the operation idempotent.
pub fn clamp_simplex(y: &ProbVector, floor: f64) -> Result<ProbVector> {
    let c = y.num_classes();
    if !(floor > 0.0 && floor < 1.0 / c as f64) {
        return Err(Error::FloorOutOfRange { floor, classes: c });
    }
    let p = y.as_slice();
    let mut pinned: Vec<bool> = p.iter().map(|&v| v < floor).collect();
    if !pinned.iter().any(|&b| b) {
        return Ok(y.clone());
    }
    loop {
        let n_pinned = pinned.iter().filter(|&&b| b).count();
        let free = 1.0 - n_pinned as f64 * floor;
        let mass: f64 = p
            .iter()
            .zip(&pinned)
            .filter(|(_, &b)| !b)
            .map(|(v, _)| v)
            .sum();
        let out: Vec<f64> = p
            .iter()
            .zip(&pinned)
            .map(|(&v, &b)| if b { floor } else { v * free / mass })
            .collect();
        let mut grew = false;
        for (i, &v) in out.iter().enumerate() {
            if !pinned[i] && v < floor {
                pinned[i] = true;
                grew = true;
            }
        }
        if !grew {
            return Ok(ProbVector::from_raw(out));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&logits(&[0.0, 0.0])).as_slice(), &[0.5, 0.5]);
        for c in [-7.5, 0.0, 3.0, 99.0] {
            for p in softmax(&logits(&[c, c, c])).as_slice() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let y = softmax(&logits(&[2f64.ln(), 0.0]));
        assert!((y.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let y = softmax(&logits(&[500.0, -500.0, 499.0]));
        assert!(y.as_slice().iter().all(|p| p.is_finite()));
        assert!((y.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let err = Logits::new(vec![0.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("logit"), "{err}");
        assert!(Logits::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(Logits::new(vec![1.0]).is_err());
    }

    #[test]
    fn argmax_examples() {
        let p = |v: &[f64]| ProbVector::new(v.to_vec()).unwrap();
        assert_eq!(argmax_tiebreak(&p(&[0.1, 0.7, 0.2])), 1);
        assert_eq!(argmax_tiebreak(&p(&[0.5, 0.5])), 0);
        let third = 1.0 / 3.0;
        assert_eq!(argmax_tiebreak(&ProbVector::from_raw(vec![third; 3])), 0);
    }

    #[test]
    fn clamp_examples() {
        let y = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let c = clamp_simplex(&y, 1e-7).unwrap();
        assert_eq!(c.as_slice(), &[1.0 - 1e-7, 1e-7]);

        let y = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(clamp_simplex(&y, 1e-7).unwrap().as_slice(), &[0.5, 0.5]);

        let y = ProbVector::new(vec![0.999999999, 1e-9, 0.0]).unwrap();
        let c = clamp_simplex(&y, 1e-7).unwrap();
        // two entries pinned, the survivor keeps the remaining 1 - 2e-7
        let expect = [1.0 - 2e-7, 1e-7, 1e-7];
        for (a, b) in c.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((c.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(c.as_slice().iter().all(|&p| p >= 1e-7));
    }

    #[test]
    fn clamp_cascades_when_rescaling_dips_below_floor() {
        // 0.1 drops under the floor once the 0.0 entries claim their share
        let y = ProbVector::new(vec![0.9, 0.1, 0.0, 0.0]).unwrap();
        let c = clamp_simplex(&y, 0.2).unwrap();
        assert_eq!(c.as_slice()[1], 0.2);
        assert!((c.as_slice()[0] - 0.4).abs() < 1e-15);
        assert_eq!(clamp_simplex(&c, 0.2).unwrap(), c);
    }

    #[test]
    fn clamp_floor_validation() {
        let y = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!(clamp_simplex(&y, 0.0).is_err());
        assert!(clamp_simplex(&y, 0.5).is_err());
        assert!(clamp_simplex(&y, -1e-3).is_err());
    }

    #[test]
    fn probvector_validation() {
        assert!(ProbVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
        assert!(ProbVector::new(vec![1.0]).is_err());
    }
}

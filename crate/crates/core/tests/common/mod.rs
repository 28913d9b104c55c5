//! Direct-formula reference implementations shared by the integration
//! tests. Written independently of the library: naive loops, no prefix sums,
//! no shared helpers.
#![allow(dead_code)]

use lscd_tta::{Matrix, Network, NormMode, Objective, ParamMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut m = z[0];
    for &v in z {
        if v > m {
            m = v;
        }
    }
    let mut e = Vec::new();
    let mut s = 0.0;
    for &v in z {
        let x = (v - m).exp();
        e.push(x);
        s += x;
    }
    e.iter().map(|x| x / s).collect()
}

pub fn density(y: &[f64], eps: f64) -> Vec<f64> {
    let c = y.len();
    let mut top = 0;
    for i in 1..c {
        if y[i] > y[top] {
            top = i;
        }
    }
    let rest = 1.0 - eps / (c as f64 - 1.0);
    (0..c).map(|i| if i == top { eps } else { rest }).collect()
}

pub fn wcse(y: &[f64], eps: f64) -> f64 {
    let d = density(y, eps);
    let mut total = 0.0;
    for i in 0..y.len() {
        total += d[i].exp() * y[i].sqrt() * y[i].ln();
    }
    -total
}

pub fn bcse(y: &[f64], eps: f64) -> f64 {
    let d = density(y, eps);
    let mut total = 0.0;
    for i in 0..y.len() {
        let b = y[i] * (1.0 - d[i]) + (1.0 - y[i]) * d[i];
        total += b.exp() * y[i] * y[i].ln();
    }
    -total
}

pub fn lsd(y: &[f64]) -> f64 {
    let mut total = 0.0;
    for c in 0..y.len() {
        let mut others = 0.0;
        for i in 0..y.len() {
            if i != c {
                others += y[i];
            }
        }
        total += y[c] * others.ln();
    }
    total
}

pub fn composite(y: &[f64], alpha: f64, beta: f64, tau: f64, eps: f64) -> f64 {
    alpha * wcse(y, eps) + beta * bcse(y, eps) + tau * lsd(y)
}

pub fn entropy(y: &[f64]) -> f64 {
    -y.iter().map(|p| p * p.ln()).sum::<f64>()
}

/// A random point in the simplex, biased toward confident predictions.
pub fn random_probs(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let scale = rng.random_range(0.1..6.0);
    let z: Vec<f64> = (0..c).map(|_| scale * normal(rng)).collect();
    softmax(&z)
}

/// Logits whose top-two probability gap is at least `margin`.
pub fn logits_with_margin(rng: &mut ChaCha8Rng, c: usize, margin: f64) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..c).map(|_| 1.5 * normal(rng)).collect();
        let mut y = softmax(&z);
        y.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if y[0] - y[1] >= margin {
            return z;
        }
    }
}

/// Central differences of a scalar function of a vector.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max|a - b| / max(max|b|, 1e-8)`.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn mean_objective(net: &Network, batch: &Matrix, mode: NormMode, obj: &Objective) -> f64 {
    let (logits, _) = net.forward(batch, mode).unwrap();
    let n = logits.rows();
    logits.iter_rows().map(|z| obj.evaluate(z).value).sum::<f64>() / n as f64
}

/// Worst relative error of the network backward pass against central
/// differences, over all tensors selected by `mask`.
pub fn network_grad_error(
    net: &Network,
    batch: &Matrix,
    mode: NormMode,
    obj: &Objective,
    mask: ParamMask,
    h: f64,
) -> f64 {
    let (logits, trace) = net.forward(batch, mode).unwrap();
    let mut dl = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        dl.row_mut(i).copy_from_slice(&obj.evaluate(logits.row(i)).grad_logits);
    }
    let grads = net.backward(&trace, &dl, mask).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let kinds: Vec<_> = net.tensors().iter().map(|(k, _)| *k).collect();
    for (t, kind) in kinds.iter().enumerate() {
        if !mask.selects(*kind) {
            continue;
        }
        for j in 0..grads.tensors[t].len() {
            let eval = |delta: f64| {
                let mut p = net.clone();
                p.tensors_mut()[t].1[j] += delta;
                mean_objective(&p, batch, mode, obj)
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            analytic.push(grads.tensors[t][j]);
        }
    }
    max_rel_err(&analytic, &numeric)
}

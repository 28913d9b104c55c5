//! SGD with heavy-ball momentum.
//!
//! Convention: `v <- momentum * v + g`, then `theta <- theta - lr * v`.

use crate::error::{Error, Result};
use crate::network::{GradientSet, Network, ParamMask};

/// One velocity buffer per parameter tensor, starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros_like(shapes: &[usize]) -> Self {
        Self {
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Applies one momentum step to every tensor pair `(params[i], grads[i])`.
pub fn sgd_momentum_step(
    state: &mut OptimizerState,
    grads: &[&[f64]],
    params: &mut [&mut [f64]],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, got {} gradients for {} parameters",
            state.velocity.len(),
            grads.len(),
            params.len()
        )));
    }
    for (i, ((v, g), p)) in state
        .velocity
        .iter()
        .zip(grads)
        .zip(params.iter())
        .enumerate()
    {
        if v.len() != g.len() || v.len() != p.len() {
            return Err(Error::Shape(format!(
                "tensor {i}: velocity {}, gradient {}, parameter {}",
                v.len(),
                g.len(),
                p.len()
            )));
        }
    }
    for ((v, g), p) in state.velocity.iter_mut().zip(grads).zip(params.iter_mut()) {
        for ((vi, gi), pi) in v.iter_mut().zip(g.iter()).zip(p.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Momentum SGD over the tensors of a [`Network`] selected by a mask.
#[derive(Debug, Clone)]
pub struct NetworkOptimizer {
    mask: ParamMask,
    lr: f64,
    momentum: f64,
    state: OptimizerState,
}

impl NetworkOptimizer {
    pub fn new(net: &Network, mask: ParamMask, lr: f64, momentum: f64) -> Self {
        let shapes: Vec<usize> = net
            .tensors()
            .iter()
            .filter(|(k, _)| mask.selects(*k))
            .map(|(_, t)| t.len())
            .collect();
        Self {
            mask,
            lr,
            momentum,
            state: OptimizerState::zeros_like(&shapes),
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, net: &mut Network, grads: &GradientSet) -> Result<()> {
        let mask = self.mask;
        let mut params: Vec<&mut [f64]> = Vec::new();
        let mut selected: Vec<&[f64]> = Vec::new();
        let tensors = net.tensors_mut();
        if tensors.len() != grads.tensors.len() {
            return Err(Error::Shape(format!(
                "gradient set has {} tensors, network has {}",
                grads.tensors.len(),
                tensors.len()
            )));
        }
        for ((kind, t), g) in tensors.into_iter().zip(&grads.tensors) {
            if mask.selects(kind) {
                params.push(t.as_mut_slice());
                selected.push(g.as_slice());
            }
        }
        sgd_momentum_step(&mut self.state, &selected, &mut params, self.lr, self.momentum)
    }
}

//! Batch-normalized feed-forward classifier with analytic backward pass.
//!
//! Layout: `[Dense -> BatchNorm -> ReLU] x hidden.len()` followed by a dense
//! head producing the logits.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_STATS_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input dimension must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::TooFewClasses(self.num_classes));
        }
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::InvalidConfig(format!("hidden layer {i} has width 0")));
        }
        Ok(())
    }
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::new(32, vec![64, 64], 10)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                g * scale
            })
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    /// Additive shift applied after scaling.
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub stats_momentum: f64,
}

impl BatchNormLayer {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            eps: DEFAULT_BN_EPS,
            stats_momentum: DEFAULT_STATS_MOMENTUM,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub dense: DenseLayer,
    pub bn: BatchNormLayer,
}

/// Where batch normalization takes its statistics from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Mean and biased variance of the current batch.
    BatchStats,
    /// Stored running mean and variance.
    RunningStats,
}

/// Identifies one parameter tensor in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    DenseWeight,
    DenseBias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Which trainable tensors receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    pub dense: bool,
    pub bn_affine: bool,
}

impl ParamMask {
    /// BN scale and shift only.
    pub const BN_AFFINE: ParamMask = ParamMask {
        dense: false,
        bn_affine: true,
    };
    pub const ALL: ParamMask = ParamMask {
        dense: true,
        bn_affine: true,
    };

    pub fn selects(self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::DenseWeight | ParamKind::DenseBias => self.dense,
            ParamKind::BnGamma | ParamKind::BnBeta => self.bn_affine,
            ParamKind::RunningMean | ParamKind::RunningVar => false,
        }
    }
}

impl Default for ParamMask {
    fn default() -> Self {
        Self::BN_AFFINE
    }
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: Matrix,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Normalized, pre-affine activations.
    pub normalized: Matrix,
    /// BN output before the ReLU.
    pub bn_out: Matrix,
}

/// Activations cached by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: NormMode,
    pub blocks: Vec<BlockTrace>,
    pub head_input: Matrix,
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

/// Gradients aligned with [`Network::tensors`]; unselected tensors hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&g| g == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub blocks: Vec<Block>,
    pub head: DenseLayer,
}

impl Network {
    /// Deterministic initialization: dense weights drawn from a standard
    /// normal scaled by `1/sqrt(fan_in)`, zero biases, identity BN.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(arch.hidden.len());
        let mut prev = arch.input_dim;
        for &h in &arch.hidden {
            blocks.push(Block {
                dense: DenseLayer::init(prev, h, &mut rng),
                bn: BatchNormLayer::new(h),
            });
            prev = h;
        }
        let head = DenseLayer::init(prev, arch.num_classes, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            blocks,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn num_parameters(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(k, _)| k.is_trainable())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Every stored tensor in declaration order: per block the dense weight,
    /// dense bias, gamma, beta, running mean and running variance, then the
    /// head weight and bias.
    pub fn tensors(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6 + 2);
        for b in &self.blocks {
            out.push((ParamKind::DenseWeight, b.dense.weight.as_slice()));
            out.push((ParamKind::DenseBias, b.dense.bias.as_slice()));
            out.push((ParamKind::BnGamma, b.bn.gamma.as_slice()));
            out.push((ParamKind::BnBeta, b.bn.beta.as_slice()));
            out.push((ParamKind::RunningMean, b.bn.running_mean.as_slice()));
            out.push((ParamKind::RunningVar, b.bn.running_var.as_slice()));
        }
        out.push((ParamKind::DenseWeight, self.head.weight.as_slice()));
        out.push((ParamKind::DenseBias, self.head.bias.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut Vec<f64>)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6 + 2);
        for b in &mut self.blocks {
            out.push((ParamKind::DenseWeight, &mut b.dense.weight));
            out.push((ParamKind::DenseBias, &mut b.dense.bias));
            out.push((ParamKind::BnGamma, &mut b.bn.gamma));
            out.push((ParamKind::BnBeta, &mut b.bn.beta));
            out.push((ParamKind::RunningMean, &mut b.bn.running_mean));
            out.push((ParamKind::RunningVar, &mut b.bn.running_var));
        }
        out.push((ParamKind::DenseWeight, &mut self.head.weight));
        out.push((ParamKind::DenseBias, &mut self.head.bias));
        out
    }

    pub fn forward(&self, batch: &Matrix, mode: NormMode) -> Result<(Matrix, ForwardTrace)> {
        if batch.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.arch.input_dim
            )));
        }
        let n = batch.rows();
        if mode == NormMode::BatchStats && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut x = batch.clone();
        for block in &self.blocks {
            let pre = x.affine(&block.dense.weight, &block.dense.bias);
            let bn = &block.bn;
            let (mean, var) = match mode {
                NormMode::BatchStats => {
                    let m = pre.column_means();
                    let v = pre.column_variances(&m);
                    (m, v)
                }
                NormMode::RunningStats => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            let mut normalized = pre;
            let mut bn_out = Matrix::zeros(n, bn.width());
            let mut act = Matrix::zeros(n, bn.width());
            for i in 0..n {
                let xr = normalized.row_mut(i);
                for j in 0..xr.len() {
                    xr[j] = (xr[j] - mean[j]) * inv_std[j];
                }
                let xr = normalized.row(i);
                let yr = bn_out.row_mut(i);
                for j in 0..yr.len() {
                    yr[j] = bn.gamma[j] * xr[j] + bn.beta[j];
                }
                let yr = bn_out.row(i);
                for (a, &v) in act.row_mut(i).iter_mut().zip(yr) {
                    *a = v.max(0.0);
                }
            }
            traces.push(BlockTrace {
                input: x,
                mean,
                var,
                inv_std,
                normalized,
                bn_out,
            });
            x = act;
        }
        let logits = x.affine(&self.head.weight, &self.head.bias);
        let trace = ForwardTrace {
            mode,
            blocks: traces,
            head_input: x,
            logits: logits.clone(),
        };
        Ok((logits, trace))
    }

    /// Logits only, from running statistics.
    pub fn predict_logits(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch, NormMode::RunningStats)?.0)
    }

    /// Blends the batch statistics recorded in `trace` into the running
    /// statistics: `running <- (1 - m) running + m batch`.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) -> Result<()> {
        if trace.mode != NormMode::BatchStats || trace.blocks.len() != self.blocks.len() {
            return Err(Error::TraceMismatch(
                "running statistics need a batch-statistics trace of this network".into(),
            ));
        }
        for (block, t) in self.blocks.iter_mut().zip(&trace.blocks) {
            let m = block.bn.stats_momentum;
            for (r, b) in block.bn.running_mean.iter_mut().zip(&t.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in block.bn.running_var.iter_mut().zip(&t.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        Ok(())
    }

    /// Gradient of the batch-mean loss `(1/n) sum_i L_i` given the per-sample
    /// logit gradients `dl_dlogits` (row `i` is `dL_i/dz_i`).
    ///
    /// In batch-statistics mode the dependence of the batch mean and variance
    /// on every sample is included.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        dl_dlogits: &Matrix,
        mask: ParamMask,
    ) -> Result<GradientSet> {
        let n = trace.batch_size();
        if dl_dlogits.rows() != n || dl_dlogits.cols() != self.arch.num_classes {
            return Err(Error::TraceMismatch(format!(
                "upstream gradient is {}x{}, trace holds {n} samples of {} classes",
                dl_dlogits.rows(),
                dl_dlogits.cols(),
                self.arch.num_classes
            )));
        }
        if trace.blocks.len() != self.blocks.len() || trace.logits.cols() != self.arch.num_classes {
            return Err(Error::TraceMismatch(
                "trace was produced by a different architecture".into(),
            ));
        }
        let mut grads: Vec<Vec<f64>> = self
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        let head_w = grads.len() - 2;
        let inv_n = 1.0 / n as f64;

        // dL/dlogits for the mean loss
        let mut upstream = dl_dlogits.clone();
        upstream.as_mut_slice().iter_mut().for_each(|g| *g *= inv_n);

        if mask.dense {
            let (gw, gb) = dense_param_grads(&trace.head_input, &upstream, self.head.out_dim);
            grads[head_w] = gw;
            grads[head_w + 1] = gb;
        }
        let mut d_act = input_grad(&upstream, &self.head.weight, self.head.in_dim);

        for (bi, (block, t)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let width = block.bn.width();
            let base = bi * 6;
            // ReLU
            let mut dy = d_act;
            for (g, &v) in dy.as_mut_slice().iter_mut().zip(t.bn_out.as_slice()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
            // affine part of BN
            let mut dgamma = vec![0.0; width];
            let mut dbeta = vec![0.0; width];
            for (dr, xr) in dy.iter_rows().zip(t.normalized.iter_rows()) {
                for j in 0..width {
                    dgamma[j] += dr[j] * xr[j];
                    dbeta[j] += dr[j];
                }
            }
            if mask.bn_affine {
                grads[base + 2] = dgamma.clone();
                grads[base + 3] = dbeta.clone();
            }
            if bi == 0 && !mask.dense {
                break;
            }
            // normalization
            let mut dpre = Matrix::zeros(n, width);
            match trace.mode {
                NormMode::BatchStats => {
                    // dxhat = dy * gamma; sum(dxhat) = gamma * dbeta;
                    // sum(dxhat * xhat) = gamma * dgamma
                    for i in 0..n {
                        let dr = dy.row(i);
                        let xr = t.normalized.row(i);
                        let out = dpre.row_mut(i);
                        for j in 0..width {
                            let g = block.bn.gamma[j];
                            let dxhat = dr[j] * g;
                            out[j] = t.inv_std[j]
                                * (dxhat - inv_n * g * dbeta[j] - inv_n * xr[j] * g * dgamma[j]);
                        }
                    }
                }
                NormMode::RunningStats => {
                    for i in 0..n {
                        let dr = dy.row(i);
                        let out = dpre.row_mut(i);
                        for j in 0..width {
                            out[j] = dr[j] * block.bn.gamma[j] * t.inv_std[j];
                        }
                    }
                }
            }
            if mask.dense {
                let (gw, gb) = dense_param_grads(&t.input, &dpre, width);
                grads[base] = gw;
                grads[base + 1] = gb;
            }
            if bi == 0 {
                break;
            }
            d_act = input_grad(&dpre, &block.dense.weight, block.dense.in_dim);
        }
        Ok(GradientSet { tensors: grads })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checkpoint encoding, all integers and floats little-endian:
    ///
    /// ```text
    /// "LSCDNET"             7 bytes
    /// version               u8 (= 1)
    /// input_dim             u32
    /// hidden_count          u32
    /// hidden widths         u32 x hidden_count
    /// num_classes           u32
    /// per hidden block:
    ///   dense weight        f64 x (width * fan_in), row-major (out, in)
    ///   dense bias          f64 x width
    ///   gamma, beta         f64 x width each
    ///   running mean, var   f64 x width each
    ///   bn eps              f64
    ///   stats momentum      f64
    /// head weight           f64 x (classes * fan_in)
    /// head bias             f64 x classes
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let put_f64s = |out: &mut Vec<u8>, v: &[f64]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put_u32(&mut out, self.arch.input_dim);
        put_u32(&mut out, self.arch.hidden.len());
        for &h in &self.arch.hidden {
            put_u32(&mut out, h);
        }
        put_u32(&mut out, self.arch.num_classes);
        for b in &self.blocks {
            put_f64s(&mut out, &b.dense.weight);
            put_f64s(&mut out, &b.dense.bias);
            put_f64s(&mut out, &b.bn.gamma);
            put_f64s(&mut out, &b.bn.beta);
            put_f64s(&mut out, &b.bn.running_mean);
            put_f64s(&mut out, &b.bn.running_var);
            put_f64s(&mut out, &[b.bn.eps, b.bn.stats_momentum]);
        }
        put_f64s(&mut out, &self.head.weight);
        put_f64s(&mut out, &self.head.bias);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.take(1, "version byte")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let input_dim = r.u32("input dimension")?;
        let hidden_count = r.u32("hidden layer count")?;
        if hidden_count > MAX_HIDDEN_LAYERS {
            return Err(Error::DimensionMismatch(format!(
                "implausible hidden layer count {hidden_count}"
            )));
        }
        let hidden = (0..hidden_count)
            .map(|i| r.u32(&format!("width of hidden layer {i}")))
            .collect::<Result<Vec<_>>>()?;
        let num_classes = r.u32("class count")?;
        let arch = ArchSpec::new(input_dim, hidden, num_classes);
        arch.validate()
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;

        let mut blocks = Vec::with_capacity(arch.hidden.len());
        let mut prev = arch.input_dim;
        for (i, &h) in arch.hidden.iter().enumerate() {
            let weight = r.f64s(h * prev, &format!("block {i} dense weight"))?;
            let bias = r.f64s(h, &format!("block {i} dense bias"))?;
            let gamma = r.f64s(h, &format!("block {i} gamma"))?;
            let beta = r.f64s(h, &format!("block {i} beta"))?;
            let running_mean = r.f64s(h, &format!("block {i} running mean"))?;
            let running_var = r.f64s(h, &format!("block {i} running variance"))?;
            let tail = r.f64s(2, &format!("block {i} bn settings"))?;
            blocks.push(Block {
                dense: DenseLayer {
                    in_dim: prev,
                    out_dim: h,
                    weight,
                    bias,
                },
                bn: BatchNormLayer {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps: tail[0],
                    stats_momentum: tail[1],
                },
            });
            prev = h;
        }
        let weight = r.f64s(arch.num_classes * prev, "head weight")?;
        let bias = r.f64s(arch.num_classes, "head bias")?;
        if r.pos != bytes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} trailing bytes after the declared architecture",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            head: DenseLayer {
                in_dim: prev,
                out_dim: arch.num_classes,
                weight,
                bias,
            },
            arch,
            blocks,
        })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"LSCDNET";
pub const CHECKPOINT_VERSION: u8 = 1;
const MAX_HIDDEN_LAYERS: usize = 1024;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {len} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::DimensionMismatch(format!("{what}: size overflow")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Weight and bias gradients of `out = input * W^T + b` given `d_out`.
fn dense_param_grads(input: &Matrix, d_out: &Matrix, out_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let in_dim = input.cols();
    let mut gw = vec![0.0; out_dim * in_dim];
    let mut gb = vec![0.0; out_dim];
    for (x, d) in input.iter_rows().zip(d_out.iter_rows()) {
        for j in 0..out_dim {
            let dj = d[j];
            if dj == 0.0 {
                continue;
            }
            gb[j] += dj;
            for (w, xi) in gw[j * in_dim..(j + 1) * in_dim].iter_mut().zip(x) {
                *w += dj * xi;
            }
        }
    }
    (gw, gb)
}

/// `d_out * W`, the gradient with respect to a dense layer's input.
fn input_grad(d_out: &Matrix, weight: &[f64], in_dim: usize) -> Matrix {
    let n = d_out.rows();
    let mut out = Matrix::zeros(n, in_dim);
    for i in 0..n {
        let d = d_out.row(i);
        let o = out.row_mut(i);
        for (j, &dj) in d.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            for (oi, w) in o.iter_mut().zip(&weight[j * in_dim..(j + 1) * in_dim]) {
                *oi += dj * w;
            }
        }
    }
    out
}

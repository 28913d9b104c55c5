//! Seeded source/target tasks with covariate shift and class imbalance,
//! supervised source training, and the feature CSV format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{ArchSpec, Network, NormMode, ParamMask};
use crate::optim::NetworkOptimizer;
use crate::prob::{argmax_slice, logsumexp, softmax_slice};

/// Transformation applied to the target domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Rotation angle (radians) in a random 2D plane.
    pub rotation_angle: f64,
    /// Length of a random translation vector.
    pub mean_translation: f64,
    /// Per-feature scale factors are drawn uniformly from this range.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of the isotropic class-conditional noise.
    pub noise_sigma: f64,
}

impl ShiftSpec {
    pub fn none(noise_sigma: f64) -> Self {
        Self {
            rotation_angle: 0.0,
            mean_translation: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class_source: usize,
    pub target_stream_length: usize,
    /// Distance between any two class means, in units of `noise_sigma`.
    pub class_separation: f64,
    pub shift: ShiftSpec,
    /// Zipf exponent of the target class frequencies; 0 is balanced.
    pub imbalance_exponent: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// The pinned desk-scale benchmark used by the acceptance suite.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            num_classes: 10,
            feature_dim: 32,
            samples_per_class_source: 200,
            target_stream_length: 2000,
            class_separation: 5.0,
            shift: ShiftSpec {
                rotation_angle: 0.5,
                mean_translation: 6.0,
                scale_min: 0.7,
                scale_max: 1.3,
                noise_sigma: 0.8,
            },
            imbalance_exponent: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return Err(Error::TooFewClasses(self.num_classes));
        }
        if self.feature_dim < 2 {
            return bad(format!("feature_dim must be >= 2, got {}", self.feature_dim));
        }
        if self.num_classes > self.feature_dim {
            return bad(format!(
                "{} classes cannot have mutually orthogonal means in {} dimensions",
                self.num_classes, self.feature_dim
            ));
        }
        if self.samples_per_class_source == 0 {
            return bad("samples_per_class_source must be positive".into());
        }
        let s = &self.shift;
        let finite = [
            s.rotation_angle,
            s.mean_translation,
            s.scale_min,
            s.scale_max,
            s.noise_sigma,
            self.class_separation,
            self.imbalance_exponent,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("task magnitudes must be finite".into());
        }
        if s.noise_sigma <= 0.0 {
            return bad(format!("noise_sigma must be positive, got {}", s.noise_sigma));
        }
        if s.scale_min <= 0.0 || s.scale_max < s.scale_min {
            return bad(format!(
                "scale range [{}, {}] must be positive and ordered",
                s.scale_min, s.scale_max
            ));
        }
        if self.class_separation < 2.0 {
            return bad(format!(
                "class_separation must be >= 2 (noise units), got {}",
                self.class_separation
            ));
        }
        if self.imbalance_exponent < 0.0 {
            return bad("imbalance_exponent must be >= 0".into());
        }
        Ok(())
    }
}

/// Features with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::Shape("labeled set is empty".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Shape(format!(
                "label {} at row {i} outside [0, {num_classes})",
                labels[i]
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Ordered unlabeled target samples. Labels are held back for scoring and
/// are not reachable through [`TargetStream::batches`].
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStream {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl TargetStream {
    pub fn from_labeled(set: LabeledSet) -> Self {
        Self {
            features: set.features,
            labels: set.labels,
            num_classes: set.num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Feature batches in stream order; the last batch may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Matrix> + '_ {
        let n = self.len();
        let bs = batch_size.max(1);
        (0..n.div_ceil(bs)).map(move |b| self.features.slice_rows(b * bs, ((b + 1) * bs).min(n)))
    }

    /// Ground-truth labels, for scoring only.
    pub fn scoring_labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> TargetStream {
        let n = n.min(self.len());
        TargetStream {
            features: self.features.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn to_labeled(&self) -> LabeledSet {
        LabeledSet {
            features: self.features.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Zipf class frequencies `p_k ∝ (k + 1)^-s`.
pub fn zipf_frequencies(num_classes: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=num_classes).map(|k| (k as f64).powf(-exponent)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Integer counts summing to `total` proportional to `freqs`
/// (largest-remainder apportionment, ties to the lower index).
pub fn apportion(freqs: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = freqs.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `count` orthonormal vectors in `dim` dimensions via Gram-Schmidt.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// The affine map taking source features into the target domain:
/// rotate in the plane `(p, q)`, scale each feature, then translate.
#[derive(Debug, Clone)]
struct DomainShift {
    p: Vec<f64>,
    q: Vec<f64>,
    cos: f64,
    sin: f64,
    scale: Vec<f64>,
    translation: Vec<f64>,
}

impl DomainShift {
    fn sample(rng: &mut ChaCha8Rng, dim: usize, s: &ShiftSpec) -> Self {
        let plane = orthonormal(rng, 2, dim);
        let scale = (0..dim)
            .map(|_| {
                if s.scale_max > s.scale_min {
                    rng.random_range(s.scale_min..s.scale_max)
                } else {
                    s.scale_min
                }
            })
            .collect();
        let dir = orthonormal(rng, 1, dim).remove(0);
        Self {
            p: plane[0].clone(),
            q: plane[1].clone(),
            cos: s.rotation_angle.cos(),
            sin: s.rotation_angle.sin(),
            scale,
            translation: dir.iter().map(|d| d * s.mean_translation).collect(),
        }
    }

    fn apply(&self, x: &mut [f64]) {
        let a = dot(x, &self.p);
        let b = dot(x, &self.q);
        // components along p and q rotate; the orthogonal complement is untouched
        let na = self.cos * a - self.sin * b;
        let nb = self.sin * a + self.cos * b;
        let parts = self.p.iter().zip(&self.q).zip(self.scale.iter().zip(&self.translation));
        for (xi, ((p, q), (s, t))) in x.iter_mut().zip(parts) {
            *xi += (na - a) * p + (nb - b) * q;
            *xi = *xi * s + t;
        }
    }
}

/// Generates a labeled source set and a shifted, imbalanced target stream.
///
/// Class means are mutually orthogonal with pairwise distance
/// `class_separation * noise_sigma`.
pub fn gen_task(spec: &SyntheticTaskSpec) -> Result<(LabeledSet, TargetStream)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes;
    let d = spec.feature_dim;
    let sigma = spec.shift.noise_sigma;
    let radius = spec.class_separation * sigma / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = orthonormal(&mut rng, c, d)
        .into_iter()
        .map(|u| u.into_iter().map(|v| v * radius).collect())
        .collect();

    let sample = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
        means[k]
            .iter()
            .map(|m| {
                let g: f64 = StandardNormal.sample(rng);
                m + sigma * g
            })
            .collect()
    };

    let mut source_labels: Vec<usize> = (0..c)
        .flat_map(|k| std::iter::repeat_n(k, spec.samples_per_class_source))
        .collect();
    source_labels.shuffle(&mut rng);
    let mut source_x = Matrix::zeros(source_labels.len(), d);
    for (i, &k) in source_labels.iter().enumerate() {
        let x = sample(&mut rng, k);
        source_x.row_mut(i).copy_from_slice(&x);
    }

    let shift = DomainShift::sample(&mut rng, d, &spec.shift);
    // which classes are frequent is itself random
    let mut rank: Vec<usize> = (0..c).collect();
    rank.shuffle(&mut rng);
    let counts = apportion(
        &zipf_frequencies(c, spec.imbalance_exponent),
        spec.target_stream_length,
    );
    let mut target_labels: Vec<usize> = Vec::with_capacity(spec.target_stream_length);
    for (r, &n) in counts.iter().enumerate() {
        target_labels.extend(std::iter::repeat_n(rank[r], n));
    }
    target_labels.shuffle(&mut rng);
    let mut target_x = Matrix::zeros(target_labels.len(), d);
    for (i, &k) in target_labels.iter().enumerate() {
        let mut x = sample(&mut rng, k);
        shift.apply(&mut x);
        target_x.row_mut(i).copy_from_slice(&x);
    }

    let source = LabeledSet {
        features: source_x,
        labels: source_labels,
        num_classes: c,
    };
    let target = TargetStream {
        features: target_x,
        labels: target_labels,
        num_classes: c,
    };
    Ok((source, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the source set held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSource {
    pub network: Network,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .iter_rows()
        .zip(labels)
        .filter(|(z, &l)| argmax_slice(z) == l)
        .count();
    correct as f64 / labels.len() as f64
}

/// Supervised cross-entropy training of every parameter with momentum SGD.
///
/// The source set is split 80/20 (by default) into train and validation
/// after a seeded shuffle. Forward passes use batch statistics and fold them
/// into the running statistics; validation uses running statistics.
pub fn train_source(arch: &ArchSpec, source: &LabeledSet, cfg: &TrainConfig) -> Result<TrainedSource> {
    if arch.input_dim != source.dim() {
        return Err(Error::Shape(format!(
            "architecture expects {} features, source set has {}",
            arch.input_dim,
            source.dim()
        )));
    }
    if arch.num_classes != source.num_classes {
        return Err(Error::Shape(format!(
            "architecture has {} classes, source set has {}",
            arch.num_classes, source.num_classes
        )));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::InvalidConfig(format!(
            "val_fraction must lie in [0, 1), got {}",
            cfg.val_fraction
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::BatchTooSmall(cfg.batch_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::init(arch, rng.random())?;

    let mut idx: Vec<usize> = (0..source.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = (source.len() as f64 * cfg.val_fraction).round() as usize;
    let (val_idx, train_idx) = idx.split_at(n_val);
    let train = source.subset(train_idx);
    let val = source.subset(val_idx);

    let mut opt = NetworkOptimizer::new(&net, ParamMask::ALL, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.subset(chunk);
            let (logits, trace) = net.forward(&batch.features, NormMode::BatchStats)?;
            let mut grad = Matrix::zeros(logits.rows(), logits.cols());
            for (i, (z, &l)) in logits.iter_rows().zip(&batch.labels).enumerate() {
                total += logsumexp(z) - z[l];
                let mut g = softmax_slice(z);
                g[l] -= 1.0;
                grad.row_mut(i).copy_from_slice(&g);
            }
            seen += chunk.len();
            let grads = net.backward(&trace, &grad, ParamMask::ALL)?;
            opt.step(&mut net, &grads)?;
            net.update_running_stats(&trace)?;
        }
        final_loss = total / seen.max(1) as f64;
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: final_loss,
            });
        }
    }
    let val_accuracy = if val.is_empty() {
        f64::NAN
    } else {
        accuracy(&net.predict_logits(&val.features)?, &val.labels)
    };
    Ok(TrainedSource {
        network: net,
        val_accuracy,
        final_loss,
    })
}

/// Reads `label,f0,f1,...` CSV. When `num_classes` is `None` it is inferred
/// as one more than the largest label.
pub fn load_feature_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabeledSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text, path, num_classes)
}

pub fn parse_feature_csv(text: &str, path: &Path, num_classes: Option<usize>) -> Result<LabeledSet> {
    let err = |row: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let Some((_, header)) = lines.next() else {
        return Err(Error::NoDataRows {
            path: path.to_path_buf(),
        });
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(err(1, "header must start with \"label\"".into()));
    }
    let dim = cols.len() - 1;
    if dim == 0 {
        return Err(err(1, "header declares no feature columns".into()));
    }
    for (j, name) in cols[1..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(err(1, format!("feature column {j} must be named f{j}, found {name:?}")));
        }
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (row, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim + 1 {
            return Err(err(
                row,
                format!("expected {} features, found {}", dim, cells.len() - 1),
            ));
        }
        let label: usize = cells[0]
            .parse()
            .map_err(|_| err(row, format!("label {:?} is not a non-negative integer", cells[0])))?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(err(row, format!("label {label} outside [0, {c})")));
            }
        }
        labels.push(label);
        for (j, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(row, format!("f{j} = {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(err(row, format!("f{j} = {cell:?} is not finite")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::NoDataRows {
            path: path.to_path_buf(),
        });
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Matrix::from_vec(labels.len(), dim, data)?;
    Ok(LabeledSet {
        features,
        labels,
        num_classes: c,
    })
}

/// Writes `set` in the format read by [`load_feature_csv`]. Values use the
/// shortest representation that parses back to the identical `f64`.
pub fn dump_feature_csv(set: &LabeledSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_feature_csv(set)).map_err(|e| Error::io(path, e))
}

pub fn format_feature_csv(set: &LabeledSet) -> String {
    let mut out = String::from("label");
    for j in 0..set.dim() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (row, &label) in set.features.iter_rows().zip(&set.labels) {
        let _ = write!(out, "{label}");
        for v in row {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_classes: 4,
            feature_dim: 8,
            samples_per_class_source: 50,
            target_stream_length: 203,
            class_separation: 4.0,
            shift: ShiftSpec::none(0.5),
            imbalance_exponent: 0.0,
            seed,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_task(&small_spec(3)).unwrap();
        let b = gen_task(&small_spec(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, gen_task(&small_spec(4)).unwrap().0);
        assert_eq!(format_feature_csv(&a.0), format_feature_csv(&b.0));
    }

    #[test]
    fn balanced_counts_differ_by_at_most_one() {
        let (_, t) = gen_task(&small_spec(1)).unwrap();
        let h = t.to_labeled().class_histogram();
        assert_eq!(h.iter().sum::<usize>(), 203);
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
    }

    #[test]
    fn class_means_are_separated() {
        let spec = small_spec(2);
        let (s, _) = gen_task(&spec).unwrap();
        let mut means = vec![vec![0.0; spec.feature_dim]; spec.num_classes];
        let hist = s.class_histogram();
        for (row, &l) in s.features.iter_rows().zip(&s.labels) {
            for (m, v) in means[l].iter_mut().zip(row) {
                *m += v / hist[l] as f64;
            }
        }
        let sep = spec.class_separation * spec.shift.noise_sigma;
        for a in 0..spec.num_classes {
            for b in a + 1..spec.num_classes {
                let d: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                // empirical means of 50 samples wobble around the true distance
                assert!((d - sep).abs() < 0.3 * sep, "{d} vs {sep}");
                assert!(d >= 2.0 * spec.shift.noise_sigma);
            }
        }
    }

    #[test]
    fn too_many_classes_rejected() {
        let mut spec = small_spec(0);
        spec.num_classes = 9;
        assert!(gen_task(&spec).is_err());
    }

    #[test]
    fn apportion_matches_totals() {
        let f = zipf_frequencies(10, 1.0);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let c = apportion(&f, 2000);
        assert_eq!(c.iter().sum::<usize>(), 2000);
        for (ci, fi) in c.iter().zip(&f) {
            assert!((*ci as f64 - fi * 2000.0).abs() < 1.0);
        }
        assert_eq!(apportion(&zipf_frequencies(3, 0.0), 10), vec![4, 3, 3]);
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let (s, _) = gen_task(&small_spec(5)).unwrap();
        let arch = ArchSpec::new(8, vec![6], 4);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 11,
            ..TrainConfig::default()
        };
        let trained = train_source(&arch, &s, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init = Network::init(&arch, rng.random()).unwrap();
        assert_eq!(trained.network, init);
    }

    #[test]
    fn divergence_is_reported() {
        let (s, _) = gen_task(&small_spec(5)).unwrap();
        let arch = ArchSpec::new(8, vec![6], 4);
        let cfg = TrainConfig {
            epochs: 5,
            lr: 1e300,
            ..TrainConfig::default()
        };
        let err = train_source(&arch, &s, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn csv_two_rows() {
        let set = parse_feature_csv("label,f0,f1\n0,1.0,2.0\n1,3.0,4.0\n", Path::new("t.csv"), None)
            .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.class_histogram(), vec![1, 1]);
        assert_eq!(set.features.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn csv_diagnostics() {
        let p = Path::new("feat.csv");
        let e = parse_feature_csv("", p, None).unwrap_err();
        assert!(e.to_string().contains("no data rows"), "{e}");
        let e = parse_feature_csv("label,f0,f1\n", p, None).unwrap_err();
        assert!(e.to_string().contains("no data rows"), "{e}");

        let e = parse_feature_csv("label,f0,f1\n0,1,2\n1,1,2,3\n", p, None).unwrap_err();
        assert!(matches!(e, Error::Csv { row: 3, .. }), "{e}");
        assert!(e.to_string().contains("row 3"));

        let e = parse_feature_csv("label,f0\n0,abc\n", p, None).unwrap_err();
        assert!(matches!(e, Error::Csv { row: 2, .. }), "{e}");
        let e = parse_feature_csv("label,f0\nx,1\n", p, None).unwrap_err();
        assert!(matches!(e, Error::Csv { row: 2, .. }), "{e}");
        let e = parse_feature_csv("label,f0\n0,1\n3,1\n", p, Some(3)).unwrap_err();
        assert!(e.to_string().contains("outside [0, 3)"), "{e}");
        let e = parse_feature_csv("lbl,f0\n0,1\n", p, None).unwrap_err();
        assert!(matches!(e, Error::Csv { row: 1, .. }), "{e}");
    }

    #[test]
    fn stream_batches_cover_in_order() {
        let (_, t) = gen_task(&small_spec(6)).unwrap();
        let sizes: Vec<usize> = t.batches(32).map(|b| b.rows()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 32, 32, 32, 11]);
        let first = t.batches(32).next().unwrap();
        assert_eq!(first.row(0), t.to_labeled().features.row(0));
    }
}

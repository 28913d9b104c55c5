//! WebAssembly front end for the static page in `www/`.
//!
//! Each export takes plain numbers and returns a JSON string, so the page
//! needs no generated type bindings. The same functions are callable from
//! native code, which is how they are tested.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use lscd_tta::benchgen::{train_source, TrainConfig};
use lscd_tta::losses::BaselineKind;
use lscd_tta::{
    gen_task, run_episode, ArchSpec, LossChoice, LossWeights, NormMode, Objective, ShiftSpec,
    SyntheticTaskSpec, TTAConfig,
};

fn objective(name: &str, w: LossWeights) -> Result<Objective, String> {
    let only = |a, b, t| {
        Objective::lscd(LossWeights {
            alpha: a,
            beta: b,
            tau: t,
            epsilon: w.epsilon,
        })
    };
    Ok(match name {
        "lscd" => Objective::lscd(w),
        "wcse" => only(1.0, 0.0, 0.0),
        "bcse" => only(0.0, 1.0, 0.0),
        "lsd" => only(0.0, 0.0, 1.0),
        "entropy" => Objective::baseline(BaselineKind::Entropy),
        other => return Err(format!("unknown loss {other:?}")),
    })
}

fn weights(alpha: f64, beta: f64, tau: f64, epsilon: f64) -> Result<LossWeights, String> {
    let w = LossWeights {
        alpha,
        beta,
        tau,
        epsilon,
    };
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

#[derive(Serialize)]
struct Curve {
    name: &'static str,
    value: Vec<f64>,
    /// `|dL/dz|` for the first logit.
    grad: Vec<f64>,
}

#[derive(Serialize)]
struct Curves {
    z: Vec<f64>,
    curves: Vec<Curve>,
}

/// Loss value and logit-gradient magnitude for two-class logits `(z, 0)`,
/// `z` from 0 to `z_max`.
pub fn loss_curves_json(z_max: f64, points: usize, epsilon: f64) -> Result<String, String> {
    if !(z_max > 0.0 && z_max.is_finite()) || !(2..=10_000).contains(&points) {
        return Err("need z_max > 0 and 2..=10000 points".into());
    }
    let w = weights(0.25, 1.0, 1.5, epsilon)?;
    let z: Vec<f64> = (0..points)
        .map(|i| z_max * i as f64 / (points - 1) as f64)
        .collect();
    let curves = ["entropy", "wcse", "bcse", "lsd", "lscd"]
        .into_iter()
        .map(|name| {
            let obj = objective(name, w).expect("known loss");
            let evals: Vec<_> = z.iter().map(|&v| obj.evaluate(&[v, 0.0])).collect();
            Curve {
                name,
                value: evals.iter().map(|e| e.value).collect(),
                grad: evals.iter().map(|e| e.grad_logits[0].abs()).collect(),
            }
        })
        .collect();
    Ok(serde_json::to_string(&Curves { z, curves }).expect("curves serialize"))
}

#[derive(Serialize)]
struct Landscape {
    resolution: usize,
    /// `values[i][j]` is the loss at `y = (i, j, resolution - i - j) / resolution`.
    values: Vec<Vec<f64>>,
    min: f64,
    max: f64,
}

/// The loss over a triangular grid of the three-class simplex.
pub fn simplex_landscape_json(
    loss: &str,
    resolution: usize,
    alpha: f64,
    beta: f64,
    tau: f64,
    epsilon: f64,
) -> Result<String, String> {
    if !(2..=400).contains(&resolution) {
        return Err("resolution must lie in 2..=400".into());
    }
    let obj = objective(loss, weights(alpha, beta, tau, epsilon)?)?;
    let r = resolution as f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let values: Vec<Vec<f64>> = (0..=resolution)
        .map(|i| {
            (0..=resolution - i)
                .map(|j| {
                    let k = resolution - i - j;
                    // log-probabilities as logits; the engine floors at 1e-7
                    let z: Vec<f64> = [i, j, k]
                        .iter()
                        .map(|&n| (n as f64 / r).max(1e-12).ln())
                        .collect();
                    let v = obj.evaluate(&z).value;
                    min = min.min(v);
                    max = max.max(v);
                    v
                })
                .collect()
        })
        .collect();
    Ok(serde_json::to_string(&Landscape {
        resolution,
        values,
        min,
        max,
    })
    .expect("landscape serializes"))
}

#[derive(Serialize)]
struct MethodRun {
    name: String,
    /// Cumulative online accuracy after each batch.
    cumulative: Vec<f64>,
    accuracy: f64,
}

#[derive(Serialize)]
struct EpisodeReport {
    source_accuracy: f64,
    methods: Vec<MethodRun>,
}

/// Trains a small source model on a synthetic task, then runs the frozen
/// model, BN re-estimation, entropy and the composite loss on the same
/// shifted stream.
pub fn demo_episode_json(
    seed: u64,
    translation: f64,
    learning_rate: f64,
    batch_size: usize,
) -> Result<String, String> {
    let spec = SyntheticTaskSpec {
        num_classes: 6,
        feature_dim: 16,
        samples_per_class_source: 120,
        target_stream_length: 1200,
        class_separation: 5.0,
        shift: ShiftSpec {
            mean_translation: translation,
            ..SyntheticTaskSpec::acceptance(seed).shift
        },
        imbalance_exponent: 1.0,
        seed,
    };
    let (source, stream) = gen_task(&spec).map_err(|e| e.to_string())?;
    let trained = train_source(
        &ArchSpec::new(16, vec![32, 32], 6),
        &source,
        &TrainConfig {
            epochs: 15,
            seed,
            ..TrainConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let base = TTAConfig {
        learning_rate,
        batch_size,
        ..TTAConfig::default()
    };
    base.validate().map_err(|e| e.to_string())?;
    let runs = [
        ("frozen", LossChoice::None, NormMode::RunningStats),
        ("bn_adapt", LossChoice::None, NormMode::BatchStats),
        ("entropy", LossChoice::Entropy, NormMode::BatchStats),
        ("lscd", LossChoice::Lscd, NormMode::BatchStats),
    ];
    let mut methods = Vec::new();
    for (name, loss, norm) in runs {
        let cfg = TTAConfig {
            loss,
            norm,
            ..base.clone()
        };
        let ep = run_episode(&trained.network, &stream, &cfg).map_err(|e| e.to_string())?;
        let mut correct = 0;
        let mut seen = 0;
        let cumulative = ep
            .records
            .iter()
            .map(|r| {
                correct += r.correct;
                seen += r.size;
                correct as f64 / seen as f64
            })
            .collect();
        methods.push(MethodRun {
            name: name.to_string(),
            cumulative,
            accuracy: ep.cumulative_accuracy,
        });
    }
    Ok(serde_json::to_string(&EpisodeReport {
        source_accuracy: trained.val_accuracy,
        methods,
    })
    .expect("report serializes"))
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn loss_curves(z_max: f64, points: usize, epsilon: f64) -> Result<String, JsError> {
    js(loss_curves_json(z_max, points, epsilon))
}

#[wasm_bindgen]
pub fn simplex_landscape(
    loss: &str,
    resolution: usize,
    alpha: f64,
    beta: f64,
    tau: f64,
    epsilon: f64,
) -> Result<String, JsError> {
    js(simplex_landscape_json(loss, resolution, alpha, beta, tau, epsilon))
}

#[wasm_bindgen]
pub fn demo_episode(
    seed: u32,
    translation: f64,
    learning_rate: f64,
    batch_size: usize,
) -> Result<String, JsError> {
    js(demo_episode_json(seed as u64, translation, learning_rate, batch_size))
}

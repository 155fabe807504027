//! Evaluation harness: train fresh student networks on a synthesized (or
//! real-subset) dataset and report test accuracy over several seeds.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, AugPolicy};
use crate::data::DatasetStore;
use crate::error::{Error, Result};
use crate::expert::{accuracy, Trajectory};
use crate::labels::softmax_vec;
use crate::lowrank::{synthesize_all, ImageTensor, StoragePlan};
use crate::matcher::{distill, init_state, init_state_pixel, DistillState, MatchConfig};
use crate::models::{forward, init_params, ConvNetSpec};
use crate::nn::{grad_values, soft_cross_entropy_mean};
use crate::schedule::ScheduleConfig;
use crate::tape::Tape;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub policy: AugPolicy,
}

impl EvalConfig {
    /// Five-seed evaluation at full scale.
    pub fn full(h: usize, channels: usize) -> Self {
        EvalConfig {
            epochs: 300,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            seeds: vec![0, 1, 2, 3, 4],
            policy: base_policy(h, channels),
        }
    }

    /// Shorter training for the small generated dataset.
    pub fn desk() -> Self {
        EvalConfig { epochs: 100, ..EvalConfig::full(28, 1) }
    }
}

fn base_policy(h: usize, channels: usize) -> AugPolicy {
    if channels > 1 {
        AugPolicy::default_color(h)
    } else {
        AugPolicy::default_gray(h)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub wall_seconds: f64,
    pub config: EvalConfig,
}

fn summarize(accuracies: Vec<f64>, wall: f64, config: EvalConfig) -> EvalReport {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    EvalReport { accuracies, mean, std: var.sqrt(), wall_seconds: wall, config }
}

fn stack(images: &[ImageTensor]) -> ArrayD<f64> {
    let (c, h, w) = images[0].shape();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img.data);
    }
    out
}

/// Train one fresh network on a fixed image set with (possibly soft)
/// target rows. SGD with momentum and per-epoch cosine learning-rate
/// decay.
fn train_student(
    spec: &ConvNetSpec,
    images: &[ImageTensor],
    targets: &Array2<f64>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Array1<f64>> {
    if images.is_empty() {
        return Err(Error::Data("evaluation training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = init_params(spec, seed ^ 0xC2B2_AE35).flat;
    let mut velocity: Array1<f64> = Array1::zeros(theta.len());
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<ImageTensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch = if cfg.policy.ops.is_empty() {
                batch
            } else {
                augment(&batch, &cfg.policy, rng.gen())?
            };
            let mut tgt = ArrayD::zeros(IxDyn(&[chunk.len(), targets.ncols()]));
            for (row, &i) in chunk.iter().enumerate() {
                tgt.index_axis_mut(Axis(0), row).assign(&targets.row(i));
            }
            let mut t = Tape::new();
            let tv = t.leaf(theta.clone().into_dyn());
            let x = t.leaf(stack(&batch));
            let y = t.leaf(tgt);
            let logits = forward(&mut t, spec, tv, x);
            let loss = soft_cross_entropy_mean(&mut t, logits, y);
            let loss_val = t.value(loss)[[]];
            if !loss_val.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    detail: format!("student loss became {loss_val}"),
                });
            }
            let g = grad_values(&mut t, loss, &[tv]).pop().unwrap();
            let g = g.into_dimensionality::<ndarray::Ix1>().unwrap();
            velocity = velocity * cfg.momentum + &g;
            theta = theta - &(&velocity * lr);
        }
    }
    Ok(theta)
}

/// Evaluate a distilled state: synthesize every image, soften the label
/// logits and train one student per seed.
pub fn evaluate_state(
    state: &DistillState,
    spec: &ConvNetSpec,
    test: &DatasetStore,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let images = synthesize_all(&state.dataset)?;
    let n = images.len();
    let classes = state.labels.num_classes();
    let mut targets = Array2::zeros((n, classes));
    for i in 0..n {
        let row = softmax_vec(state.labels.logits.row(i).as_slice().unwrap());
        targets.row_mut(i).assign(&Array1::from_vec(row));
    }
    evaluate_images(&images, &targets, spec, test, cfg)
}

/// Evaluate an explicit image/target set.
pub fn evaluate_images(
    images: &[ImageTensor],
    targets: &Array2<f64>,
    spec: &ConvNetSpec,
    test: &DatasetStore,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    let start = Instant::now();
    let mut accs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let theta = train_student(spec, images, targets, cfg, seed)?;
        accs.push(accuracy(spec, &theta, test));
    }
    Ok(summarize(accs, start.elapsed().as_secs_f64(), cfg.clone()))
}

/// Baseline: ipc real images per class with one-hot labels, trained and
/// scored the same way.
pub fn baseline_random_subset(
    train: &DatasetStore,
    test: &DatasetStore,
    spec: &ConvNetSpec,
    ipc: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..train.num_classes {
        let mut pool = train.class_indices(class);
        if pool.len() < ipc {
            return Err(Error::Data(format!(
                "class {class} has only {} samples, ipc is {ipc}",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        for &idx in pool.iter().take(ipc) {
            images.push(ImageTensor {
                data: train.images.index_axis(Axis(0), idx).to_owned(),
            });
            labels.push(class);
        }
    }
    let mut targets = Array2::zeros((images.len(), train.num_classes));
    for (i, &l) in labels.iter().enumerate() {
        targets[[i, l]] = 1.0;
    }
    evaluate_images(&images, &targets, spec, test, cfg)
}

/// One ablation row: which components are enabled and what they scored.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub soft_labels: bool,
    pub progressive: bool,
    pub lowrank: bool,
    pub mean: f64,
    pub std: f64,
}

/// All eight on/off combinations of soft labels, the progressive start
/// schedule and the low-rank parameterization, each distilled from
/// scratch and evaluated. Row order: (off,off,off) first, all-on last.
#[allow(clippy::too_many_arguments)]
pub fn ablation_grid(
    train: &DatasetStore,
    test: &DatasetStore,
    plan: &StoragePlan,
    spec: &ConvNetSpec,
    buffer: &[Trajectory],
    match_cfg: &MatchConfig,
    eval_cfg: &EvalConfig,
    init_scheme: crate::lowrank::InitScheme,
    seed: u64,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(8);
    for bits in 0..8u8 {
        let soft = bits & 0b100 != 0;
        let progressive = bits & 0b010 != 0;
        let lowrank = bits & 0b001 != 0;
        let mut state = if lowrank {
            init_state(
                train,
                plan,
                init_scheme,
                crate::labels::LabelInit::RoundRobinSmoothed,
                match_cfg.alpha_init,
                seed,
            )?
        } else {
            init_state_pixel(train, plan.ipc, match_cfg.alpha_init, seed)?
        };
        if !soft {
            // hard labels: sharp one-hot logits frozen by a zero rate
            let classes = state.labels.num_classes();
            for (i, mut row) in state.labels.logits.rows_mut().into_iter().enumerate() {
                let class = if lowrank {
                    i % classes
                } else {
                    row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
                };
                row.fill(0.0);
                row[class] = 10.0;
            }
        }
        let cfg = MatchConfig {
            lr_labels: if soft { match_cfg.lr_labels } else { 0.0 },
            schedule: ScheduleConfig { progressive, ..match_cfg.schedule },
            ..match_cfg.clone()
        };
        distill(&mut state, spec, buffer, &cfg, None, |_| {})?;
        let report = evaluate_state(&state, spec, test, eval_cfg)?;
        let row = AblationRow {
            soft_labels: soft,
            progressive,
            lowrank,
            mean: report.mean,
            std: report.std,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

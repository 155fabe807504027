//! Trajectory matching: unroll N differentiable student SGD steps on the
//! synthesized images and push the endpoint toward an expert snapshot M
//! epochs downstream, backpropagating into mappers, basis blocks, soft
//! labels and the student step size.

use std::path::Path;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_var, AugPolicy};
use crate::container;
use crate::data::DatasetStore;
use crate::error::{Error, Result};
use crate::expert::{sample_expert, Trajectory};
use crate::labels::{init_labels, LabelBank, LabelInit};
use crate::lowrank::{
    init_dataset, BasisBlock, DatasetMeta, InitScheme, MapperSet, StoragePlan, SyntheticDataset,
};
use crate::models::ConvNetSpec;
use crate::nn::{
    scale_by_scalar_var, soft_cross_entropy_mean, softmax, squared_distance,
};
use crate::schedule::{sample_start, ScheduleConfig};
use crate::tape::{grad, Tape, Var};

/// Guard against a meaningless normalizer when expert start and target
/// nearly coincide.
pub const DEGENERATE_DENOM: f64 = 1e-12;
/// Meta-gradients above this global norm are rescaled onto the sphere.
pub const GRAD_CLIP: f64 = 1e4;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MatchConfig {
    /// Student SGD steps per meta-iteration (N).
    pub student_steps: usize,
    /// Expert epochs the student endpoint must reach (M).
    pub expert_steps: usize,
    /// Synthetic images per inner step; 0 picks min(images, 64).
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_mappers: f64,
    pub lr_basis: f64,
    pub lr_labels: f64,
    pub lr_alpha: f64,
    /// Initial student step size; optimized in log space when
    /// `learn_alpha` is set.
    pub alpha_init: f64,
    pub learn_alpha: bool,
    pub schedule: ScheduleConfig,
    pub policy: AugPolicy,
    pub seed: u64,
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.student_steps == 0 || self.expert_steps == 0 {
            return Err(Error::Config(
                "student_steps and expert_steps must be >= 1".into(),
            ));
        }
        if self.alpha_init <= 0.0 {
            return Err(Error::Config("alpha_init must be positive".into()));
        }
        for (name, lr) in [
            ("lr_mappers", self.lr_mappers),
            ("lr_basis", self.lr_basis),
            ("lr_labels", self.lr_labels),
            ("lr_alpha", self.lr_alpha),
        ] {
            if lr < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub start_epoch: usize,
    pub loss: f64,
    pub alpha: f64,
    pub grad_norm: f64,
}

/// Everything the meta-optimizer mutates.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub dataset: SyntheticDataset,
    pub labels: LabelBank,
    pub log_alpha: f64,
    pub iteration: usize,
    /// Identity mappers held fixed; only basis blocks (raw pixels) move.
    pub pixel_mode: bool,
    pub loss_history: Vec<LossRecord>,
    pub clip_events: usize,
    sample_order: Vec<usize>,
    sample_cursor: usize,
}

impl DistillState {
    pub fn new(dataset: SyntheticDataset, labels: LabelBank, alpha_init: f64) -> Self {
        let n = dataset.meta.images();
        DistillState {
            dataset,
            labels,
            log_alpha: alpha_init.ln(),
            iteration: 0,
            pixel_mode: false,
            loss_history: Vec::new(),
            clip_events: 0,
            sample_order: (0..n).collect(),
            sample_cursor: n, // force a shuffle before the first draw
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Next batch without replacement, reshuffling on exhaustion.
    fn draw_batch<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let n = self.sample_order.len();
        let size = size.min(n);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.sample_cursor >= n {
                self.sample_order.shuffle(rng);
                self.sample_cursor = 0;
            }
            out.push(self.sample_order[self.sample_cursor]);
            self.sample_cursor += 1;
        }
        out
    }
}

/// Build the initial state from real data per the storage plan. For the
/// svd_real scheme the source image for basis block j is drawn from the
/// class j mod num_classes, so content agrees with the round-robin label
/// assignment from the start.
pub fn init_state(
    train: &DatasetStore,
    plan: &StoragePlan,
    scheme: InitScheme,
    label_scheme: LabelInit,
    alpha_init: f64,
    seed: u64,
) -> Result<DistillState> {
    let dataset = match scheme {
        InitScheme::Random => init_dataset(train, plan, scheme, seed)?,
        InitScheme::SvdReal => {
            use crate::lowrank::{project_into, truncated_svd, ImageSource};
            let meta = plan.meta();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pools: Vec<Vec<usize>> = (0..meta.num_classes)
                .map(|c| train.class_indices(c))
                .collect();
            for pool in pools.iter_mut() {
                pool.shuffle(&mut rng);
            }
            let mut cursors = vec![0usize; meta.num_classes];
            let mut draw = |class: usize| -> Result<crate::lowrank::ImageTensor> {
                let pool = &pools[class];
                if cursors[class] >= pool.len() {
                    return Err(Error::Data(format!(
                        "class {class} has too few distinct images for initialization"
                    )));
                }
                let img = train.image(pool[cursors[class]]);
                cursors[class] += 1;
                Ok(img)
            };
            let mut mappers = Vec::with_capacity(meta.k);
            let mut basis = Vec::with_capacity(meta.images());
            for id in 0..meta.k {
                let src = draw(id % meta.num_classes)?;
                let svd = truncated_svd(&src, meta.r)?;
                mappers.push(MapperSet { id, u: svd.u, vt: svd.vt });
            }
            for j in 0..meta.images() {
                let x = draw(j % meta.num_classes)?;
                basis.push(BasisBlock {
                    mapper_id: j / meta.m,
                    sigma: project_into(&mappers[j / meta.m], &x),
                });
            }
            SyntheticDataset { mappers, basis, meta }
        }
    };
    let labels = init_labels(plan, label_scheme, seed ^ 0xA5A5_5A5A);
    Ok(DistillState::new(dataset, labels, alpha_init))
}

/// Pixel-parameterization baseline: one frozen identity mapper, basis
/// blocks are the raw images. Needs square images. The image count is
/// the usual ipc budget; labels start as scaled one-hots.
pub fn init_state_pixel(
    train: &DatasetStore,
    ipc: usize,
    alpha_init: f64,
    seed: u64,
) -> Result<DistillState> {
    let (c, h, w) = train.shape();
    if h != w {
        return Err(Error::Config(
            "pixel parameterization needs square images".into(),
        ));
    }
    let num_classes = train.num_classes;
    let meta = DatasetMeta { c, h, w, r: h, k: 1, m: ipc * num_classes, num_classes };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eye = Array3::zeros((c, h, h));
    for ch in 0..c {
        for i in 0..h {
            eye[[ch, i, i]] = 1.0;
        }
    }
    let mapper = MapperSet { id: 0, u: eye.clone(), vt: eye };
    let mut basis = Vec::with_capacity(meta.m);
    let mut logits = Array2::zeros((meta.m, num_classes));
    let mut row = 0usize;
    for class in 0..num_classes {
        let mut pool = train.class_indices(class);
        if pool.len() < ipc {
            return Err(Error::Data(format!(
                "class {class} has only {} samples, ipc is {ipc}",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        for &idx in pool.iter().take(ipc) {
            basis.push(BasisBlock {
                mapper_id: 0,
                sigma: train.images.index_axis(ndarray::Axis(0), idx).to_owned(),
            });
            logits[[row, class]] = 10.0;
            row += 1;
        }
    }
    let dataset = SyntheticDataset { mappers: vec![mapper], basis, meta };
    let mut state = DistillState::new(dataset, LabelBank { logits }, alpha_init);
    state.pixel_mode = true;
    Ok(state)
}

/// Normalized endpoint distance:
/// ‖θ_N − θ_target‖² / ‖θ_start − θ_target‖².
pub fn matching_loss(
    theta_n: &Array1<f64>,
    theta_start: &Array1<f64>,
    theta_target: &Array1<f64>,
) -> Result<f64> {
    let num = (theta_n - theta_target).mapv(|v| v * v).sum();
    let den = (theta_start - theta_target).mapv(|v| v * v).sum();
    if den < DEGENERATE_DENOM {
        return Err(Error::Degenerate(format!(
            "expert start and target are {den:.3e} apart; matching loss undefined"
        )));
    }
    Ok(num / den)
}

/// Gradients of one meta-loss evaluation, grouped by parameter family.
#[derive(Clone, Debug)]
pub struct MetaGrads {
    pub loss: f64,
    pub u: Vec<ArrayD<f64>>,
    pub vt: Vec<ArrayD<f64>>,
    pub sigma: Vec<ArrayD<f64>>,
    pub labels: ArrayD<f64>,
    pub log_alpha: f64,
}

impl MetaGrads {
    pub fn global_norm(&self) -> f64 {
        let mut acc = self.log_alpha * self.log_alpha;
        for g in self.u.iter().chain(self.vt.iter()).chain(self.sigma.iter()) {
            acc += g.iter().map(|v| v * v).sum::<f64>();
        }
        acc += self.labels.iter().map(|v| v * v).sum::<f64>();
        acc.sqrt()
    }

    fn scale(&mut self, s: f64) {
        for g in self.u.iter_mut().chain(self.vt.iter_mut()).chain(self.sigma.iter_mut()) {
            g.mapv_inplace(|v| v * s);
        }
        self.labels.mapv_inplace(|v| v * s);
        self.log_alpha *= s;
    }
}

struct UnrollLeaves {
    u: Vec<Var>,
    vt: Vec<Var>,
    sigma: Vec<Var>,
    labels: Var,
    log_alpha: Var,
}

fn plant_leaves(t: &mut Tape, state: &DistillState) -> UnrollLeaves {
    UnrollLeaves {
        u: state
            .dataset
            .mappers
            .iter()
            .map(|m| t.leaf(m.u.clone().into_dyn()))
            .collect(),
        vt: state
            .dataset
            .mappers
            .iter()
            .map(|m| t.leaf(m.vt.clone().into_dyn()))
            .collect(),
        sigma: state
            .dataset
            .basis
            .iter()
            .map(|b| t.leaf(b.sigma.clone().into_dyn()))
            .collect(),
        labels: t.leaf(state.labels.logits.clone().into_dyn()),
        log_alpha: t.leaf(ArrayD::from_elem(IxDyn(&[]), state.log_alpha)),
    }
}

/// Synthesize image j on the tape: per channel U·Σ·Vᵀ, stacked to
/// (1,C,H,W).
fn synth_var(t: &mut Tape, leaves: &UnrollLeaves, meta: &DatasetMeta, j: usize) -> Var {
    let mapper = j / meta.m;
    let (c, h, w, r) = (meta.c, meta.h, meta.w, meta.r);
    let mut channels = Vec::with_capacity(c);
    for ch in 0..c {
        let u = t.slice_axis(leaves.u[mapper], 0, ch, 1);
        let u = t.reshape(u, &[h, r]);
        let vt = t.slice_axis(leaves.vt[mapper], 0, ch, 1);
        let vt = t.reshape(vt, &[r, w]);
        let s = t.slice_axis(leaves.sigma[j], 0, ch, 1);
        let s = t.reshape(s, &[r, r]);
        let us = t.matmul(u, s);
        let plane = t.matmul(us, vt);
        channels.push(t.reshape(plane, &[1, 1, h, w]));
    }
    t.concat(&channels, 1)
}

/// The differentiable inner loop. Batches and augmentation seeds are
/// passed in explicitly so a caller can re-evaluate the identical loss
/// under finite-difference perturbations.
pub fn meta_loss_and_grads(
    state: &DistillState,
    spec: &ConvNetSpec,
    theta_start: &Array1<f64>,
    theta_target: &Array1<f64>,
    policy: &AugPolicy,
    batch_plan: &[Vec<usize>],
    aug_seeds: &[u64],
    compute_grads: bool,
) -> Result<MetaGrads> {
    state.dataset.check_invariants()?;
    if batch_plan.len() != aug_seeds.len() || batch_plan.is_empty() {
        return Err(Error::InvalidArgument(
            "batch plan and augmentation seeds must pair up, one per step".into(),
        ));
    }
    let den = (theta_start - theta_target).mapv(|v| v * v).sum();
    if den < DEGENERATE_DENOM {
        return Err(Error::Degenerate(format!(
            "expert start and target are {den:.3e} apart; matching loss undefined"
        )));
    }
    let meta = &state.dataset.meta;
    let mut t = Tape::new();
    let leaves = plant_leaves(&mut t, state);
    let alpha = t.exp(leaves.log_alpha);
    let mut theta = t.leaf(theta_start.clone().into_dyn());
    let theta_leaf = theta;

    for (step, (batch, &aug_seed)) in batch_plan.iter().zip(aug_seeds).enumerate() {
        if batch.is_empty() {
            return Err(Error::InvalidArgument(format!("empty batch at step {step}")));
        }
        let parts: Vec<Var> = batch.iter().map(|&j| synth_var(&mut t, &leaves, meta, j)).collect();
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            t.concat(&parts, 0)
        };
        let x = augment_var(&mut t, x, policy, aug_seed)?;
        let logits = crate::models::forward(&mut t, spec, theta, x);
        let rows = Rc::new(batch.clone());
        let label_rows = t.gather_rows(leaves.labels, rows);
        let targets = softmax(&mut t, label_rows);
        let loss = soft_cross_entropy_mean(&mut t, logits, targets);
        let g = grad(&mut t, loss, &[theta])[0];
        let step_vec = scale_by_scalar_var(&mut t, g, alpha);
        theta = t.sub(theta, step_vec);
        let cur = t.value(theta);
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "student parameters left the finite range".into(),
            });
        }
    }

    let target = t.leaf(theta_target.clone().into_dyn());
    let num = squared_distance(&mut t, theta, target);
    let mloss = t.scale(num, 1.0 / den);
    let loss_val = t.value(mloss)[[]];
    if !loss_val.is_finite() {
        return Err(Error::Divergence {
            step: batch_plan.len(),
            detail: format!("matching loss is {loss_val}"),
        });
    }
    if !compute_grads {
        return Ok(MetaGrads {
            loss: loss_val,
            u: Vec::new(),
            vt: Vec::new(),
            sigma: Vec::new(),
            labels: ArrayD::zeros(IxDyn(&[0])),
            log_alpha: 0.0,
        });
    }
    let mut wrt: Vec<Var> = Vec::new();
    wrt.extend(&leaves.u);
    wrt.extend(&leaves.vt);
    wrt.extend(&leaves.sigma);
    wrt.push(leaves.labels);
    wrt.push(leaves.log_alpha);
    let _ = theta_leaf;
    let gs = grad(&mut t, mloss, &wrt);
    let vals: Vec<ArrayD<f64>> = gs.iter().map(|&g| t.value(g).clone()).collect();
    let k = meta.k;
    let n_img = meta.images();
    Ok(MetaGrads {
        loss: loss_val,
        u: vals[0..k].to_vec(),
        vt: vals[k..2 * k].to_vec(),
        sigma: vals[2 * k..2 * k + n_img].to_vec(),
        labels: vals[2 * k + n_img].clone(),
        log_alpha: vals[2 * k + n_img + 1][[]],
    })
}

fn effective_batch(cfg: &MatchConfig, images: usize) -> usize {
    if cfg.batch_size == 0 {
        images.min(64)
    } else {
        cfg.batch_size.min(images)
    }
}

/// One meta-iteration: draw a start epoch, an expert pair and batches,
/// evaluate the unrolled loss, clip and apply per-family SGD.
pub fn meta_step(
    state: &mut DistillState,
    spec: &ConvNetSpec,
    buffer: &[Trajectory],
    cfg: &MatchConfig,
) -> Result<LossRecord> {
    cfg.validate()?;
    let it = state.iteration;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (it as u64).wrapping_mul(0x9E37_79B9));
    let start = sample_start(it, &cfg.schedule, &mut rng);
    let (theta_start, theta_target) = sample_expert(buffer, start, cfg.expert_steps, &mut rng)?;
    let (theta_start, theta_target) = (theta_start.clone(), theta_target.clone());
    let bsz = effective_batch(cfg, state.dataset.meta.images());
    let batch_plan: Vec<Vec<usize>> = (0..cfg.student_steps)
        .map(|_| state.draw_batch(bsz, &mut rng))
        .collect();
    let aug_seeds: Vec<u64> = (0..cfg.student_steps).map(|_| rng.gen()).collect();
    let mut grads = meta_loss_and_grads(
        state,
        spec,
        &theta_start,
        &theta_target,
        &cfg.policy,
        &batch_plan,
        &aug_seeds,
        true,
    )?;
    let norm = grads.global_norm();
    if norm > GRAD_CLIP {
        grads.scale(GRAD_CLIP / norm);
        state.clip_events += 1;
    }
    if !state.pixel_mode {
        for (m, (gu, gvt)) in state
            .dataset
            .mappers
            .iter_mut()
            .zip(grads.u.iter().zip(grads.vt.iter()))
        {
            let gu = gu.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let gvt = gvt.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            m.u.scaled_add(-cfg.lr_mappers, &gu);
            m.vt.scaled_add(-cfg.lr_mappers, &gvt);
        }
    }
    for (b, gs) in state.dataset.basis.iter_mut().zip(grads.sigma.iter()) {
        let gs = gs.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        b.sigma.scaled_add(-cfg.lr_basis, &gs);
    }
    let gl = grads.labels.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    state.labels.logits.scaled_add(-cfg.lr_labels, &gl);
    if cfg.learn_alpha {
        state.log_alpha -= cfg.lr_alpha * grads.log_alpha;
    }
    let record = LossRecord {
        iteration: it,
        start_epoch: start,
        loss: grads.loss,
        alpha: state.alpha(),
        grad_norm: norm,
    };
    state.iteration += 1;
    state.loss_history.push(record.clone());
    Ok(record)
}

/// Run the full meta-optimization. `checkpoint` writes LSS1 snapshots
/// every `interval` iterations plus one final snapshot; a failed write
/// aborts the run.
pub fn distill(
    state: &mut DistillState,
    spec: &ConvNetSpec,
    buffer: &[Trajectory],
    cfg: &MatchConfig,
    checkpoint: Option<(&Path, usize)>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<()> {
    cfg.validate()?;
    let write_ckpt = |state: &DistillState, dir: &Path, tag: &str| -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        container::save_dataset(
            &state.dataset,
            &state.labels,
            &dir.join(format!("checkpoint_{tag}.lss1")),
        )
    };
    if let Some((dir, _)) = checkpoint {
        if cfg.iterations == 0 {
            // iteration budget zero still snapshots the initialization
            return write_ckpt(state, dir, "final");
        }
    }
    for _ in 0..cfg.iterations {
        let record = meta_step(state, spec, buffer, cfg)?;
        progress(&record);
        if let Some((dir, interval)) = checkpoint {
            if interval > 0 && state.iteration % interval == 0 {
                write_ckpt(state, dir, &format!("{:06}", state.iteration))?;
            }
        }
    }
    if let Some((dir, _)) = checkpoint {
        write_ckpt(state, dir, "final")?;
    }
    Ok(())
}

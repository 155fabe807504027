//! Expert trajectories: train reference networks on real data and keep
//! epoch-granularity parameter snapshots for the matcher to chase.

use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, AugPolicy};
use crate::container;
use crate::data::DatasetStore;
use crate::error::{Error, Result};
use crate::lowrank::{ImageSource, ImageTensor};
use crate::models::{forward, init_params, ConvNetSpec};
use crate::nn::{grad_values, soft_cross_entropy_mean};
use crate::tape::Tape;

/// Provenance carried inside every LSSB file.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryMeta {
    pub spec_hash: u64,
    pub dataset_id: String,
    pub lr: f64,
    pub seed: u64,
    pub epochs: usize,
}

/// Snapshots[e] holds the flat parameters after e epochs; snapshot 0 is
/// the initialization.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub snapshots: Vec<Array1<f64>>,
    pub meta: TrajectoryMeta,
}

#[derive(Clone, Debug)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: AugPolicy,
}

impl ExpertConfig {
    pub fn new(epochs: usize, seed: u64, h: usize, channels: usize) -> Self {
        let policy = if channels > 1 {
            AugPolicy::default_color(h)
        } else {
            AugPolicy::default_gray(h)
        };
        // cutout hurts small experts more than it regularizes them
        let policy = AugPolicy {
            ops: policy
                .ops
                .iter()
                .cloned()
                .filter(|op| *op != crate::augment::AugOp::Cutout)
                .collect(),
            ..policy
        };
        ExpertConfig {
            epochs,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            seed,
            policy,
        }
    }
}

fn one_hot_targets(labels: &[usize], num_classes: usize) -> ArrayD<f64> {
    let mut t = ArrayD::zeros(IxDyn(&[labels.len(), num_classes]));
    for (i, &l) in labels.iter().enumerate() {
        t[[i, l]] = 1.0;
    }
    t
}

fn stack_images(images: &[ImageTensor]) -> ArrayD<f64> {
    let (c, h, w) = images[0].shape();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img.data);
    }
    out
}

/// One SGD-with-momentum step on hard-label cross-entropy; returns the
/// batch loss.
fn sgd_step(
    spec: &ConvNetSpec,
    theta: &mut Array1<f64>,
    velocity: &mut Array1<f64>,
    batch: ArrayD<f64>,
    targets: ArrayD<f64>,
    lr: f64,
    momentum: f64,
) -> f64 {
    let mut t = Tape::new();
    let tv = t.leaf(theta.clone().into_dyn());
    let x = t.leaf(batch);
    let y = t.leaf(targets);
    let logits = forward(&mut t, spec, tv, x);
    let loss = soft_cross_entropy_mean(&mut t, logits, y);
    let loss_val = t.value(loss)[[]];
    let g = grad_values(&mut t, loss, &[tv]).pop().unwrap();
    let g = g.into_dimensionality::<ndarray::Ix1>().unwrap();
    *velocity = &*velocity * momentum + &g;
    *theta = &*theta - &(&*velocity * lr);
    loss_val
}

/// Train one expert on real data. Snapshots are taken at epoch
/// boundaries, epochs+1 in total.
pub fn train_expert(
    store: &DatasetStore,
    spec: &ConvNetSpec,
    cfg: &ExpertConfig,
) -> Result<Trajectory> {
    if store.is_empty() {
        return Err(Error::Data("expert training set is empty".into()));
    }
    let (c, h, w) = store.shape();
    if (c, h, w) != (spec.in_channels, spec.height, spec.width_px) {
        return Err(Error::Config(format!(
            "network expects {}x{}x{}, dataset is {c}x{h}x{w}",
            spec.in_channels, spec.height, spec.width_px
        )));
    }
    cfg.policy.validate(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init_params(spec, cfg.seed ^ 0x9E3779B97F4A7C15).flat;
    let mut velocity = Array1::zeros(theta.len());
    let mut snapshots = vec![theta.clone()];
    let mut order: Vec<usize> = (0..store.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let images: Vec<ImageTensor> = chunk.iter().map(|&i| store.image(i)).collect();
            let images = if cfg.policy.ops.is_empty() {
                images
            } else {
                augment(&images, &cfg.policy, rng.gen())?
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| store.labels[i]).collect();
            let loss = sgd_step(
                spec,
                &mut theta,
                &mut velocity,
                stack_images(&images),
                one_hot_targets(&labels, store.num_classes),
                cfg.lr,
                cfg.momentum,
            );
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    detail: format!("expert loss became {loss} in epoch {epoch}"),
                });
            }
        }
        snapshots.push(theta.clone());
    }
    Ok(Trajectory {
        snapshots,
        meta: TrajectoryMeta {
            spec_hash: spec.spec_hash(),
            dataset_id: store.name.clone(),
            lr: cfg.lr,
            seed: cfg.seed,
            epochs: cfg.epochs,
        },
    })
}

/// Top-1 accuracy of a flat parameter vector on a store.
pub fn accuracy(spec: &ConvNetSpec, theta: &Array1<f64>, store: &DatasetStore) -> f64 {
    let mut correct = 0usize;
    for chunk in (0..store.len()).collect::<Vec<_>>().chunks(256) {
        let images: Vec<ImageTensor> = chunk.iter().map(|&i| store.image(i)).collect();
        let batch = stack_images(&images);
        let mut t = Tape::new();
        let tv = t.leaf(theta.clone().into_dyn());
        let x = t.leaf(batch);
        let logits = forward(&mut t, spec, tv, x);
        let vals = t.value(logits);
        for (row, &i) in chunk.iter().enumerate() {
            let pred = (0..store.num_classes)
                .max_by(|&a, &b| vals[[row, a]].partial_cmp(&vals[[row, b]]).unwrap())
                .unwrap();
            if pred == store.labels[i] {
                correct += 1;
            }
        }
    }
    correct as f64 / store.len() as f64
}

/// Index of LSSB files in a buffer directory.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BufferManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub meta: TrajectoryMeta,
}

pub fn save_manifest(manifest: &BufferManifest, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest).unwrap())
        .map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<BufferManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        detail: format!("manifest is not valid JSON: {e}"),
    })
}

/// Train `count` experts with consecutive seeds and write them plus a
/// manifest into `dir`.
pub fn build_buffer(
    store: &DatasetStore,
    spec: &ConvNetSpec,
    base: &ExpertConfig,
    count: usize,
    dir: &Path,
    mut progress: impl FnMut(usize, &Trajectory),
) -> Result<BufferManifest> {
    if count == 0 {
        return Err(Error::Config("buffer needs at least one expert".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let cfg = ExpertConfig { seed: base.seed + i as u64, ..base.clone() };
        let traj = train_expert(store, spec, &cfg)?;
        let file = format!("expert_{i:03}.lssb");
        container::save_trajectory(&traj, &dir.join(&file))?;
        progress(i, &traj);
        entries.push(ManifestEntry { file, meta: traj.meta });
    }
    let manifest = BufferManifest { entries };
    save_manifest(&manifest, dir)?;
    Ok(manifest)
}

/// Load every trajectory in a buffer directory, verifying that all of
/// them were produced for the same network architecture.
pub fn load_buffer(dir: &Path, expected_spec_hash: Option<u64>) -> Result<Vec<Trajectory>> {
    let manifest = load_manifest(dir)?;
    if manifest.entries.is_empty() {
        return Err(Error::Data(format!("buffer {} is empty", dir.display())));
    }
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path: PathBuf = dir.join(&entry.file);
        let traj = container::load_trajectory(&path)?;
        if traj.meta != entry.meta {
            return Err(Error::Format {
                path,
                detail: "trajectory metadata disagrees with the manifest".into(),
            });
        }
        if let Some(hash) = expected_spec_hash {
            if traj.meta.spec_hash != hash {
                return Err(Error::Config(format!(
                    "trajectory {} was trained for a different architecture",
                    entry.file
                )));
            }
        }
        out.push(traj);
    }
    Ok(out)
}

/// Uniformly pick a trajectory that is long enough for the requested
/// segment and return (snapshot[start], snapshot[start+m]).
pub fn sample_expert<'a, R: Rng>(
    buffer: &'a [Trajectory],
    start: usize,
    m: usize,
    rng: &mut R,
) -> Result<(&'a Array1<f64>, &'a Array1<f64>)> {
    let eligible: Vec<&Trajectory> = buffer
        .iter()
        .filter(|t| t.meta.epochs >= start + m)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "no buffered trajectory reaches epoch {} (start {start} + segment {m})",
            start + m
        )));
    }
    let pick = eligible[rng.gen_range(0..eligible.len())];
    Ok((&pick.snapshots[start], &pick.snapshots[start + m]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_desk;

    fn tiny_setup() -> (DatasetStore, ConvNetSpec, ExpertConfig) {
        let (train, _) = generate_desk(12, 4, 11);
        let spec = ConvNetSpec { width: 6, ..ConvNetSpec::tiny(2, 1, 28, 28) };
        let cfg = ExpertConfig {
            batch_size: 8,
            policy: AugPolicy::empty(),
            ..ExpertConfig::new(3, 0, 28, 1)
        };
        (train, spec, cfg)
    }

    #[test]
    fn snapshot_count_and_init_snapshot() {
        let (train, spec, cfg) = tiny_setup();
        let traj = train_expert(&train, &spec, &cfg).unwrap();
        assert_eq!(traj.snapshots.len(), 4);
        let init = init_params(&spec, cfg.seed ^ 0x9E3779B97F4A7C15).flat;
        assert_eq!(traj.snapshots[0], init);
        // training moved the parameters
        assert_ne!(traj.snapshots[0], traj.snapshots[3]);
        assert_eq!(traj.meta.spec_hash, spec.spec_hash());
    }

    #[test]
    fn training_is_deterministic() {
        let (train, spec, cfg) = tiny_setup();
        let a = train_expert(&train, &spec, &cfg).unwrap();
        let b = train_expert(&train, &spec, &cfg).unwrap();
        for (x, y) in a.snapshots.iter().zip(b.snapshots.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn expert_learns_the_desk_task() {
        let (train, _) = generate_desk(40, 30, 5);
        let (_, test) = generate_desk(40, 30, 5);
        let spec = ConvNetSpec { width: 8, ..ConvNetSpec::tiny(2, 1, 28, 28) };
        let cfg = ExpertConfig {
            batch_size: 16,
            policy: AugPolicy::empty(),
            ..ExpertConfig::new(4, 2, 28, 1)
        };
        let traj = train_expert(&train, &spec, &cfg).unwrap();
        let acc_init = accuracy(&spec, &traj.snapshots[0], &test);
        let acc_end = accuracy(&spec, traj.snapshots.last().unwrap(), &test);
        assert!(acc_end > 0.9, "expert accuracy {acc_end}");
        assert!(acc_end > acc_init);
    }

    #[test]
    fn buffer_roundtrip_via_manifest() {
        let (train, spec, cfg) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_buffer(&train, &spec, &cfg, 2, dir.path(), |_, _| {}).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        let loaded = load_buffer(dir.path(), Some(spec.spec_hash())).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].snapshots.len(), 4);
        // distinct seeds produce distinct trajectories
        assert_ne!(loaded[0].snapshots[3], loaded[1].snapshots[3]);
        // wrong architecture hash is rejected
        assert!(matches!(
            load_buffer(dir.path(), Some(1234)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sampling_is_uniform_and_checks_length() {
        let make = |epochs: usize, tag: f64| Trajectory {
            snapshots: (0..=epochs).map(|e| Array1::from_elem(3, tag + e as f64)).collect(),
            meta: TrajectoryMeta {
                spec_hash: 0,
                dataset_id: "t".into(),
                lr: 0.1,
                seed: 0,
                epochs,
            },
        };
        let buffer: Vec<Trajectory> =
            (0..4).map(|i| make(5, 100.0 * i as f64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            let (s, e) = sample_expert(&buffer, 1, 2, &mut rng).unwrap();
            assert_eq!(e[0] - s[0], 2.0);
            let tag = (s[0] - 1.0) / 100.0;
            counts[tag as usize] += 1;
        }
        for &c in &counts {
            assert!((c as i64 - 250).abs() <= 60, "count {c}");
        }
        // nothing long enough for start 4 + segment 2
        assert!(matches!(
            sample_expert(&buffer, 4, 2, &mut rng),
            Err(Error::Config(_))
        ));
    }
}

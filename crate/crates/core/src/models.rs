//! The functional student/expert ConvNet: parameters live in one flat
//! vector so whole training trajectories can be compared with plain
//! vector arithmetic, and the forward pass is written against the tape
//! so gradients flow into both parameters and input pixels.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lowrank::standard_normal;
use crate::nn;
use crate::tape::{PatchGeom, Tape, Var};

/// Architecture of the ConvNet: `depth` blocks of
/// conv3x3 → instance norm → ReLU → 2x2 average pool, then a linear head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvNetSpec {
    pub depth: usize,
    pub width: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width_px: usize,
}

impl ConvNetSpec {
    /// Default full-scale network for 32x32 color data.
    pub fn cifar(num_classes: usize) -> Self {
        ConvNetSpec {
            depth: 3,
            width: 128,
            num_classes,
            in_channels: 3,
            height: 32,
            width_px: 32,
        }
    }

    /// Tiny preset for float64 finite-difference checks.
    pub fn tiny(num_classes: usize, in_channels: usize, h: usize, w: usize) -> Self {
        ConvNetSpec {
            depth: 3,
            width: 8,
            num_classes,
            in_channels,
            height: h,
            width_px: w,
        }
    }

    /// Spatial size after each pooling stage (floor division).
    fn spatial_after(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.height, self.width_px);
        for _ in 0..self.depth {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn feature_len(&self) -> usize {
        let (h, w) = self.spatial_after();
        self.width * h * w
    }

    /// Stable hash of the architecture, stored in trajectory metadata so
    /// buffers can't be replayed against a different network.
    pub fn spec_hash(&self) -> u64 {
        // FNV-1a over the defining fields
        let mut h: u64 = 0xcbf29ce484222325;
        for v in [
            self.depth,
            self.width,
            self.num_classes,
            self.in_channels,
            self.height,
            self.width_px,
        ] {
            for b in (v as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Flat parameter vector plus the layout that maps names to slices.
/// Layout order: blocks outer to inner as (conv weight, conv bias, norm
/// scale, norm shift), head last.
#[derive(Clone, Debug)]
pub struct ParamVector {
    pub flat: Array1<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Layout for a spec; deterministic, independent of parameter values.
pub fn layout(spec: &ConvNetSpec) -> Vec<LayoutEntry> {
    let mut entries = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
        let len: usize = shape.iter().product();
        entries.push(LayoutEntry { name, shape, offset: *offset });
        *offset += len;
    };
    let mut c_in = spec.in_channels;
    for b in 0..spec.depth {
        push(format!("block{b}.conv.weight"), vec![spec.width, c_in * 9], &mut offset);
        push(format!("block{b}.conv.bias"), vec![spec.width], &mut offset);
        push(format!("block{b}.norm.scale"), vec![spec.width], &mut offset);
        push(format!("block{b}.norm.shift"), vec![spec.width], &mut offset);
        c_in = spec.width;
    }
    push(
        "head.weight".into(),
        vec![spec.num_classes, spec.feature_len()],
        &mut offset,
    );
    push("head.bias".into(), vec![spec.num_classes], &mut offset);
    entries
}

pub fn param_len(spec: &ConvNetSpec) -> usize {
    layout(spec)
        .last()
        .map(|e| e.offset + e.shape.iter().product::<usize>())
        .unwrap_or(0)
}

/// Kaiming fan-in init for conv/linear weights, zeros for biases and norm
/// shifts, ones for norm scales.
pub fn init_params(spec: &ConvNetSpec, rng_seed: u64) -> ParamVector {
    let lay = layout(spec);
    let total = param_len(spec);
    let mut flat = Array1::zeros(total);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for entry in &lay {
        let len: usize = entry.shape.iter().product();
        let slice = &mut flat.as_slice_mut().unwrap()[entry.offset..entry.offset + len];
        if entry.name.ends_with("conv.weight") || entry.name == "head.weight" {
            let fan_in = entry.shape[1] as f64;
            let std = (2.0 / fan_in).sqrt();
            for v in slice.iter_mut() {
                *v = std * standard_normal(&mut rng);
            }
        } else if entry.name.ends_with("norm.scale") {
            slice.fill(1.0);
        }
        // biases and norm shifts stay zero
    }
    ParamVector { flat, layout: lay }
}

/// Structured view of parameters as (name, tensor) pairs.
pub fn unflatten(params: &ParamVector) -> Vec<(String, ArrayD<f64>)> {
    params
        .layout
        .iter()
        .map(|e| {
            let len: usize = e.shape.iter().product();
            let data = params.flat.slice(ndarray::s![e.offset..e.offset + len]).to_owned();
            (
                e.name.clone(),
                data.into_shape_with_order(IxDyn(&e.shape)).unwrap(),
            )
        })
        .collect()
}

/// Rebuild a flat vector from a structured view. The layout (names,
/// shapes, order) must match the spec's layout exactly.
pub fn flatten(spec: &ConvNetSpec, structured: &[(String, ArrayD<f64>)]) -> Result<ParamVector> {
    let lay = layout(spec);
    if structured.len() != lay.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} tensors, got {}",
            lay.len(),
            structured.len()
        )));
    }
    let mut flat = Array1::zeros(param_len(spec));
    for (entry, (name, tensor)) in lay.iter().zip(structured.iter()) {
        if name != &entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(Error::InvalidArgument(format!(
                "layout mismatch at '{}': got '{}' with shape {:?}",
                entry.name,
                name,
                tensor.shape()
            )));
        }
        let len: usize = entry.shape.iter().product();
        flat.as_slice_mut().unwrap()[entry.offset..entry.offset + len]
            .copy_from_slice(tensor.as_slice().unwrap());
    }
    Ok(ParamVector { flat, layout: lay })
}

const NORM_EPS: f64 = 1e-5;

/// Forward pass on the tape: `theta` is the flat (P,) parameter var,
/// `x` a (B,C,H,W) batch var. Returns (B, num_classes) logits.
///
/// Pure function of its inputs: instance norm uses per-sample statistics,
/// so there is no hidden running state.
pub fn forward(t: &mut Tape, spec: &ConvNetSpec, theta: Var, x: Var) -> Var {
    assert_eq!(
        t.shape(theta),
        &[param_len(spec)],
        "parameter vector length mismatch"
    );
    let xs = t.shape(x).to_vec();
    assert_eq!(
        &xs[1..],
        &[spec.in_channels, spec.height, spec.width_px],
        "input shape mismatch"
    );
    let lay = layout(spec);
    let mut slot = 0usize;
    let mut take = |t: &mut Tape, shape: &[usize]| -> Var {
        let e = &lay[slot];
        assert_eq!(e.shape.as_slice(), shape);
        slot += 1;
        let len: usize = shape.iter().product();
        let s = t.slice_axis(theta, 0, e.offset, len);
        t.reshape(s, shape)
    };

    let mut cur = x;
    let (mut h, mut w) = (spec.height, spec.width_px);
    let mut c_in = spec.in_channels;
    for _ in 0..spec.depth {
        let wv = take(t, &[spec.width, c_in * 9]);
        let bv = take(t, &[spec.width]);
        let gv = take(t, &[spec.width]);
        let sv = take(t, &[spec.width]);
        let geom = PatchGeom { c_in, h, w, kh: 3, kw: 3, stride: 1, pad: 1 };
        let conv = nn::conv2d(t, cur, wv, bv, geom);
        let normed = nn::instance_norm(t, conv, gv, sv, NORM_EPS);
        let act = t.relu(normed);
        cur = nn::avg_pool2(t, act);
        h /= 2;
        w /= 2;
        c_in = spec.width;
    }
    let b = xs[0];
    let feat = t.reshape(cur, &[b, spec.feature_len()]);
    let hw = take(t, &[spec.num_classes, spec.feature_len()]);
    let hb = take(t, &[spec.num_classes]);
    nn::linear(t, feat, hw, hb)
}

/// Value-level forward for inference (no gradients kept afterwards).
pub fn forward_values(
    spec: &ConvNetSpec,
    params: &ParamVector,
    batch: &ArrayD<f64>,
) -> ndarray::Array2<f64> {
    let mut t = Tape::new();
    let theta = t.leaf(params.flat.clone().into_dyn());
    let x = t.leaf(batch.clone());
    let logits = forward(&mut t, spec, theta, x);
    t.value(logits)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

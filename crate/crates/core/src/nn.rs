//! Differentiable network building blocks composed from tape primitives.

use crate::tape::{grad, PatchGeom, Tape, Var};

/// 3x3-style convolution on a (B,C,H,W) var. `weight` is
/// (c_out, c_in*kh*kw), `bias` is (c_out,). Returns (B,c_out,OH,OW).
pub fn conv2d(
    t: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    geom: PatchGeom,
) -> Var {
    let b = t.shape(x)[0];
    let c_out = t.shape(weight)[0];
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cols = t.im2col(x, geom); // (B*OH*OW, c_in*kh*kw)
    let wt = t.transpose(weight, &[1, 0]);
    let out = t.matmul(cols, wt); // (B*OH*OW, c_out)
    let be = t.expand(bias, 0, b * oh * ow);
    let out = t.add(out, be);
    let out = t.reshape(out, &[b, oh, ow, c_out]);
    t.transpose(out, &[0, 3, 1, 2])
}

/// 2x2 average pooling with stride 2 (floor semantics on odd sizes).
pub fn avg_pool2(t: &mut Tape, x: Var) -> Var {
    let (b, c, h, w) = dims4(t, x);
    let geom = PatchGeom { c_in: c, h, w, kh: 2, kw: 2, stride: 2, pad: 0 };
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cols = t.im2col(x, geom); // (B*OH*OW, C*4), column = c*4 + k
    let grouped = t.reshape(cols, &[b * oh * ow * c, 4]);
    let summed = t.sum_axis(grouped, 1);
    let mean = t.scale(summed, 0.25);
    let out = t.reshape(mean, &[b, oh, ow, c]);
    t.transpose(out, &[0, 3, 1, 2])
}

/// Instance normalization with affine parameters: per-sample, per-channel
/// statistics over the spatial axes. `gamma`/`beta` have shape (C,).
pub fn instance_norm(t: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
    let (b, _c, h, w) = dims4(t, x);
    let inv_n = 1.0 / (h * w) as f64;
    let s = t.sum_axis(x, 3);
    let s = t.sum_axis(s, 2); // (B,C)
    let mean = t.scale(s, inv_n);
    let mean_b = broadcast_bc(t, mean, h, w);
    let centered = t.sub(x, mean_b);
    let sq = t.mul(centered, centered);
    let vs = t.sum_axis(sq, 3);
    let vs = t.sum_axis(vs, 2);
    let var = t.scale(vs, inv_n);
    let var = t.add_scalar(var, eps);
    let std = t.sqrt(var);
    let std_b = broadcast_bc(t, std, h, w);
    let normed = t.div(centered, std_b);
    let gb = broadcast_c(t, gamma, b, h, w);
    let bb = broadcast_c(t, beta, b, h, w);
    let scaled = t.mul(normed, gb);
    t.add(scaled, bb)
}

/// Fully connected layer: x (B,F), weight (K,F), bias (K,) -> (B,K).
pub fn linear(t: &mut Tape, x: Var, weight: Var, bias: Var) -> Var {
    let b = t.shape(x)[0];
    let wt = t.transpose(weight, &[1, 0]);
    let out = t.matmul(x, wt);
    let be = t.expand(bias, 0, b);
    t.add(out, be)
}

/// Numerically stable log-softmax over the last axis of a (B,K) var.
/// The per-row max is treated as a constant shift, which is exact for
/// the gradient almost everywhere.
pub fn log_softmax(t: &mut Tape, logits: Var) -> Var {
    let shape = t.shape(logits).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let vals = t.value(logits);
    let mut maxes = ndarray::ArrayD::zeros(ndarray::IxDyn(&[b, k]));
    for i in 0..b {
        let row_max = (0..k).map(|j| vals[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        for j in 0..k {
            maxes[[i, j]] = row_max;
        }
    }
    let max_const = t.leaf(maxes);
    let shifted = t.sub(logits, max_const);
    let e = t.exp(shifted);
    let s = t.sum_axis(e, 1); // (B,)
    let ls = t.ln(s);
    let lse = t.expand(ls, 1, k);
    t.sub(shifted, lse)
}

/// Softmax over the last axis of a (B,K) var.
pub fn softmax(t: &mut Tape, logits: Var) -> Var {
    let lsm = log_softmax(t, logits);
    t.exp(lsm)
}

/// Mean soft-target cross-entropy over a batch:
/// -1/B Σ_b Σ_c target[b,c] · log_softmax(logits)[b,c].
/// Differentiable in both logits and targets.
pub fn soft_cross_entropy_mean(t: &mut Tape, logits: Var, targets: Var) -> Var {
    let b = t.shape(logits)[0];
    let lsm = log_softmax(t, logits);
    let prod = t.mul(targets, lsm);
    let total = t.sum_all(prod);
    let neg = t.neg(total);
    t.scale(neg, 1.0 / b as f64)
}

/// Multiply a tensor by a 0-d scalar var (broadcast).
pub fn scale_by_scalar_var(t: &mut Tape, x: Var, scalar: Var) -> Var {
    assert!(t.shape(scalar).is_empty(), "expected 0-d scalar var");
    let shape = t.shape(x).to_vec();
    let mut s = scalar;
    for (axis, &n) in shape.iter().enumerate() {
        s = t.expand(s, axis, n);
    }
    t.mul(x, s)
}

/// Squared L2 norm of the difference of two vars (any shape), as a 0-d var.
pub fn squared_distance(t: &mut Tape, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let sq = t.mul(d, d);
    t.sum_all(sq)
}

fn dims4(t: &Tape, x: Var) -> (usize, usize, usize, usize) {
    let s = t.shape(x);
    assert_eq!(s.len(), 4, "expected (B,C,H,W), got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// (B,C) -> (B,C,H,W)
fn broadcast_bc(t: &mut Tape, x: Var, h: usize, w: usize) -> Var {
    let e = t.expand(x, 2, h);
    t.expand(e, 3, w)
}

/// (C,) -> (B,C,H,W)
fn broadcast_c(t: &mut Tape, x: Var, b: usize, h: usize, w: usize) -> Var {
    let e = t.expand(x, 0, b);
    broadcast_bc(t, e, h, w)
}

/// Convenience: value-level gradient of a scalar var, as owned arrays.
pub fn grad_values(t: &mut Tape, loss: Var, wrt: &[Var]) -> Vec<ndarray::ArrayD<f64>> {
    let gs = grad(t, loss, wrt);
    gs.into_iter().map(|g| t.value(g).clone()).collect()
}

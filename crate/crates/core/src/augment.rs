//! Differentiable augmentation for synthetic batches.
//!
//! Geometric ops (flip, crop_shift, scale, rotate) compose into a single
//! affine bilinear resampling applied first; color ops and cutout follow
//! in policy order. Every op keeps gradients flowing from the output back
//! to the input pixels: resampling is bilinear, cutout uses a
//! sigmoid-edged soft mask, color ops are affine pixel maps.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lowrank::ImageTensor;
use crate::tape::{Tape, Var, WarpGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Flip,
    CropShift,
    Cutout,
    Brightness,
    Saturation,
    Contrast,
    Scale,
    Rotate,
}

impl std::str::FromStr for AugOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip" => Ok(AugOp::Flip),
            "crop_shift" => Ok(AugOp::CropShift),
            "cutout" => Ok(AugOp::Cutout),
            "brightness" => Ok(AugOp::Brightness),
            "saturation" => Ok(AugOp::Saturation),
            "contrast" => Ok(AugOp::Contrast),
            "scale" => Ok(AugOp::Scale),
            "rotate" => Ok(AugOp::Rotate),
            other => Err(Error::Config(format!("unknown augmentation op '{other}'"))),
        }
    }
}

/// Ordered op list plus per-op strengths. `siamese` reuses one random
/// draw for the whole batch.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AugPolicy {
    pub ops: Vec<AugOp>,
    /// Max crop shift in pixels; capped at H/8 by `validate`.
    pub shift: usize,
    /// Cutout square size as a fraction of min(H, W).
    pub cutout_frac: f64,
    /// Brightness shift amplitude (normalized pixel units).
    pub brightness: f64,
    /// Saturation mixing amplitude around 1.
    pub saturation: f64,
    /// Contrast mixing amplitude around 1.
    pub contrast: f64,
    /// Scale amplitude around 1.
    pub scale: f64,
    /// Max rotation in degrees (≤ 15).
    pub rotate_deg: f64,
    pub siamese: bool,
}

impl AugPolicy {
    /// No-op policy.
    pub fn empty() -> Self {
        AugPolicy {
            ops: Vec::new(),
            shift: 0,
            cutout_frac: 0.0,
            brightness: 0.0,
            saturation: 0.0,
            contrast: 0.0,
            scale: 0.0,
            rotate_deg: 0.0,
            siamese: true,
        }
    }

    /// DSA-style defaults for color images.
    pub fn default_color(h: usize) -> Self {
        AugPolicy {
            ops: vec![
                AugOp::CropShift,
                AugOp::Flip,
                AugOp::Cutout,
                AugOp::Brightness,
                AugOp::Saturation,
                AugOp::Contrast,
            ],
            shift: h / 8,
            cutout_frac: 0.3,
            brightness: 0.3,
            saturation: 0.5,
            contrast: 0.3,
            scale: 0.1,
            rotate_deg: 10.0,
            siamese: true,
        }
    }

    /// Defaults for grayscale images (no saturation/contrast jitter).
    pub fn default_gray(h: usize) -> Self {
        AugPolicy {
            ops: vec![AugOp::CropShift, AugOp::Flip, AugOp::Cutout, AugOp::Brightness],
            ..AugPolicy::default_color(h)
        }
    }

    pub fn validate(&self, h: usize, _w: usize) -> Result<()> {
        if self.shift > h / 8 {
            return Err(Error::Config(format!(
                "crop shift {} exceeds H/8 = {}",
                self.shift,
                h / 8
            )));
        }
        if self.rotate_deg > 15.0 {
            return Err(Error::Config(format!(
                "rotation {}° exceeds the 15° bound",
                self.rotate_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.cutout_frac) {
            return Err(Error::Config("cutout fraction must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// 2x3 affine in centered pixel coordinates mapping output to source.
#[derive(Clone, Copy, Debug)]
struct Affine {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    fn identity() -> Self {
        Affine { m: [[1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] }
    }

    fn is_identity(&self) -> bool {
        self.m == [[1.0, 0.0], [0.0, 1.0]] && self.t == [0.0, 0.0]
    }

    /// self ∘ other: apply `other` to coords first, then `self`.
    fn compose(&self, other: &Affine) -> Affine {
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = self.m[i][0] * other.m[0][j] + self.m[i][1] * other.m[1][j];
            }
        }
        let t = [
            self.m[0][0] * other.t[0] + self.m[0][1] * other.t[1] + self.t[0],
            self.m[1][0] * other.t[0] + self.m[1][1] * other.t[1] + self.t[1],
        ];
        Affine { m, t }
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }
}

/// One batch element's random draws, resolved before any tape op runs so
/// augmentation is a deterministic function of (batch, policy, seed).
#[derive(Clone, Debug)]
struct Draw {
    affine: Affine,
    brightness: f64,
    saturation: f64,
    contrast: f64,
    cutout_center: (f64, f64),
}

fn draw_one<R: Rng>(policy: &AugPolicy, rng: &mut R) -> Draw {
    // sampling geometric coordinate maps output->source, so each op
    // contributes its inverse transform
    let mut affine = Affine::identity();
    let mut brightness = 0.0;
    let mut saturation = 1.0;
    let mut contrast = 1.0;
    let mut cutout_center = (0.0, 0.0);
    for op in &policy.ops {
        match op {
            AugOp::Flip => {
                if rng.gen::<bool>() {
                    let flip = Affine { m: [[-1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] };
                    affine = affine.compose(&flip);
                }
            }
            AugOp::CropShift => {
                let s = policy.shift as f64;
                let dx = rng.gen_range(-s..=s);
                let dy = rng.gen_range(-s..=s);
                let shift = Affine { m: [[1.0, 0.0], [0.0, 1.0]], t: [-dx, -dy] };
                affine = affine.compose(&shift);
            }
            AugOp::Scale => {
                let s = 1.0 + rng.gen_range(-policy.scale..=policy.scale);
                let inv = 1.0 / s;
                let sc = Affine { m: [[inv, 0.0], [0.0, inv]], t: [0.0, 0.0] };
                affine = affine.compose(&sc);
            }
            AugOp::Rotate => {
                let deg = rng.gen_range(-policy.rotate_deg..=policy.rotate_deg);
                let a = -deg.to_radians();
                let rot = Affine {
                    m: [[a.cos(), -a.sin()], [a.sin(), a.cos()]],
                    t: [0.0, 0.0],
                };
                affine = affine.compose(&rot);
            }
            AugOp::Brightness => {
                brightness = rng.gen_range(-policy.brightness..=policy.brightness);
            }
            AugOp::Saturation => {
                saturation = 1.0 + rng.gen_range(-policy.saturation..=policy.saturation);
            }
            AugOp::Contrast => {
                contrast = 1.0 + rng.gen_range(-policy.contrast..=policy.contrast);
            }
            AugOp::Cutout => {
                cutout_center = (rng.gen::<f64>(), rng.gen::<f64>());
            }
        }
    }
    Draw { affine, brightness, saturation, contrast, cutout_center }
}

fn warp_grid(affine: &Affine, h: usize, w: usize) -> WarpGrid {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = affine.apply(x as f64 - cx, y as f64 - cy);
            let (sx, sy) = (sx + cx, sy + cy);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut entry = [(0u32, 0.0f64); 4];
            let mut slot = 0;
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let iy = y0 as isize + dy;
                    let ix = x0 as isize + dx;
                    let weight = wy * wx;
                    if weight != 0.0
                        && iy >= 0
                        && iy < h as isize
                        && ix >= 0
                        && ix < w as isize
                    {
                        entry[slot] = ((iy as usize * w + ix as usize) as u32, weight);
                        slot += 1;
                    }
                }
            }
            taps.push(entry);
        }
    }
    WarpGrid { h, w, taps }
}

const CUTOUT_EDGE_TEMP: f64 = 0.5;

fn cutout_mask(center: (f64, f64), frac: f64, h: usize, w: usize) -> ArrayD<f64> {
    let half = frac * h.min(w) as f64 / 2.0;
    let cy = center.0 * h as f64;
    let cx = center.1 * w as f64;
    let sig = |v: f64| 1.0 / (1.0 + (-v / CUTOUT_EDGE_TEMP).exp());
    ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| {
        let (y, x) = (ix[0] as f64, ix[1] as f64);
        let inside = sig(half - (y - cy).abs()) * sig(half - (x - cx).abs());
        1.0 - inside
    })
}

/// Augment a (B,C,H,W) batch var on the tape. Deterministic per
/// (policy, seed); with `policy.siamese` one draw covers the batch.
pub fn augment_var(t: &mut Tape, x: Var, policy: &AugPolicy, rng_seed: u64) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    if shape.len() != 4 || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "augment expects a non-empty (B,C,H,W) batch, got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    policy.validate(h, w)?;
    if policy.ops.is_empty() {
        return Ok(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let draws: Vec<Draw> = if policy.siamese {
        vec![draw_one(policy, &mut rng)]
    } else {
        (0..b).map(|_| draw_one(policy, &mut rng)).collect()
    };
    let per_sample = |i: usize| -> &Draw { &draws[if policy.siamese { 0 } else { i }] };

    let mut cur = x;

    // geometric: one composed bilinear resampling
    if draws.iter().any(|d| !d.affine.is_identity()) {
        let grids: Vec<WarpGrid> = if policy.siamese {
            vec![warp_grid(&draws[0].affine, h, w)]
        } else {
            (0..b).map(|i| warp_grid(&draws[i].affine, h, w)).collect()
        };
        cur = t.warp(cur, Rc::new(grids));
    }

    // color ops and cutout, in policy order
    for op in &policy.ops {
        match op {
            AugOp::Brightness => {
                let shift = ArrayD::from_shape_fn(IxDyn(&[b, c, h, w]), |ix| {
                    per_sample(ix[0]).brightness
                });
                let sv = t.leaf(shift);
                cur = t.add(cur, sv);
            }
            AugOp::Saturation if c > 1 => {
                let s = t.sum_axis(cur, 1);
                let mean = t.scale(s, 1.0 / c as f64);
                let mean = t.expand(mean, 1, c);
                let centered = t.sub(cur, mean);
                let sat = ArrayD::from_shape_fn(IxDyn(&[b, c, h, w]), |ix| {
                    per_sample(ix[0]).saturation
                });
                let scaled = t.mul_const(centered, Rc::new(sat));
                cur = t.add(scaled, mean);
            }
            AugOp::Contrast => {
                let s3 = t.sum_axis(cur, 3);
                let s2 = t.sum_axis(s3, 2);
                let s1 = t.sum_axis(s2, 1); // (B,)
                let mean = t.scale(s1, 1.0 / (c * h * w) as f64);
                let mean = t.expand(mean, 1, c);
                let mean = t.expand(mean, 2, h);
                let mean = t.expand(mean, 3, w);
                let centered = t.sub(cur, mean);
                let con = ArrayD::from_shape_fn(IxDyn(&[b, c, h, w]), |ix| {
                    per_sample(ix[0]).contrast
                });
                let scaled = t.mul_const(centered, Rc::new(con));
                cur = t.add(scaled, mean);
            }
            AugOp::Cutout => {
                let mut mask = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for i in 0..b {
                    let m2 = cutout_mask(per_sample(i).cutout_center, policy.cutout_frac, h, w);
                    for ch in 0..c {
                        mask.index_axis_mut(ndarray::Axis(0), i)
                            .index_axis_mut(ndarray::Axis(0), ch)
                            .assign(&m2.view().into_dimensionality::<ndarray::Ix2>().unwrap());
                    }
                }
                cur = t.mul_const(cur, Rc::new(mask));
            }
            _ => {} // geometric ops already applied; saturation no-ops on gray
        }
    }
    Ok(cur)
}

/// Value-level augmentation of a list of images.
pub fn augment(
    batch: &[ImageTensor],
    policy: &AugPolicy,
    rng_seed: u64,
) -> Result<Vec<ImageTensor>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("augment: empty batch".into()));
    }
    let (c, h, w) = batch[0].shape();
    for img in batch {
        if img.shape() != (c, h, w) {
            return Err(Error::InvalidArgument(
                "augment: batch images must share one shape".into(),
            ));
        }
    }
    let mut t = Tape::new();
    let mut stacked = ArrayD::zeros(IxDyn(&[batch.len(), c, h, w]));
    for (i, img) in batch.iter().enumerate() {
        stacked
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&img.data);
    }
    let x = t.leaf(stacked);
    let out = augment_var(&mut t, x, policy, rng_seed)?;
    let val = t.value(out);
    Ok((0..batch.len())
        .map(|i| ImageTensor {
            data: val
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::standard_normal;
    use crate::tape::grad;
    use ndarray::Array3;

    fn random_batch(seed: u64, b: usize, c: usize, h: usize, w: usize) -> Vec<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b)
            .map(|_| ImageTensor {
                data: Array3::from_shape_fn((c, h, w), |_| standard_normal(&mut rng)),
            })
            .collect()
    }

    #[test]
    fn empty_policy_is_identity() {
        let batch = random_batch(1, 3, 2, 8, 8);
        let out = augment(&batch, &AugPolicy::empty(), 7).unwrap();
        for (a, b) in batch.iter().zip(out.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        // flip twice; with a seed forcing both flips true the affines cancel
        let mut policy = AugPolicy::empty();
        policy.ops = vec![AugOp::Flip, AugOp::Flip];
        let batch = random_batch(2, 1, 1, 6, 6);
        // find a seed where both coin flips are true
        let mut seed = 0;
        loop {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if rng.gen::<bool>() && rng.gen::<bool>() {
                break;
            }
            seed += 1;
        }
        let out = augment(&batch, &policy, seed).unwrap();
        for (a, b) in batch.iter().zip(out.iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_flip_reverses_columns() {
        let mut policy = AugPolicy::empty();
        policy.ops = vec![AugOp::Flip];
        let batch = random_batch(3, 1, 1, 4, 4);
        let mut seed = 0;
        loop {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if rng.gen::<bool>() {
                break;
            }
            seed += 1;
        }
        let out = augment(&batch, &policy, seed).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert!(
                    (out[0].data[[0, y, x]] - batch[0].data[[0, y, 3 - x]]).abs() < 1e-10,
                    "pixel ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn brightness_shifts_every_pixel() {
        let mut policy = AugPolicy::empty();
        policy.ops = vec![AugOp::Brightness];
        policy.brightness = 0.4;
        let batch = random_batch(4, 2, 1, 8, 8);
        let seed = 11;
        let out = augment(&batch, &policy, seed).unwrap();
        // recover the drawn shift from one pixel, check all others match
        let b = out[0].data[[0, 0, 0]] - batch[0].data[[0, 0, 0]];
        assert!(b.abs() <= 0.4 + 1e-12);
        for (img_in, img_out) in batch.iter().zip(out.iter()) {
            for (p, q) in img_in.data.iter().zip(img_out.data.iter()) {
                assert!((q - p - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_preserved_and_seed_deterministic() {
        let mut policy = AugPolicy::default_color(8);
        policy.siamese = false;
        let batch = random_batch(5, 4, 3, 8, 8);
        let a = augment(&batch, &policy, 99).unwrap();
        let b = augment(&batch, &policy, 99).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.shape(), (3, 8, 8));
            assert_eq!(x.data, y.data);
        }
        let c = augment(&batch, &policy, 100).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x.data != y.data));
    }

    #[test]
    fn siamese_applies_identical_transforms() {
        let mut policy = AugPolicy::default_gray(8);
        policy.siamese = true;
        let img = random_batch(6, 1, 1, 8, 8).remove(0);
        let batch = vec![img.clone(), img];
        let out = augment(&batch, &policy, 3).unwrap();
        assert_eq!(out[0].data, out[1].data);
    }

    #[test]
    fn gradient_flows_through_each_op() {
        // finite-difference JVP through each single-op policy on 8x8
        let ops = [
            AugOp::Flip,
            AugOp::CropShift,
            AugOp::Cutout,
            AugOp::Brightness,
            AugOp::Saturation,
            AugOp::Contrast,
            AugOp::Scale,
            AugOp::Rotate,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |_| standard_normal(&mut rng));
        for op in ops {
            let mut policy = AugPolicy::empty();
            policy.ops = vec![op];
            policy.shift = 1;
            policy.cutout_frac = 0.5;
            policy.brightness = 0.3;
            policy.saturation = 0.4;
            policy.contrast = 0.3;
            policy.scale = 0.1;
            policy.rotate_deg = 9.0;
            let seed = 5;
            let eval = |x: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone());
                let out = augment_var(&mut t, xv, &policy, seed).unwrap();
                let sq = t.mul(out, out);
                let loss = t.sum_all(sq);
                let g = grad(&mut t, loss, &[xv])[0];
                (t.scalar(loss), t.value(g).clone())
            };
            let (_, g) = eval(&x0);
            assert!(
                g.iter().any(|&v| v != 0.0),
                "{op:?}: gradient is identically zero"
            );
            let h = 1e-6;
            let mut max_rel: f64 = 0.0;
            for i in (0..x0.len()).step_by(17) {
                let mut xp = x0.clone();
                let mut xm = x0.clone();
                xp.as_slice_mut().unwrap()[i] += h;
                xm.as_slice_mut().unwrap()[i] -= h;
                let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
                let a = g.as_slice().unwrap()[i];
                let rel = (num - a).abs() / num.abs().max(a.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-4, "{op:?}: max relative error {max_rel}");
        }
    }

    #[test]
    fn policy_strength_bounds_enforced() {
        let mut policy = AugPolicy::default_gray(8);
        policy.shift = 5; // > 8/8
        let batch = random_batch(7, 1, 1, 8, 8);
        assert!(matches!(
            augment(&batch, &policy, 0),
            Err(Error::Config(_))
        ));
    }
}

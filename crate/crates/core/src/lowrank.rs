//! Low-rank parameterization of the synthetic dataset: shared dimension
//! mappers (U, Vᵀ) per subspace, a dense r×r basis block per image, and
//! the storage-budget planner that sizes them.

use ndarray::{Array2, Array3, ArrayD};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One image in normalized pixel space, laid out (C,H,W).
#[derive(Clone, Debug)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A shared rank-r subspace: per-channel U (H×r) and Vᵀ (r×W), stored as
/// (C,H,r) and (C,r,W).
#[derive(Clone, Debug)]
pub struct MapperSet {
    pub id: usize,
    pub u: Array3<f64>,
    pub vt: Array3<f64>,
}

impl MapperSet {
    pub fn rank(&self) -> usize {
        self.u.shape()[2]
    }
}

/// One synthetic image's cheap representation: a dense per-channel r×r
/// matrix, stored (C,r,r). Density (r² rather than r entries per channel)
/// is what the storage accounting assumes.
#[derive(Clone, Debug)]
pub struct BasisBlock {
    pub mapper_id: usize,
    pub sigma: Array3<f64>,
}

/// Dataset geometry shared by every component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub k: usize,
    pub m: usize,
    pub num_classes: usize,
}

impl DatasetMeta {
    pub fn images(&self) -> usize {
        self.k * self.m
    }
}

/// The full low-rank parameterization: k mappers, k·m basis blocks
/// (mapper-major order: block j belongs to mapper j / m).
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub mappers: Vec<MapperSet>,
    pub basis: Vec<BasisBlock>,
    pub meta: DatasetMeta,
}

impl SyntheticDataset {
    /// Float-parameter count of mappers + basis blocks + labels, the
    /// quantity charged against the pixel budget.
    pub fn param_count(&self) -> usize {
        let m = &self.meta;
        param_count(m.c, m.h, m.w, m.r, m.k, m.m, m.num_classes)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let meta = &self.meta;
        if self.mappers.len() != meta.k {
            return Err(Error::InvalidArgument(format!(
                "expected {} mappers, found {}",
                meta.k,
                self.mappers.len()
            )));
        }
        if self.basis.len() != meta.k * meta.m {
            return Err(Error::InvalidArgument(format!(
                "expected {} basis blocks, found {}",
                meta.k * meta.m,
                self.basis.len()
            )));
        }
        for (j, b) in self.basis.iter().enumerate() {
            if b.mapper_id != j / meta.m {
                return Err(Error::InvalidArgument(format!(
                    "basis block {} assigned to mapper {}, expected {}",
                    j,
                    b.mapper_id,
                    j / meta.m
                )));
            }
        }
        Ok(())
    }
}

/// A feasible (r,k,m) choice with exact float accounting against the
/// equivalent pixel budget.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StoragePlan {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub ipc: usize,
    pub r: usize,
    pub k: usize,
    pub m: usize,
    pub images: usize,
    pub param_count: usize,
    pub budget: usize,
    pub utilization: f64,
}

impl StoragePlan {
    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            c: self.c,
            h: self.h,
            w: self.w,
            r: self.r,
            k: self.k,
            m: self.m,
            num_classes: self.num_classes,
        }
    }
}

/// Floats needed to store k mappers, k·m dense basis blocks, and one
/// soft-label row per image.
pub fn param_count(
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    k: usize,
    m: usize,
    num_classes: usize,
) -> usize {
    c * k * (h * r + r * w) + c * k * m * r * r + k * m * num_classes
}

const MAX_K: usize = 64;
const MAX_M: usize = 512;

/// Choose (k,m) against the pixel budget `num_classes·ipc·C·H·W`.
///
/// With k and m given, only feasibility is checked. When either is free
/// the search maximizes the image count k·m, breaking ties by higher
/// utilization, then by smaller k.
#[allow(clippy::too_many_arguments)]
pub fn plan_budget(
    c: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    ipc: usize,
    r: usize,
    k: Option<usize>,
    m: Option<usize>,
) -> Result<StoragePlan> {
    if r < 1 || r > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} out of range [1, {}]",
            h.min(w)
        )));
    }
    if c == 0 || num_classes == 0 || ipc == 0 {
        return Err(Error::InvalidArgument(
            "channels, classes and ipc must be positive".into(),
        ));
    }
    let budget = num_classes * ipc * c * h * w;
    let make = |k: usize, m: usize| -> StoragePlan {
        let pc = param_count(c, h, w, r, k, m, num_classes);
        StoragePlan {
            c,
            h,
            w,
            num_classes,
            ipc,
            r,
            k,
            m,
            images: k * m,
            param_count: pc,
            budget,
            utilization: pc as f64 / budget as f64,
        }
    };
    if let (Some(k), Some(m)) = (k, m) {
        if k == 0 || m == 0 {
            return Err(Error::InvalidArgument("k and m must be >= 1".into()));
        }
        let plan = make(k, m);
        if plan.param_count > budget {
            return Err(Error::InfeasibleBudget(format!(
                "k={k}, m={m}, r={r} needs {} floats but the budget is {budget}",
                plan.param_count
            )));
        }
        return Ok(plan);
    }
    let k_range: Vec<usize> = match k {
        Some(k) => vec![k],
        None => (1..=MAX_K).collect(),
    };
    let mut best: Option<StoragePlan> = None;
    for &kk in &k_range {
        let m_range: Vec<usize> = match m {
            Some(m) => vec![m],
            None => (1..=MAX_M).collect(),
        };
        for &mm in &m_range {
            let cand = make(kk, mm);
            if cand.param_count > budget {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) => {
                    cand.images > b.images
                        || (cand.images == b.images && cand.param_count > b.param_count)
                        || (cand.images == b.images
                            && cand.param_count == b.param_count
                            && cand.k < b.k)
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.ok_or_else(|| {
        Error::InfeasibleBudget(format!(
            "no (k,m) with at least one image fits rank {r} in budget {budget}"
        ))
    })
}

/// Map one basis block through its mapper: per channel, U·Σ·Vᵀ.
/// Output pixels are not clamped.
pub fn synthesize(mapper: &MapperSet, block: &BasisBlock) -> Result<ImageTensor> {
    if block.mapper_id != mapper.id {
        return Err(Error::InvalidArgument(format!(
            "basis block belongs to mapper {}, not {}",
            block.mapper_id, mapper.id
        )));
    }
    let (c, h, r) = {
        let s = mapper.u.shape();
        (s[0], s[1], s[2])
    };
    let w = mapper.vt.shape()[2];
    if mapper.vt.shape() != [c, r, w] {
        return Err(Error::InvalidArgument(format!(
            "Vt shape {:?} inconsistent with U shape {:?}",
            mapper.vt.shape(),
            mapper.u.shape()
        )));
    }
    if block.sigma.shape() != [c, r, r] {
        return Err(Error::InvalidArgument(format!(
            "sigma shape {:?}, expected [{c}, {r}, {r}]",
            block.sigma.shape()
        )));
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let u = mapper.u.index_axis(ndarray::Axis(0), ch);
        let s = block.sigma.index_axis(ndarray::Axis(0), ch);
        let vt = mapper.vt.index_axis(ndarray::Axis(0), ch);
        let us = u.dot(&s);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&us.dot(&vt));
    }
    Ok(ImageTensor { data: out })
}

/// Synthesize every image, mapper-id major then block index.
pub fn synthesize_all(dataset: &SyntheticDataset) -> Result<Vec<ImageTensor>> {
    dataset.check_invariants()?;
    dataset
        .basis
        .iter()
        .map(|b| synthesize(&dataset.mappers[b.mapper_id], b))
        .collect()
}

/// Per-channel rank-r truncated SVD of an image. `u` is (C,H,r), `s` the
/// singular values embedded on the diagonal of a dense (C,r,r) block,
/// `vt` (C,r,W). Singular values descend.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub u: Array3<f64>,
    pub s: Array3<f64>,
    pub vt: Array3<f64>,
}

pub fn truncated_svd(image: &ImageTensor, r: usize) -> Result<TruncatedSvd> {
    let (c, h, w) = image.shape();
    if r < 1 || r > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} out of range [1, {}]",
            h.min(w)
        )));
    }
    let mut u = Array3::zeros((c, h, r));
    let mut s = Array3::zeros((c, r, r));
    let mut vt = Array3::zeros((c, r, w));
    for ch in 0..c {
        let plane = image.data.index_axis(ndarray::Axis(0), ch);
        let mat = DMatrix::from_fn(h, w, |i, j| plane[[i, j]]);
        let svd = mat.svd(true, true);
        let (su, sv, svt) = (
            svd.u.expect("svd with u requested"),
            svd.singular_values,
            svd.v_t.expect("svd with v_t requested"),
        );
        for q in 0..r {
            s[[ch, q, q]] = sv[q];
            for i in 0..h {
                u[[ch, i, q]] = su[(i, q)];
            }
            for j in 0..w {
                vt[[ch, q, j]] = svt[(q, j)];
            }
        }
    }
    Ok(TruncatedSvd { u, s, vt })
}

/// All singular values of one channel plane, descending. Used by rank
/// diagnostics and by tests checking the discarded-energy identity.
pub fn singular_values(plane: &Array2<f64>) -> Vec<f64> {
    let (h, w) = plane.dim();
    let mat = DMatrix::from_fn(h, w, |i, j| plane[[i, j]]);
    let svd = mat.svd(false, false);
    svd.singular_values.iter().cloned().collect()
}

/// Numerical rank of a channel plane: singular values above
/// `1e-6 · σ_max`.
pub fn numerical_rank(plane: &Array2<f64>) -> usize {
    let sv = singular_values(plane);
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > 1e-6 * smax).count()
}

/// Anything that can hand out real images for initialization.
pub trait ImageSource {
    fn count(&self) -> usize;
    fn image(&self, index: usize) -> ImageTensor;
}

impl ImageSource for Vec<ImageTensor> {
    fn count(&self) -> usize {
        self.len()
    }
    fn image(&self, index: usize) -> ImageTensor {
        self[index].clone()
    }
}

/// How to seed the parameterization before optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Mappers from truncated SVDs of real images; basis blocks from
    /// projecting further real images into each mapper's subspace.
    SvdReal,
    /// All entries i.i.d. standard normal scaled by 1/sqrt(r).
    Random,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd_real" => Ok(InitScheme::SvdReal),
            "random" => Ok(InitScheme::Random),
            other => Err(Error::Config(format!("unknown init scheme '{other}'"))),
        }
    }
}

/// Build a synthetic dataset for `plan` from real images.
pub fn init_dataset<S: ImageSource>(
    source: &S,
    plan: &StoragePlan,
    scheme: InitScheme,
    rng_seed: u64,
) -> Result<SyntheticDataset> {
    let meta = plan.meta();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    match scheme {
        InitScheme::Random => {
            let scale = 1.0 / (meta.r as f64).sqrt();
            let mut gauss = |shape: (usize, usize, usize)| -> Array3<f64> {
                Array3::from_shape_fn(shape, |_| standard_normal(&mut rng) * scale)
            };
            let mappers = (0..meta.k)
                .map(|id| MapperSet {
                    id,
                    u: gauss((meta.c, meta.h, meta.r)),
                    vt: gauss((meta.c, meta.r, meta.w)),
                })
                .collect();
            let basis = (0..meta.k * meta.m)
                .map(|j| BasisBlock {
                    mapper_id: j / meta.m,
                    sigma: gauss((meta.c, meta.r, meta.r)),
                })
                .collect();
            Ok(SyntheticDataset { mappers, basis, meta })
        }
        InitScheme::SvdReal => {
            let needed = meta.k + meta.k * meta.m;
            if source.count() < needed {
                return Err(Error::Data(format!(
                    "initialization needs {needed} distinct real images, source has {}",
                    source.count()
                )));
            }
            let mut order: Vec<usize> = (0..source.count()).collect();
            order.shuffle(&mut rng);
            let mut draw = order.into_iter();
            let mut mappers = Vec::with_capacity(meta.k);
            let mut basis = Vec::with_capacity(meta.k * meta.m);
            for id in 0..meta.k {
                let src = source.image(draw.next().unwrap());
                check_shape(&src, &meta)?;
                let svd = truncated_svd(&src, meta.r)?;
                let mapper = MapperSet { id, u: svd.u, vt: svd.vt };
                for _ in 0..meta.m {
                    let x = source.image(draw.next().unwrap());
                    check_shape(&x, &meta)?;
                    basis.push(BasisBlock {
                        mapper_id: id,
                        sigma: project_into(&mapper, &x),
                    });
                }
                mappers.push(mapper);
            }
            Ok(SyntheticDataset { mappers, basis, meta })
        }
    }
}

/// Project a real image into a mapper's subspace: σ[c] = U[c]ᵀ·x[c]·Vᵀ[c]ᵀ.
pub fn project_into(mapper: &MapperSet, image: &ImageTensor) -> Array3<f64> {
    let s = mapper.u.shape();
    let (c, r) = (s[0], s[2]);
    let mut sigma = Array3::zeros((c, r, r));
    for ch in 0..c {
        let u = mapper.u.index_axis(ndarray::Axis(0), ch);
        let vt = mapper.vt.index_axis(ndarray::Axis(0), ch);
        let x = image.data.index_axis(ndarray::Axis(0), ch);
        let proj = u.t().dot(&x).dot(&vt.t());
        sigma.index_axis_mut(ndarray::Axis(0), ch).assign(&proj);
    }
    sigma
}

fn check_shape(image: &ImageTensor, meta: &DatasetMeta) -> Result<()> {
    if image.shape() != (meta.c, meta.h, meta.w) {
        return Err(Error::Data(format!(
            "source image shape {:?} does not match dataset ({}, {}, {})",
            image.shape(),
            meta.c,
            meta.h,
            meta.w
        )));
    }
    Ok(())
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Flatten dataset parameters in serialization order (all U, all Vt, all
/// sigma). Used by checkpoint comparison and the meta-optimizer.
pub fn flatten_params(ds: &SyntheticDataset) -> Vec<ArrayD<f64>> {
    let mut out = Vec::new();
    for m in &ds.mappers {
        out.push(m.u.clone().into_dyn());
    }
    for m in &ds.mappers {
        out.push(m.vt.clone().into_dyn());
    }
    for b in &ds.basis {
        out.push(b.sigma.clone().into_dyn());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor {
            data: Array3::from_shape_fn((c, h, w), |_| standard_normal(rng)),
        }
    }

    #[test]
    fn synthesize_identity_case() {
        // r = H = W with identity U, Vt reproduces sigma exactly
        let h = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 1, h, h);
        let eye = Array2::eye(h);
        let mapper = MapperSet {
            id: 0,
            u: eye.clone().insert_axis(ndarray::Axis(0)),
            vt: eye.insert_axis(ndarray::Axis(0)),
        };
        let block = BasisBlock { mapper_id: 0, sigma: x.data.clone() };
        let out = synthesize(&mapper, &block).unwrap();
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn synthesize_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mapper = MapperSet {
            id: 0,
            u: Array3::from_shape_fn((2, 5, 3), |_| standard_normal(&mut rng)),
            vt: Array3::from_shape_fn((2, 3, 6), |_| standard_normal(&mut rng)),
        };
        let sigma = Array3::from_shape_fn((2, 3, 3), |_| standard_normal(&mut rng));
        let c = 2.7;
        let b1 = BasisBlock { mapper_id: 0, sigma: sigma.clone() };
        let b2 = BasisBlock { mapper_id: 0, sigma: sigma.mapv(|v| v * c) };
        let y1 = synthesize(&mapper, &b1).unwrap();
        let y2 = synthesize(&mapper, &b2).unwrap();
        for (a, b) in y1.data.iter().zip(y2.data.iter()) {
            assert!((a * c - b).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesize_matches_triple_loop_oracle() {
        let (h, w, r) = (4usize, 4usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mapper = MapperSet {
            id: 0,
            u: Array3::from_shape_fn((1, h, r), |_| standard_normal(&mut rng)),
            vt: Array3::from_shape_fn((1, r, w), |_| standard_normal(&mut rng)),
        };
        let block = BasisBlock {
            mapper_id: 0,
            sigma: Array3::from_shape_fn((1, r, r), |_| standard_normal(&mut rng)),
        };
        let got = synthesize(&mapper, &block).unwrap();
        // explicit nested-loop triple product
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for a in 0..r {
                    for b in 0..r {
                        acc += mapper.u[[0, i, a]] * block.sigma[[0, a, b]] * mapper.vt[[0, b, j]];
                    }
                }
                assert!((got.data[[0, i, j]] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn synthesize_rejects_foreign_block() {
        let mapper = MapperSet {
            id: 1,
            u: Array3::zeros((1, 4, 2)),
            vt: Array3::zeros((1, 2, 4)),
        };
        let block = BasisBlock { mapper_id: 0, sigma: Array3::zeros((1, 2, 2)) };
        assert!(matches!(
            synthesize(&mapper, &block),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn synthesize_all_order_and_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let meta = DatasetMeta { c: 1, h: 4, w: 4, r: 2, k: 2, m: 3, num_classes: 2 };
        let mappers: Vec<_> = (0..2)
            .map(|id| MapperSet {
                id,
                u: Array3::from_shape_fn((1, 4, 2), |_| standard_normal(&mut rng)),
                vt: Array3::from_shape_fn((1, 2, 4), |_| standard_normal(&mut rng)),
            })
            .collect();
        let basis: Vec<_> = (0..6)
            .map(|j| BasisBlock {
                mapper_id: j / 3,
                sigma: Array3::from_shape_fn((1, 2, 2), |_| standard_normal(&mut rng)),
            })
            .collect();
        let mut ds = SyntheticDataset { mappers, basis, meta };
        let before = synthesize_all(&ds).unwrap();
        assert_eq!(before.len(), 6);
        // perturbing one sigma entry changes only that image
        ds.basis[4].sigma[[0, 0, 0]] += 1.0;
        let after = synthesize_all(&ds).unwrap();
        for j in 0..6 {
            let changed = before[j].data != after[j].data;
            assert_eq!(changed, j == 4, "image {j}");
        }
        // perturbing one U entry changes exactly that mapper's m images
        let before = after;
        ds.mappers[0].u[[0, 1, 1]] += 1.0;
        let after = synthesize_all(&ds).unwrap();
        for j in 0..6 {
            let changed = before[j].data != after[j].data;
            assert_eq!(changed, j < 3, "image {j}");
        }
    }

    #[test]
    fn truncated_svd_full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_image(&mut rng, 1, 5, 5);
        let svd = truncated_svd(&x, 5).unwrap();
        let mapper = MapperSet { id: 0, u: svd.u, vt: svd.vt };
        let block = BasisBlock { mapper_id: 0, sigma: svd.s };
        let rec = synthesize(&mapper, &block).unwrap();
        for (a, b) in rec.data.iter().zip(x.data.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn truncated_svd_rank_one_input() {
        let u = ndarray::arr1(&[1.0, -2.0, 0.5, 3.0]);
        let v = ndarray::arr1(&[0.3, 1.0, -1.5]);
        let mut data = Array3::zeros((1, 4, 3));
        for i in 0..4 {
            for j in 0..3 {
                data[[0, i, j]] = u[i] * v[j];
            }
        }
        let x = ImageTensor { data };
        let svd = truncated_svd(&x, 1).unwrap();
        let mapper = MapperSet { id: 0, u: svd.u, vt: svd.vt };
        let block = BasisBlock { mapper_id: 0, sigma: svd.s };
        let rec = synthesize(&mapper, &block).unwrap();
        for (a, b) in rec.data.iter().zip(x.data.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn truncated_svd_discarded_energy_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = random_image(&mut rng, 1, 8, 8);
            let r = 3;
            let svd = truncated_svd(&x, r).unwrap();
            let mapper = MapperSet { id: 0, u: svd.u, vt: svd.vt };
            let block = BasisBlock { mapper_id: 0, sigma: svd.s };
            let rec = synthesize(&mapper, &block).unwrap();
            let err2: f64 = rec
                .data
                .iter()
                .zip(x.data.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let all = singular_values(&x.data.index_axis(ndarray::Axis(0), 0).to_owned());
            let discarded: f64 = all[r..].iter().map(|s| s * s).sum();
            assert!((err2 - discarded).abs() < 1e-8, "{err2} vs {discarded}");
        }
    }

    #[test]
    fn truncated_svd_rejects_bad_rank() {
        let x = ImageTensor { data: Array3::zeros((1, 4, 6)) };
        assert!(truncated_svd(&x, 0).is_err());
        assert!(truncated_svd(&x, 5).is_err());
        assert!(truncated_svd(&x, 4).is_ok());
    }

    #[test]
    fn budget_reproduces_reference_rows() {
        // CIFAR-10 sized budget, ipc 1
        let rows = [
            (4usize, 15usize, 22usize, 30660usize),
            (8, 4, 30, 30384),
            (12, 4, 12, 30432),
            (16, 3, 9, 30222),
        ];
        for (r, k, m, expect) in rows {
            let plan = plan_budget(3, 32, 32, 10, 1, r, Some(k), Some(m)).unwrap();
            assert_eq!(plan.param_count, expect, "r={r}");
            assert_eq!(plan.budget, 30720);
            assert_eq!(plan.images, k * m);
        }
    }

    #[test]
    fn budget_search_maximizes_images() {
        let plan = plan_budget(1, 28, 28, 2, 1, 2, None, None).unwrap();
        assert!(plan.param_count <= plan.budget);
        assert!(plan.images >= 1);
        // brute-force oracle over the same caps
        let mut best_images = 0;
        for k in 1..=64 {
            for m in 1..=512 {
                if param_count(1, 28, 28, 2, k, m, 2) <= plan.budget {
                    best_images = best_images.max(k * m);
                }
            }
        }
        assert_eq!(plan.images, best_images);
    }

    #[test]
    fn budget_infeasible_is_an_error() {
        // rank so large no single mapper fits
        let err = plan_budget(3, 32, 32, 10, 1, 32, Some(40), Some(50));
        assert!(matches!(err, Err(Error::InfeasibleBudget(_))));
    }

    #[test]
    fn init_svd_real_consistency_with_truncated_svd() {
        // m=1, mapper's own source image as the basis source
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 1, 6, 6);
        let source = vec![img.clone(), img.clone()];
        let plan = StoragePlan {
            c: 1,
            h: 6,
            w: 6,
            num_classes: 2,
            ipc: 1,
            r: 3,
            k: 1,
            m: 1,
            images: 1,
            param_count: param_count(1, 6, 6, 3, 1, 1, 2),
            budget: 72,
            utilization: 0.0,
        };
        let ds = init_dataset(&source, &plan, InitScheme::SvdReal, 1).unwrap();
        let synth = synthesize_all(&ds).unwrap();
        let svd = truncated_svd(&img, 3).unwrap();
        let mapper = MapperSet { id: 0, u: svd.u, vt: svd.vt };
        let block = BasisBlock { mapper_id: 0, sigma: svd.s };
        let rec = synthesize(&mapper, &block).unwrap();
        for (a, b) in synth[0].data.iter().zip(rec.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn init_random_is_reproducible() {
        let plan = plan_budget(1, 8, 8, 2, 1, 2, Some(2), Some(3)).unwrap();
        let empty: Vec<ImageTensor> = Vec::new();
        let a = init_dataset(&empty, &plan, InitScheme::Random, 42).unwrap();
        let b = init_dataset(&empty, &plan, InitScheme::Random, 42).unwrap();
        for (ma, mb) in a.mappers.iter().zip(b.mappers.iter()) {
            assert_eq!(ma.u, mb.u);
            assert_eq!(ma.vt, mb.vt);
        }
        for (ba, bb) in a.basis.iter().zip(b.basis.iter()) {
            assert_eq!(ba.sigma, bb.sigma);
        }
    }

    #[test]
    fn init_svd_real_images_have_bounded_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let source: Vec<ImageTensor> = (0..10).map(|_| random_image(&mut rng, 1, 8, 8)).collect();
        let plan = plan_budget(1, 8, 8, 2, 2, 3, Some(2), Some(2)).unwrap();
        let ds = init_dataset(&source, &plan, InitScheme::SvdReal, 11).unwrap();
        for img in synthesize_all(&ds).unwrap() {
            let plane = img.data.index_axis(ndarray::Axis(0), 0).to_owned();
            assert!(numerical_rank(&plane) <= 3);
        }
    }

    #[test]
    fn init_svd_real_exhausted_source_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let source: Vec<ImageTensor> = (0..3).map(|_| random_image(&mut rng, 1, 8, 8)).collect();
        let plan = plan_budget(1, 8, 8, 2, 2, 3, Some(2), Some(2)).unwrap();
        assert!(matches!(
            init_dataset(&source, &plan, InitScheme::SvdReal, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn truncated_svd_beats_random_factorizations() {
        // Eckart-Young sanity on random 8x8 planes
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_image(&mut rng, 1, 8, 8);
        let r = 2;
        let svd = truncated_svd(&x, r).unwrap();
        let mapper = MapperSet { id: 0, u: svd.u, vt: svd.vt };
        let block = BasisBlock { mapper_id: 0, sigma: svd.s };
        let rec = synthesize(&mapper, &block).unwrap();
        let best: f64 = rec
            .data
            .iter()
            .zip(x.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        for _ in 0..100 {
            let a = Array2::from_shape_fn((8, r), |_| standard_normal(&mut rng));
            let b = Array2::from_shape_fn((r, 8), |_| standard_normal(&mut rng));
            // least-squares-ish scale to give the random factorization a chance
            let ab = a.dot(&b);
            let num: f64 = ab
                .iter()
                .zip(x.data.iter())
                .map(|(p, q)| p * q)
                .sum();
            let den: f64 = ab.iter().map(|p| p * p).sum::<f64>().max(1e-12);
            let scaled = ab.mapv(|v| v * num / den);
            let err: f64 = scaled
                .iter()
                .zip(x.data.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            assert!(best <= err + 1e-9);
        }
    }
}

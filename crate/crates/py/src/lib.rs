//! Python bindings for the distillation core. Arrays cross the boundary
//! as flat row-major float lists plus shape tuples to avoid a hard numpy
//! dependency; reshape on the Python side as needed.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lss_core::labels::LabelBank;
use lss_core::lowrank::{
    self, BasisBlock, DatasetMeta, ImageTensor, MapperSet, SyntheticDataset,
};
use lss_core::schedule::ScheduleConfig;

fn err<T>(e: lss_core::Error) -> PyResult<T> {
    Err(PyValueError::new_err(e.to_string()))
}

fn to_image(flat: Vec<f64>, c: usize, h: usize, w: usize) -> PyResult<ImageTensor> {
    if flat.len() != c * h * w {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a {c}x{h}x{w} image, got {}",
            c * h * w,
            flat.len()
        )));
    }
    Ok(ImageTensor {
        data: ndarray::Array3::from_shape_vec((c, h, w), flat).unwrap(),
    })
}

/// Floats needed for k mappers, k*m basis blocks and the label rows.
#[pyfunction]
fn param_count(c: usize, h: usize, w: usize, r: usize, k: usize, m: usize, num_classes: usize) -> usize {
    lowrank::param_count(c, h, w, r, k, m, num_classes)
}

/// Resolve (k, m) against the pixel budget; returns the plan as a dict.
#[pyfunction]
#[pyo3(signature = (c, h, w, num_classes, ipc, r, k=None, m=None))]
#[allow(clippy::too_many_arguments)]
fn plan_budget(
    py: Python<'_>,
    c: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    ipc: usize,
    r: usize,
    k: Option<usize>,
    m: Option<usize>,
) -> PyResult<Py<PyDict>> {
    let plan = match lowrank::plan_budget(c, h, w, num_classes, ipc, r, k, m) {
        Ok(p) => p,
        Err(e) => return err(e),
    };
    let d = PyDict::new(py);
    d.set_item("c", plan.c)?;
    d.set_item("h", plan.h)?;
    d.set_item("w", plan.w)?;
    d.set_item("num_classes", plan.num_classes)?;
    d.set_item("ipc", plan.ipc)?;
    d.set_item("r", plan.r)?;
    d.set_item("k", plan.k)?;
    d.set_item("m", plan.m)?;
    d.set_item("images", plan.images)?;
    d.set_item("param_count", plan.param_count)?;
    d.set_item("budget", plan.budget)?;
    d.set_item("utilization", plan.utilization)?;
    Ok(d.into())
}

/// Rank-r truncated SVD of a (c,h,w) image; returns (u, s, vt) as flat
/// lists with shapes (c,h,r), (c,r,r), (c,r,w).
#[pyfunction]
fn truncated_svd(
    flat: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let img = to_image(flat, c, h, w)?;
    match lowrank::truncated_svd(&img, r) {
        Ok(svd) => Ok((
            svd.u.iter().cloned().collect(),
            svd.s.iter().cloned().collect(),
            svd.vt.iter().cloned().collect(),
        )),
        Err(e) => err(e),
    }
}

/// Normalized trajectory-matching loss.
#[pyfunction]
fn matching_loss(theta_n: Vec<f64>, theta_start: Vec<f64>, theta_target: Vec<f64>) -> PyResult<f64> {
    let n = ndarray::Array1::from_vec(theta_n);
    let s = ndarray::Array1::from_vec(theta_start);
    let t = ndarray::Array1::from_vec(theta_target);
    match lss_core::matcher::matching_loss(&n, &s, &t) {
        Ok(v) => Ok(v),
        Err(e) => err(e),
    }
}

/// Current maximum of the progressive start-epoch ramp.
#[pyfunction]
fn max_start_at(it: usize, max_start: usize, delta: usize, window: f64, total: usize) -> f64 {
    let cfg = ScheduleConfig {
        max_start,
        delta,
        w: window,
        total_iterations: total,
        progressive: true,
    };
    lss_core::schedule::max_start_at(it, &cfg)
}

/// Draw one start epoch from the progressive schedule.
#[pyfunction]
fn sample_start(
    it: usize,
    max_start: usize,
    delta: usize,
    window: f64,
    total: usize,
    seed: u64,
) -> usize {
    use rand::SeedableRng;
    let cfg = ScheduleConfig {
        max_start,
        delta,
        w: window,
        total_iterations: total,
        progressive: true,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    lss_core::schedule::sample_start(it, &cfg, &mut rng)
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    lss_core::labels::softmax_vec(&logits)
}

#[pyfunction]
fn soft_cross_entropy(pred_logits: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    match lss_core::labels::soft_cross_entropy(&pred_logits, &target) {
        Ok(v) => Ok(v),
        Err(e) => err(e),
    }
}

/// A synthetic dataset (mappers, basis blocks, soft labels) mirroring the
/// LSS1 container.
#[pyclass]
struct Dataset {
    inner: SyntheticDataset,
    labels: LabelBank,
}

#[pymethods]
impl Dataset {
    /// Random-init dataset for the given geometry.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    fn random(
        c: usize,
        h: usize,
        w: usize,
        num_classes: usize,
        ipc: usize,
        r: usize,
        k: usize,
        m: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let plan = match lowrank::plan_budget(c, h, w, num_classes, ipc, r, Some(k), Some(m)) {
            Ok(p) => p,
            Err(e) => return err(e),
        };
        let empty: Vec<ImageTensor> = Vec::new();
        let inner = match lowrank::init_dataset(&empty, &plan, lowrank::InitScheme::Random, seed) {
            Ok(d) => d,
            Err(e) => return err(e),
        };
        let labels = lss_core::labels::init_labels(
            &plan,
            lss_core::labels::LabelInit::RoundRobinSmoothed,
            seed ^ 0xA5A5_5A5A,
        );
        Ok(Dataset { inner, labels })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        match lss_core::container::load_dataset(Path::new(path)) {
            Ok((inner, labels)) => Ok(Dataset { inner, labels }),
            Err(e) => err(e),
        }
    }

    fn save(&self, path: &str) -> PyResult<()> {
        match lss_core::container::save_dataset(&self.inner, &self.labels, Path::new(path)) {
            Ok(()) => Ok(()),
            Err(e) => err(e),
        }
    }

    #[getter]
    fn meta(&self, py: Python<'_>) -> PyResult<Py<PyDict>> {
        let m = &self.inner.meta;
        let d = PyDict::new(py);
        d.set_item("c", m.c)?;
        d.set_item("h", m.h)?;
        d.set_item("w", m.w)?;
        d.set_item("r", m.r)?;
        d.set_item("k", m.k)?;
        d.set_item("m", m.m)?;
        d.set_item("num_classes", m.num_classes)?;
        d.set_item("images", m.images())?;
        Ok(d.into())
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Synthesize image j as (flat_pixels, (c, h, w)).
    fn synthesize(&self, index: usize) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
        let m = &self.inner.meta;
        if index >= m.images() {
            return Err(PyValueError::new_err(format!(
                "image index {index} out of range ({} images)",
                m.images()
            )));
        }
        let mapper = &self.inner.mappers[index / m.m];
        match lowrank::synthesize(mapper, &self.inner.basis[index]) {
            Ok(img) => Ok((img.data.iter().cloned().collect(), (m.c, m.h, m.w))),
            Err(e) => err(e),
        }
    }

    /// Softmax label distribution of image j.
    fn label_distribution(&self, index: usize) -> PyResult<Vec<f64>> {
        match lss_core::labels::distribution(&self.labels, index) {
            Ok(d) => Ok(d.to_vec()),
            Err(e) => err(e),
        }
    }

    /// Replace mapper `id` with explicit (u, vt) flats; mainly for tests.
    fn set_mapper(&mut self, id: usize, u: Vec<f64>, vt: Vec<f64>) -> PyResult<()> {
        let m = &self.inner.meta;
        if id >= m.k {
            return Err(PyValueError::new_err(format!("mapper {id} out of range")));
        }
        if u.len() != m.c * m.h * m.r || vt.len() != m.c * m.r * m.w {
            return Err(PyValueError::new_err("mapper array lengths do not match the geometry"));
        }
        self.inner.mappers[id] = MapperSet {
            id,
            u: ndarray::Array3::from_shape_vec((m.c, m.h, m.r), u).unwrap(),
            vt: ndarray::Array3::from_shape_vec((m.c, m.r, m.w), vt).unwrap(),
        };
        Ok(())
    }

    /// Replace basis block `index` with an explicit sigma flat.
    fn set_sigma(&mut self, index: usize, sigma: Vec<f64>) -> PyResult<()> {
        let m = &self.inner.meta;
        if index >= m.images() {
            return Err(PyValueError::new_err(format!("image {index} out of range")));
        }
        if sigma.len() != m.c * m.r * m.r {
            return Err(PyValueError::new_err("sigma length does not match the geometry"));
        }
        self.inner.basis[index] = BasisBlock {
            mapper_id: index / m.m,
            sigma: ndarray::Array3::from_shape_vec((m.c, m.r, m.r), sigma).unwrap(),
        };
        Ok(())
    }

    fn __repr__(&self) -> String {
        let DatasetMeta { c, h, w, r, k, m, num_classes } = self.inner.meta;
        format!(
            "Dataset(c={c}, h={h}, w={w}, r={r}, k={k}, m={m}, num_classes={num_classes})"
        )
    }
}

#[pymodule]
fn lss_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(plan_budget, m)?)?;
    m.add_function(wrap_pyfunction!(truncated_svd, m)?)?;
    m.add_function(wrap_pyfunction!(matching_loss, m)?)?;
    m.add_function(wrap_pyfunction!(max_start_at, m)?)?;
    m.add_function(wrap_pyfunction!(sample_start, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(soft_cross_entropy, m)?)?;
    m.add_class::<Dataset>()?;
    Ok(())
}

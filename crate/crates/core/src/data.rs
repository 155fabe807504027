//! Real-dataset ingestion: CIFAR binary and IDX readers, a normalized
//! on-disk float store, and a small procedurally generated desk dataset
//! for fast end-to-end runs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lowrank::{ImageSource, ImageTensor};

/// A normalized image set held in memory: pixels are
/// (raw/255 − mean[c]) / std[c] with per-channel statistics taken from
/// the training split.
#[derive(Clone, Debug)]
pub struct DatasetStore {
    pub name: String,
    /// (N, C, H, W), normalized.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DatasetStore {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of all samples of one class.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

impl ImageSource for DatasetStore {
    fn count(&self) -> usize {
        self.len()
    }
    fn image(&self, index: usize) -> ImageTensor {
        ImageTensor {
            data: self.images.index_axis(ndarray::Axis(0), index).to_owned(),
        }
    }
}

const LSSD_MAGIC: &[u8; 4] = b"LSSD";
const LSSD_VERSION: u16 = 1;

/// Write a store as the internal normalized-float format. Byte layout is
/// deterministic so re-ingestion is idempotent at the file level.
pub fn save_store(store: &DatasetStore, path: &Path) -> Result<()> {
    let (c, h, w) = store.shape();
    let mut payload = Vec::new();
    let name = store.name.as_bytes();
    payload.write_u16::<LittleEndian>(name.len() as u16).unwrap();
    payload.extend_from_slice(name);
    for v in [store.len(), c, h, w, store.num_classes] {
        payload.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    for ch in 0..c {
        payload.write_f64::<LittleEndian>(store.mean[ch]).unwrap();
        payload.write_f64::<LittleEndian>(store.std[ch]).unwrap();
    }
    for &l in &store.labels {
        payload.write_u32::<LittleEndian>(l as u32).unwrap();
    }
    for &v in store.images.iter() {
        payload.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(LSSD_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&LSSD_VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&payload).map_err(|e| Error::io(path, e))?;
    f.write_all(&crc32fast::hash(&payload).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<DatasetStore> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let fail = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    if data.len() < 10 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "shorter than header plus checksum".into(),
        });
    }
    if &data[0..4] != LSSD_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u16::from_le_bytes([data[4], data[5]]);
    if version != LSSD_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: LSSD_VERSION,
        });
    }
    let payload = &data[6..data.len() - 4];
    let stored = u32::from_le_bytes(data[data.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut cur = payload;
    let mut need = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("payload needs {n} more bytes"),
            });
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    let name_len = need(2)?.read_u16::<LittleEndian>().unwrap() as usize;
    let name = String::from_utf8(need(name_len)?.to_vec())
        .map_err(|_| fail("dataset name is not UTF-8".into()))?;
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = need(4)?.read_u32::<LittleEndian>().unwrap() as usize;
    }
    let [n, c, h, w, num_classes] = dims;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        mean[ch] = need(8)?.read_f64::<LittleEndian>().unwrap();
        std[ch] = need(8)?.read_f64::<LittleEndian>().unwrap();
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = need(4)?.read_u32::<LittleEndian>().unwrap() as usize;
        if l >= num_classes {
            return Err(fail(format!("label {l} out of range for {num_classes} classes")));
        }
        labels.push(l);
    }
    let mut raw = need(4 * n * c * h * w)?;
    let mut pixels = Vec::with_capacity(n * c * h * w);
    for _ in 0..n * c * h * w {
        pixels.push(raw.read_f32::<LittleEndian>().unwrap() as f64);
    }
    if !cur.is_empty() {
        return Err(fail(format!("{} trailing payload bytes", cur.len())));
    }
    Ok(DatasetStore {
        name,
        images: Array4::from_shape_vec((n, c, h, w), pixels).unwrap(),
        labels,
        num_classes,
        mean,
        std,
    })
}

fn per_channel_stats(raw: &Array4<f64>) -> (Vec<f64>, Vec<f64>) {
    let c = raw.shape()[1];
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let plane = raw.index_axis(ndarray::Axis(1), ch);
        let n = plane.len() as f64;
        let mu = plane.sum() / n;
        let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean[ch] = mu;
        std[ch] = var.sqrt().max(1e-8);
    }
    (mean, std)
}

fn normalize_in_place(raw: &mut Array4<f64>, mean: &[f64], std: &[f64]) {
    let c = raw.shape()[1];
    for ch in 0..c {
        let mut plane = raw.index_axis_mut(ndarray::Axis(1), ch);
        plane.mapv_inplace(|v| (v - mean[ch]) / std[ch]);
    }
}

fn build_splits(
    name: &str,
    mut train_raw: Array4<f64>,
    train_labels: Vec<usize>,
    mut test_raw: Array4<f64>,
    test_labels: Vec<usize>,
    num_classes: usize,
) -> (DatasetStore, DatasetStore) {
    // statistics come from the training split only
    let (mean, std) = per_channel_stats(&train_raw);
    normalize_in_place(&mut train_raw, &mean, &std);
    normalize_in_place(&mut test_raw, &mean, &std);
    let train = DatasetStore {
        name: format!("{name}/train"),
        images: train_raw,
        labels: train_labels,
        num_classes,
        mean: mean.clone(),
        std: std.clone(),
    };
    let test = DatasetStore {
        name: format!("{name}/test"),
        images: test_raw,
        labels: test_labels,
        num_classes,
        mean,
        std,
    };
    (train, test)
}

/// One CIFAR-style binary file: records of `label_bytes` label bytes
/// (the last one is used) followed by C·H·W pixel bytes in planar order.
fn read_cifar_bin(
    path: &Path,
    label_bytes: usize,
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = label_bytes + 3 * 32 * 32;
    if data.is_empty() || data.len() % record != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("file size {} is not a multiple of record size {record}", data.len()),
        });
    }
    let n = data.len() / record;
    let mut pixels = Vec::with_capacity(n * 3 * 32 * 32);
    let mut labels = Vec::with_capacity(n);
    for rec in data.chunks_exact(record) {
        let label = rec[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn cifar_files(root: &Path, train_names: &[&str], test_name: &str) -> Result<(Vec<PathBuf>, PathBuf)> {
    let mut train = Vec::new();
    for name in train_names {
        let p = root.join(name);
        if !p.exists() {
            return Err(Error::MissingDependency(format!(
                "expected CIFAR batch file {}",
                p.display()
            )));
        }
        train.push(p);
    }
    let test = root.join(test_name);
    if !test.exists() {
        return Err(Error::MissingDependency(format!(
            "expected CIFAR test file {}",
            test.display()
        )));
    }
    Ok((train, test))
}

fn ingest_cifar(
    name: &str,
    root: &Path,
    train_names: &[&str],
    test_name: &str,
    label_bytes: usize,
    num_classes: usize,
) -> Result<(DatasetStore, DatasetStore)> {
    let (train_paths, test_path) = cifar_files(root, train_names, test_name)?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in &train_paths {
        let (px, lb) = read_cifar_bin(p, label_bytes, num_classes)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let n = labels.len();
    let train_raw = Array4::from_shape_vec((n, 3, 32, 32), pixels).unwrap();
    let (tpx, tlb) = read_cifar_bin(&test_path, label_bytes, num_classes)?;
    let tn = tlb.len();
    let test_raw = Array4::from_shape_vec((tn, 3, 32, 32), tpx).unwrap();
    Ok(build_splits(name, train_raw, labels, test_raw, tlb, num_classes))
}

/// One IDX file. Images need magic 0x00000803 (u8, 3 dims), labels
/// 0x00000801 (u8, 1 dim). All integers are big-endian.
fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    f.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    let mut cur = &data[..];
    if cur.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "missing IDX magic".into(),
        });
    }
    let magic = cur.read_u32::<BigEndian>().unwrap();
    if magic >> 8 != 0x08 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("IDX magic {magic:#010x} does not declare u8 data"),
        });
    }
    let ndims = (magic & 0xFF) as usize;
    if cur.len() < 4 * ndims {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "missing IDX dimension sizes".into(),
        });
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(cur.read_u32::<BigEndian>().unwrap() as usize);
    }
    let total: usize = dims.iter().product();
    if cur.len() != total {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("IDX body has {} bytes, dimensions require {total}", cur.len()),
        });
    }
    Ok((dims, cur.to_vec()))
}

fn idx_split(root: &Path, images: &str, labels: &str) -> Result<(Array4<f64>, Vec<usize>)> {
    let (idim, ibytes) = read_idx(&root.join(images))?;
    let (ldim, lbytes) = read_idx(&root.join(labels))?;
    let ipath = root.join(images);
    if idim.len() != 3 {
        return Err(Error::Format {
            path: ipath.clone(),
            detail: format!("image IDX must be 3-dimensional, found {} dims", idim.len()),
        });
    }
    if ldim.len() != 1 || ldim[0] != idim[0] {
        return Err(Error::Format {
            path: root.join(labels),
            detail: "label IDX does not pair with the image file".into(),
        });
    }
    let (n, h, w) = (idim[0], idim[1], idim[2]);
    let pixels: Vec<f64> = ibytes.iter().map(|&b| b as f64 / 255.0).collect();
    let raw = Array4::from_shape_vec((n, 1, h, w), pixels).unwrap();
    Ok((raw, lbytes.iter().map(|&b| b as usize).collect()))
}

/// Read an IDX dataset (MNIST naming convention) from `root`.
pub fn ingest_idx(name: &str, root: &Path) -> Result<(DatasetStore, DatasetStore)> {
    let pick = |candidates: [&str; 2]| -> Result<String> {
        for c in candidates {
            if root.join(c).exists() {
                return Ok(c.to_string());
            }
        }
        Err(Error::MissingDependency(format!(
            "none of {candidates:?} found under {}",
            root.display()
        )))
    };
    let ti = pick(["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?;
    let tl = pick(["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?;
    let si = pick(["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?;
    let sl = pick(["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?;
    let (train_raw, train_labels) = idx_split(root, &ti, &tl)?;
    let (test_raw, test_labels) = idx_split(root, &si, &sl)?;
    let num_classes = train_labels
        .iter()
        .chain(test_labels.iter())
        .max()
        .map(|&m| m + 1)
        .unwrap_or(0);
    if num_classes == 0 {
        return Err(Error::Data("IDX dataset is empty".into()));
    }
    Ok(build_splits(name, train_raw, train_labels, test_raw, test_labels, num_classes))
}

/// Draw an anti-aliased shape onto a 28x28 canvas. Class is the XOR of
/// shape and size (class 0: small disk or large ring, class 1: large
/// disk or small ring), so no single exemplar per class can separate the
/// test set: any one-feature rule gets one of the four cells wrong.
fn desk_shape(class: usize, mode: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const S: usize = 28;
    let cx = 13.5 + rng.gen_range(-2.5..2.5);
    let cy = 13.5 + rng.gen_range(-2.5..2.5);
    let fg = rng.gen_range(0.7..1.0);
    let jitter = rng.gen_range(-0.6..0.6);
    let soft = |d: f64| 1.0 / (1.0 + (d / 0.7).exp());
    let mut canvas = vec![0.0f64; S * S];
    for y in 0..S {
        for x in 0..S {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let rad = (dx * dx + dy * dy).sqrt();
            let d = match (class, mode) {
                (0, 0) => rad - (4.0 + jitter),          // small disk
                (0, _) => (rad - (9.0 + jitter)).abs() - 1.2, // large ring
                (1, 0) => rad - (8.5 + jitter),          // large disk
                _ => (rad - (4.5 + jitter)).abs() - 1.2, // small ring
            };
            canvas[y * S + x] = fg * soft(d);
        }
    }
    for v in canvas.iter_mut() {
        *v = (*v + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0);
    }
    canvas
}

/// Deterministic two-class 28x28 grayscale dataset with two visual modes
/// per class. Intended for quick end-to-end runs on one CPU.
pub fn generate_desk(
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> (DatasetStore, DatasetStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen_split = |per_class: usize, rng: &mut ChaCha8Rng| {
        let n = per_class * 2;
        let mut pixels = Vec::with_capacity(n * 28 * 28);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let mode = (i / 2) % 2;
            pixels.extend(desk_shape(class, mode, rng));
            labels.push(class);
        }
        (Array4::from_shape_vec((n, 1, 28, 28), pixels).unwrap(), labels)
    };
    let (train_raw, train_labels) = gen_split(train_per_class, &mut rng);
    let (test_raw, test_labels) = gen_split(test_per_class, &mut rng);
    build_splits("desk", train_raw, train_labels, test_raw, test_labels, 2)
}

/// Per-class sample counts as a JSON manifest next to the stores.
fn write_manifest(dir: &Path, train: &DatasetStore, test: &DatasetStore) -> Result<()> {
    let (c, h, w) = train.shape();
    let manifest = serde_json::json!({
        "name": train.name.trim_end_matches("/train"),
        "channels": c,
        "height": h,
        "width": w,
        "num_classes": train.num_classes,
        "mean": train.mean,
        "std": train.std,
        "train_class_counts": train.class_counts(),
        "test_class_counts": test.class_counts(),
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&path, e))
}

/// Ingest a named dataset into `out_dir` as train.lssd, test.lssd and
/// manifest.json. `source` is unused for the generated desk dataset.
pub fn ingest(name: &str, source: Option<&Path>, out_dir: &Path) -> Result<()> {
    let need_source = || {
        source.ok_or_else(|| {
            Error::Config(format!("dataset '{name}' needs a source directory"))
        })
    };
    let (train, test) = match name {
        "desk" => generate_desk(250, 200, 42),
        "cifar10" => ingest_cifar(
            name,
            need_source()?,
            &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            "test_batch.bin",
            1,
            10,
        )?,
        "cifar100" => ingest_cifar(name, need_source()?, &["train.bin"], "test.bin", 2, 100)?,
        // SVHN is expected pre-converted to the CIFAR-10 record layout
        "svhn" => ingest_cifar(name, need_source()?, &["train.bin"], "test.bin", 1, 10)?,
        "idx" | "mnist" | "fashion" => ingest_idx(name, need_source()?)?,
        other => {
            return Err(Error::Config(format!(
                "unknown dataset '{other}' (expected desk, cifar10, cifar100, svhn, mnist, fashion or idx)"
            )))
        }
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_store(&train, &out_dir.join("train.lssd"))?;
    save_store(&test, &out_dir.join("test.lssd"))?;
    write_manifest(out_dir, &train, &test)
}

/// View one normalized image.
pub fn image_view(store: &DatasetStore, index: usize) -> ArrayView3<'_, f64> {
    store.images.index_axis(ndarray::Axis(0), index)
}

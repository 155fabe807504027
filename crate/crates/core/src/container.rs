//! Binary containers: LSS1 (synthetic dataset + labels) and LSSB
//! (expert trajectory). Both are little-endian float32 payloads guarded
//! by a trailing CRC32 over everything after the magic+version prefix.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::expert::{Trajectory, TrajectoryMeta};
use crate::labels::LabelBank;
use crate::lowrank::{BasisBlock, DatasetMeta, MapperSet, SyntheticDataset};

pub const LSS1_MAGIC: &[u8; 4] = b"LSS1";
pub const LSSB_MAGIC: &[u8; 4] = b"LSSB";
pub const FORMAT_VERSION: u16 = 1;

fn write_f32s(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("needed {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(self.take(2, what)?.read_u16::<LittleEndian>().unwrap())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(self.take(4, what)?.read_u32::<LittleEndian>().unwrap())
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(self.take(8, what)?.read_u64::<LittleEndian>().unwrap())
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(self.take(8, what)?.read_f64::<LittleEndian>().unwrap())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut raw = self.take(4 * n, what)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(raw.read_f32::<LittleEndian>().unwrap() as f64);
        }
        Ok(out)
    }
}

fn check_prefix(path: &Path, data: &[u8], magic: &[u8; 4]) -> Result<()> {
    if data.len() < 6 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "shorter than the 6-byte header".into(),
        });
    }
    if &data[0..4] != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "bad magic {:?}, expected {:?}",
                &data[0..4],
                std::str::from_utf8(magic).unwrap()
            ),
        });
    }
    let version = u16::from_le_bytes([data[4], data[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Split payload from trailing CRC and verify it.
fn checked_payload<'a>(path: &Path, data: &'a [u8]) -> Result<&'a [u8]> {
    if data.len() < 10 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "no room for payload and CRC".into(),
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
    Ok(payload)
}

fn write_file(path: &Path, magic: &[u8; 4], payload: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(magic).map_err(|e| Error::io(path, e))?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(payload).map_err(|e| Error::io(path, e))?;
    f.write_all(&crc32fast::hash(payload).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    Ok(data)
}

/// Write a synthetic dataset and its label bank as an LSS1 container:
/// metadata u32s, then all U, all Vt, all sigma, then label logits,
/// float32 little-endian in declaration order.
pub fn save_dataset(ds: &SyntheticDataset, labels: &LabelBank, path: &Path) -> Result<()> {
    ds.check_invariants()?;
    let m = &ds.meta;
    if labels.rows() != m.images() || labels.num_classes() != m.num_classes {
        return Err(Error::InvalidArgument(format!(
            "label bank {}x{} does not match dataset ({} images, {} classes)",
            labels.rows(),
            labels.num_classes(),
            m.images(),
            m.num_classes
        )));
    }
    let mut payload = Vec::new();
    for v in [m.c, m.h, m.w, m.r, m.k, m.m, m.num_classes] {
        payload.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    for mapper in &ds.mappers {
        write_f32s(&mut payload, mapper.u.iter().cloned());
    }
    for mapper in &ds.mappers {
        write_f32s(&mut payload, mapper.vt.iter().cloned());
    }
    for block in &ds.basis {
        write_f32s(&mut payload, block.sigma.iter().cloned());
    }
    write_f32s(&mut payload, labels.logits.iter().cloned());
    write_file(path, LSS1_MAGIC, &payload)
}

pub fn load_dataset(path: &Path) -> Result<(SyntheticDataset, LabelBank)> {
    let data = read_file(path)?;
    check_prefix(path, &data, LSS1_MAGIC)?;
    let payload = checked_payload(path, &data)?;
    let mut r = Reader { data: payload, pos: 0, path };
    let mut meta_raw = [0usize; 7];
    for (i, name) in ["C", "H", "W", "r", "k", "m", "num_classes"].iter().enumerate() {
        meta_raw[i] = r.u32(name)? as usize;
    }
    let meta = DatasetMeta {
        c: meta_raw[0],
        h: meta_raw[1],
        w: meta_raw[2],
        r: meta_raw[3],
        k: meta_raw[4],
        m: meta_raw[5],
        num_classes: meta_raw[6],
    };
    let mut mappers: Vec<MapperSet> = (0..meta.k)
        .map(|id| {
            let u = r.f32s(meta.c * meta.h * meta.r, "U")?;
            Ok(MapperSet {
                id,
                u: Array3::from_shape_vec((meta.c, meta.h, meta.r), u).unwrap(),
                vt: Array3::zeros((meta.c, meta.r, meta.w)),
            })
        })
        .collect::<Result<_>>()?;
    for mapper in mappers.iter_mut() {
        let vt = r.f32s(meta.c * meta.r * meta.w, "Vt")?;
        mapper.vt = Array3::from_shape_vec((meta.c, meta.r, meta.w), vt).unwrap();
    }
    let basis: Vec<BasisBlock> = (0..meta.images())
        .map(|j| {
            let s = r.f32s(meta.c * meta.r * meta.r, "sigma")?;
            Ok(BasisBlock {
                mapper_id: j / meta.m,
                sigma: Array3::from_shape_vec((meta.c, meta.r, meta.r), s).unwrap(),
            })
        })
        .collect::<Result<_>>()?;
    let logits = r.f32s(meta.images() * meta.num_classes, "labels")?;
    if r.pos != payload.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} unexpected trailing payload bytes", payload.len() - r.pos),
        });
    }
    let labels = LabelBank {
        logits: Array2::from_shape_vec((meta.images(), meta.num_classes), logits).unwrap(),
    };
    Ok((SyntheticDataset { mappers, basis, meta }, labels))
}

/// Write an expert trajectory as an LSSB container: meta block
/// (spec hash, dataset id, lr, seed), epoch count u32, param length u64,
/// then epochs+1 snapshots as float32 little-endian.
pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let epochs = traj.meta.epochs;
    if traj.snapshots.len() != epochs + 1 {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} snapshots for {} epochs",
            traj.snapshots.len(),
            epochs
        )));
    }
    let param_len = traj.snapshots[0].len();
    let mut payload = Vec::new();
    payload.write_u64::<LittleEndian>(traj.meta.spec_hash).unwrap();
    let id = traj.meta.dataset_id.as_bytes();
    payload.write_u16::<LittleEndian>(id.len() as u16).unwrap();
    payload.extend_from_slice(id);
    payload.write_f64::<LittleEndian>(traj.meta.lr).unwrap();
    payload.write_u64::<LittleEndian>(traj.meta.seed).unwrap();
    payload.write_u32::<LittleEndian>(epochs as u32).unwrap();
    payload.write_u64::<LittleEndian>(param_len as u64).unwrap();
    for snap in &traj.snapshots {
        if snap.len() != param_len {
            return Err(Error::InvalidArgument(
                "trajectory snapshots differ in length".into(),
            ));
        }
        write_f32s(&mut payload, snap.iter().cloned());
    }
    write_file(path, LSSB_MAGIC, &payload)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let data = read_file(path)?;
    check_prefix(path, &data, LSSB_MAGIC)?;
    let payload = checked_payload(path, &data)?;
    let mut r = Reader { data: payload, pos: 0, path };
    let spec_hash = r.u64("spec hash")?;
    let id_len = r.u16("dataset id length")? as usize;
    let dataset_id = String::from_utf8(r.take(id_len, "dataset id")?.to_vec())
        .map_err(|_| Error::Format {
            path: path.to_path_buf(),
            detail: "dataset id is not valid UTF-8".into(),
        })?;
    let lr = r.f64("learning rate")?;
    let seed = r.u64("seed")?;
    let epochs = r.u32("epoch count")? as usize;
    let param_len = r.u64("param length")? as usize;
    let snapshots: Vec<Array1<f64>> = (0..epochs + 1)
        .map(|_| Ok(Array1::from_vec(r.f32s(param_len, "snapshot")?)))
        .collect::<Result<_>>()?;
    if r.pos != payload.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} unexpected trailing payload bytes", payload.len() - r.pos),
        });
    }
    Ok(Trajectory {
        snapshots,
        meta: TrajectoryMeta { spec_hash, dataset_id, lr, seed, epochs },
    })
}

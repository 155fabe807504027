//! PNG export of a distilled dataset: per-mapper image grids, mapper
//! subspace visualizations and basis-block heatmaps. Pixels are
//! de-normalized with the dataset statistics and clamped to [0,255];
//! this is the only place in the pipeline that clamps.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::lowrank::{synthesize, ImageTensor, MapperSet, SyntheticDataset};

const CELL_PAD: usize = 2;

fn denorm_byte(v: f64, mean: f64, std: f64) -> u8 {
    ((v * std + mean) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Lay out (C,H,W) tiles into a near-square grid with a light border.
fn grid_layout(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (rows, cols)
}

fn save_tiles(
    tiles: &[Array3<f64>],
    mean: &[f64],
    std: &[f64],
    path: &Path,
) -> Result<()> {
    if tiles.is_empty() {
        return Err(Error::InvalidArgument("no tiles to export".into()));
    }
    let (c, h, w) = {
        let s = tiles[0].shape();
        (s[0], s[1], s[2])
    };
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!(
            "PNG export supports 1 or 3 channels, got {c}"
        )));
    }
    let (rows, cols) = grid_layout(tiles.len());
    let out_h = rows * (h + CELL_PAD) + CELL_PAD;
    let out_w = cols * (w + CELL_PAD) + CELL_PAD;
    let pixel_at = |tile: &Array3<f64>, ch: usize, y: usize, x: usize| {
        denorm_byte(tile[[ch, y, x]], mean[ch], std[ch])
    };
    let result = if c == 1 {
        let mut img = GrayImage::from_pixel(out_w as u32, out_h as u32, image::Luma([32]));
        for (i, tile) in tiles.iter().enumerate() {
            let (ty, tx) = (i / cols, i % cols);
            for y in 0..h {
                for x in 0..w {
                    let px = (tx * (w + CELL_PAD) + CELL_PAD + x) as u32;
                    let py = (ty * (h + CELL_PAD) + CELL_PAD + y) as u32;
                    img.put_pixel(px, py, image::Luma([pixel_at(tile, 0, y, x)]));
                }
            }
        }
        img.save(path)
    } else {
        let mut img = RgbImage::from_pixel(out_w as u32, out_h as u32, image::Rgb([32, 32, 32]));
        for (i, tile) in tiles.iter().enumerate() {
            let (ty, tx) = (i / cols, i % cols);
            for y in 0..h {
                for x in 0..w {
                    let px = (tx * (w + CELL_PAD) + CELL_PAD + x) as u32;
                    let py = (ty * (h + CELL_PAD) + CELL_PAD + y) as u32;
                    let rgb = [
                        pixel_at(tile, 0, y, x),
                        pixel_at(tile, 1, y, x),
                        pixel_at(tile, 2, y, x),
                    ];
                    img.put_pixel(px, py, image::Rgb(rgb));
                }
            }
        }
        img.save(path)
    };
    result.map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("PNG encode failed: {e}"),
    })
}

/// The subspace pattern a mapper carries on its own: per channel U·Vᵀ
/// (identity basis block).
pub fn mapper_pattern(mapper: &MapperSet) -> Array3<f64> {
    let s = mapper.u.shape();
    let (c, h, r) = (s[0], s[1], s[2]);
    let w = mapper.vt.shape()[2];
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let u = mapper.u.index_axis(ndarray::Axis(0), ch);
        let vt = mapper.vt.index_axis(ndarray::Axis(0), ch);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&u.dot(&vt));
    }
    let _ = r;
    out
}

/// A basis block rendered as a min-max normalized grayscale heatmap so
/// relative structure is visible regardless of scale.
fn sigma_heatmap(sigma: &Array3<f64>) -> Array3<f64> {
    let lo = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sigma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let c = sigma.shape()[0];
    let r = sigma.shape()[1];
    let mut out = Array3::zeros((1, r, c * r));
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                out[[0, i, ch * r + j]] = (sigma[[ch, i, j]] - lo) / span;
            }
        }
    }
    out
}

/// Export every mapper's synthesized images, its subspace pattern and
/// its basis heatmaps under `dir`. Returns the written paths; the same
/// state exports byte-identically.
pub fn export_dataset(
    dataset: &SyntheticDataset,
    mean: &[f64],
    std: &[f64],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    dataset.check_invariants()?;
    let meta = &dataset.meta;
    if mean.len() != meta.c || std.len() != meta.c {
        return Err(Error::InvalidArgument(format!(
            "need {} per-channel mean/std values",
            meta.c
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    // heatmaps are unit-scaled already, identity de-normalization
    let flat_mean = vec![0.0];
    let flat_std = vec![1.0];
    for mapper in &dataset.mappers {
        let blocks: Vec<&crate::lowrank::BasisBlock> = dataset
            .basis
            .iter()
            .filter(|b| b.mapper_id == mapper.id)
            .collect();
        let images: Vec<Array3<f64>> = blocks
            .iter()
            .map(|b| synthesize(mapper, b).map(|img| img.data))
            .collect::<Result<_>>()?;
        let p = dir.join(format!("mapper_{:03}_images.png", mapper.id));
        save_tiles(&images, mean, std, &p)?;
        written.push(p);

        let p = dir.join(format!("mapper_{:03}_pattern.png", mapper.id));
        save_tiles(&[mapper_pattern(mapper)], mean, std, &p)?;
        written.push(p);

        let heat: Vec<Array3<f64>> = blocks.iter().map(|b| sigma_heatmap(&b.sigma)).collect();
        let p = dir.join(format!("mapper_{:03}_basis.png", mapper.id));
        save_tiles(&heat, &flat_mean, &flat_std, &p)?;
        written.push(p);
    }
    Ok(written)
}

/// Export arbitrary images (for example a real-image baseline) as one
/// grid.
pub fn export_images(
    images: &[ImageTensor],
    mean: &[f64],
    std: &[f64],
    path: &Path,
) -> Result<()> {
    let tiles: Vec<Array3<f64>> = images.iter().map(|i| i.data.clone()).collect();
    save_tiles(&tiles, mean, std, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{init_labels, LabelInit};
    use crate::lowrank::{init_dataset, plan_budget, InitScheme};

    fn sample() -> SyntheticDataset {
        let plan = plan_budget(1, 8, 8, 2, 2, 3, Some(2), Some(4)).unwrap();
        let empty: Vec<ImageTensor> = Vec::new();
        let ds = init_dataset(&empty, &plan, InitScheme::Random, 5).unwrap();
        let _ = init_labels(&plan, LabelInit::Random, 6);
        ds
    }

    #[test]
    fn export_writes_three_files_per_mapper() {
        let ds = sample();
        let dir = tempfile::tempdir().unwrap();
        let files = export_dataset(&ds, &[0.2], &[0.9], dir.path()).unwrap();
        assert_eq!(files.len(), 3 * ds.meta.k);
        for f in &files {
            assert!(f.exists());
            assert!(std::fs::metadata(f).unwrap().len() > 0);
        }
    }

    #[test]
    fn export_is_byte_identical_across_runs() {
        let ds = sample();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = export_dataset(&ds, &[0.2], &[0.9], d1.path()).unwrap();
        let f2 = export_dataset(&ds, &[0.2], &[0.9], d2.path()).unwrap();
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
    }

    #[test]
    fn denormalization_clamps() {
        assert_eq!(denorm_byte(100.0, 0.5, 1.0), 255);
        assert_eq!(denorm_byte(-100.0, 0.5, 1.0), 0);
        assert_eq!(denorm_byte(0.0, 0.5, 1.0), 128);
    }

    #[test]
    fn rgb_and_unsupported_channel_counts() {
        let tiles = vec![Array3::from_elem((3, 4, 4), 0.1)];
        let dir = tempfile::tempdir().unwrap();
        save_tiles(&tiles, &[0.5; 3], &[0.25; 3], &dir.path().join("rgb.png")).unwrap();
        let bad = vec![Array3::from_elem((2, 4, 4), 0.1)];
        assert!(save_tiles(&bad, &[0.5; 2], &[0.25; 2], &dir.path().join("x.png")).is_err());
    }
}

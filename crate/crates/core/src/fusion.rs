//! Patch-wise fusion of per-scale saliency maps.
//!
//! Maps are edge-padded so that a grid of `patch × patch` windows with the
//! given stride tiles them. Each window is unrolled row-major; the `M`
//! unrolled windows at one position form a multimodal sample whose joint
//! sparse code is decoded into a fused patch. Overlapping predictions are
//! averaged and the padding is cropped.

use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;

use crate::forest::ForestModel;
use crate::imaging::{GrayMap, Image};
use crate::jsc::{self, JscError, JscParams};
use crate::pipeline::{self, MapConfig, PipelineError};
use crate::scalar::Real;
use crate::tddl::{FusionModel, Sample};

pub const DEFAULT_PATCH_SIZE: usize = 9;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("invalid patch grid: {0}")]
    Grid(String),
    #[error("map dimensions differ: {0}")]
    Dimensions(String),
    #[error("model expects {expected_maps} maps of {expected_len} values per patch, got {maps} maps of {len}")]
    Model {
        expected_maps: usize,
        expected_len: usize,
        maps: usize,
        len: usize,
    },
    #[error(transparent)]
    Jsc(#[from] JscError),
    #[error("training-set dump: {0}")]
    Io(#[from] std::io::Error),
}

/// Window anchors covering an edge-padded map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
    /// `(row, col)` of each window's top-left corner, in raster order.
    pub positions: Vec<(usize, usize)>,
}

fn anchors(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    while out.last().expect("nonempty") + patch < len {
        out.push(out.last().expect("nonempty") + stride);
    }
    out
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize, stride: usize) -> Result<Self, FusionError> {
        if patch_size == 0 || stride == 0 || stride > patch_size {
            return Err(FusionError::Grid(format!(
                "need 0 < stride <= patch size, got patch {patch_size}, stride {stride}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(FusionError::Grid("map is empty".into()));
        }
        let rows = anchors(height, patch_size, stride);
        let cols = anchors(width, patch_size, stride);
        let padded_height = rows.last().expect("nonempty") + patch_size;
        let padded_width = cols.last().expect("nonempty") + patch_size;
        let positions = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
        Ok(Self {
            patch_size,
            stride,
            width,
            height,
            padded_width,
            padded_height,
            positions,
        })
    }

    pub fn for_map(map: &GrayMap, patch_size: usize, stride: usize) -> Result<Self, FusionError> {
        Self::new(map.width(), map.height(), patch_size, stride)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// The map extended to the grid's padded size by edge replication.
pub fn pad(map: &GrayMap, grid: &PatchGrid) -> GrayMap {
    GrayMap::from_fn(grid.padded_width, grid.padded_height, |x, y| {
        map.get(x.min(map.width() - 1), y.min(map.height() - 1))
    })
}

fn window(padded: &GrayMap, grid: &PatchGrid, (r, c): (usize, usize)) -> Vec<f64> {
    let p = grid.patch_size;
    let mut out = Vec::with_capacity(p * p);
    for y in r..r + p {
        for x in c..c + p {
            out.push(padded.get(x, y));
        }
    }
    out
}

fn check_maps(maps: &[GrayMap], grid: &PatchGrid) -> Result<(), FusionError> {
    if maps.is_empty() {
        return Err(FusionError::Dimensions("no maps".into()));
    }
    for (i, m) in maps.iter().enumerate() {
        if m.width() != grid.width || m.height() != grid.height {
            return Err(FusionError::Dimensions(format!(
                "map {i} is {}x{}, grid is for {}x{}",
                m.width(),
                m.height(),
                grid.width,
                grid.height
            )));
        }
    }
    Ok(())
}

/// For every grid position, the row-major window of each map.
pub fn extract_patches(maps: &[GrayMap], grid: &PatchGrid) -> Result<Vec<Vec<Vec<f64>>>, FusionError> {
    check_maps(maps, grid)?;
    let padded: Vec<GrayMap> = maps.iter().map(|m| pad(m, grid)).collect();
    Ok(grid
        .positions
        .iter()
        .map(|&pos| padded.iter().map(|m| window(m, grid, pos)).collect())
        .collect())
}

/// Places one patch per position on the padded canvas, averaging overlaps.
pub fn reassemble(patches: &[Vec<f64>], grid: &PatchGrid) -> Result<GrayMap, FusionError> {
    if patches.len() != grid.len() || patches.iter().any(|p| p.len() != grid.patch_len()) {
        return Err(FusionError::Dimensions(format!(
            "expected {} patches of {} values",
            grid.len(),
            grid.patch_len()
        )));
    }
    let (w, h, p) = (grid.padded_width, grid.padded_height, grid.patch_size);
    let mut sum = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];
    for (&(r, c), patch) in grid.positions.iter().zip(patches) {
        for dy in 0..p {
            for dx in 0..p {
                let i = (r + dy) * w + c + dx;
                sum[i] += patch[dy * p + dx];
                count[i] += 1;
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n == 1 { s } else { s / n as f64 })
        .collect();
    Ok(GrayMap::new(w, h, values).expect("padded dims are non-zero"))
}

/// Top-left `width × height` part of a padded map.
pub fn crop(padded: &GrayMap, width: usize, height: usize) -> GrayMap {
    GrayMap::from_fn(width, height, |x, y| padded.get(x, y))
}

/// `1` where `v > threshold`, else `0`.
pub fn binarize_gt(gt: &GrayMap, threshold: f64) -> GrayMap {
    GrayMap::from_fn(gt.width(), gt.height(), |x, y| {
        if gt.get(x, y) > threshold {
            1.0
        } else {
            0.0
        }
    })
}

/// One training pair: a window per scale map and the binary ground-truth window.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl FusionSample {
    pub fn to_sample<T: Real>(&self) -> Sample<T> {
        let conv = |v: &Vec<f64>| v.iter().map(|&a| T::from_f64_lossy(a)).collect::<Array1<T>>();
        Sample {
            x: self.x.iter().map(conv).collect(),
            y: conv(&self.y),
        }
    }
}

pub fn to_samples<T: Real>(samples: &[FusionSample]) -> Vec<Sample<T>> {
    samples.iter().map(FusionSample::to_sample).collect()
}

/// Fuses `M` per-scale maps into one map in `[0, 1]`.
pub fn fuse<T: Real>(
    maps: &[GrayMap],
    model: &FusionModel<T>,
    grid: &PatchGrid,
    params: &JscParams<T>,
) -> Result<GrayMap, FusionError> {
    if maps.len() != model.modalities()
        || model.signal_dims().iter().any(|&n| n != grid.patch_len())
        || model.output_dim() != grid.patch_len()
    {
        return Err(FusionError::Model {
            expected_maps: model.modalities(),
            expected_len: model.signal_dims()[0],
            maps: maps.len(),
            len: grid.patch_len(),
        });
    }
    let patches = extract_patches(maps, grid)?;
    let predicted = patches
        .par_iter()
        .map(|windows| {
            let x: Vec<Array1<T>> = windows
                .iter()
                .map(|w| w.iter().map(|&v| T::from_f64_lossy(v)).collect())
                .collect();
            let code = jsc::encode(&x, &model.dicts, params, None)?;
            Ok(model
                .predict(&code)
                .iter()
                .map(|v| v.to_f64_lossy().clamp(0.0, 1.0))
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>, JscError>>()?;
    let padded = reassemble(&predicted, grid)?;
    Ok(crop(&padded, grid.width, grid.height))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub maps: MapConfig,
    pub patch_size: usize,
    pub stride: usize,
    pub gt_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            maps: MapConfig::default(),
            patch_size: DEFAULT_PATCH_SIZE,
            stride: DEFAULT_PATCH_SIZE,
            gt_threshold: 0.3,
        }
    }
}

/// Pairs per-scale map windows with binarized ground-truth windows.
pub fn samples_from_maps(maps: &[GrayMap], gt: &GrayMap, cfg: &FusionConfig) -> Result<Vec<FusionSample>, FusionError> {
    let grid = PatchGrid::for_map(&maps[0], cfg.patch_size, cfg.stride)?;
    let gt = binarize_gt(&gt.resize(grid.width, grid.height), cfg.gt_threshold);
    let xs = extract_patches(maps, &grid)?;
    let ys = extract_patches(std::slice::from_ref(&gt), &grid)?;
    Ok(xs
        .into_iter()
        .zip(ys)
        .map(|(x, mut y)| FusionSample { x, y: y.remove(0) })
        .collect())
}

/// Per-scale forest maps and aligned ground truth of every image, cut into
/// fusion samples. Images whose pipeline fails are skipped with a warning.
pub fn build_training_set(dataset: &[(Image, GrayMap)], forest: &ForestModel, cfg: &FusionConfig) -> Vec<FusionSample> {
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, (img, gt))| {
            let run = || -> Result<Vec<FusionSample>, String> {
                pipeline::check_ground_truth(gt, img).map_err(|e| e.to_string())?;
                let maps =
                    pipeline::per_scale_maps(img, forest, &cfg.maps).map_err(|e: PipelineError| e.to_string())?;
                samples_from_maps(&maps, gt, cfg).map_err(|e| e.to_string())
            };
            run().unwrap_or_else(|e| {
                log::warn!("skipping training image {i}: {e}");
                Vec::new()
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Writes a little-endian matrix: rows u64, cols u64, then row-major f64.
pub fn write_matrix(
    mut w: impl Write,
    rows: usize,
    cols: usize,
    values: impl IntoIterator<Item = f64>,
) -> std::io::Result<()> {
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    let mut written = 0usize;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
        written += 1;
    }
    assert_eq!(written, rows * cols, "matrix value count");
    Ok(())
}

/// Dumps the stacked observations (`M·patch² × N`) and labels (`patch² × N`)
/// with one column per sample.
pub fn dump_training_set(
    samples: &[FusionSample],
    x_path: impl AsRef<Path>,
    y_path: impl AsRef<Path>,
) -> Result<(), FusionError> {
    let n = samples.len();
    let x_rows = samples.first().map_or(0, |s| s.x.iter().map(Vec::len).sum());
    let y_rows = samples.first().map_or(0, |s| s.y.len());
    let stacked: Vec<Vec<f64>> = samples.iter().map(|s| s.x.concat()).collect();
    let mut fx = std::io::BufWriter::new(std::fs::File::create(x_path)?);
    write_matrix(
        &mut fx,
        x_rows,
        n,
        (0..x_rows).flat_map(|r| stacked.iter().map(move |s| s[r])),
    )?;
    fx.flush()?;
    let mut fy = std::io::BufWriter::new(std::fs::File::create(y_path)?);
    write_matrix(
        &mut fy,
        y_rows,
        n,
        (0..y_rows).flat_map(|r| samples.iter().map(move |s| s.y[r])),
    )?;
    fy.flush()?;
    Ok(())
}

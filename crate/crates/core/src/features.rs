//! Per-particle appearance features, each emitted as a unit-norm vector.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, Patch};
use crate::motion::{affine_warp, AffineState, MotionError};

/// Number of LBP histogram bins: 58 uniform patterns plus one catch-all.
pub const LBP_BINS: usize = 59;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("patch {width}x{height} is not divisible into {cell}-pixel cells")]
    CellGrid { width: usize, height: usize, cell: usize },
    #[error("patch {width}x{height} is too small for {what}")]
    TooSmall {
        width: usize,
        height: usize,
        what: &'static str,
    },
    #[error("invalid feature parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Warp(#[from] MotionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Intensity,
    Color,
    Hog,
    Lbp,
}

/// Feature schedule shared by every observation of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Canonical patch `(width, height)`.
    pub patch_size: (usize, usize),
    /// Active modalities, in emission order.
    pub modalities: Vec<Modality>,
    pub color_bins: usize,
    pub hog_cell: usize,
    pub hog_orientations: usize,
    /// Block side in cells.
    pub hog_block: usize,
    pub hog_clip: f64,
    /// LBP histograms are taken over a `lbp_blocks × lbp_blocks` grid.
    pub lbp_blocks: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            patch_size: (32, 32),
            modalities: vec![Modality::Intensity, Modality::Color, Modality::Hog, Modality::Lbp],
            color_bins: 8,
            hog_cell: 8,
            hog_orientations: 9,
            hog_block: 2,
            hog_clip: 0.2,
            lbp_blocks: 1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let (w, h) = self.patch_size;
        if self.modalities.is_empty() {
            return Err(FeatureError::Parameter("at least one modality is required".into()));
        }
        let mut seen = self.modalities.clone();
        seen.sort_by_key(|m| *m as u8);
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(FeatureError::Parameter("modalities must be distinct".into()));
        }
        if w < 3 || h < 3 {
            return Err(FeatureError::TooSmall {
                width: w,
                height: h,
                what: "feature extraction",
            });
        }
        if self.color_bins < 2 {
            return Err(FeatureError::Parameter("color_bins must be >= 2".into()));
        }
        if self.hog_orientations < 1 || self.hog_block < 1 || self.hog_cell < 1 {
            return Err(FeatureError::Parameter("HOG sizes must be positive".into()));
        }
        if !(self.hog_clip > 0.0) {
            return Err(FeatureError::Parameter("hog_clip must be positive".into()));
        }
        if self.modalities.contains(&Modality::Hog) {
            hog_grid(w, h, self.hog_cell, self.hog_block)?;
        }
        if self.lbp_blocks < 1 || (w - 2) < self.lbp_blocks || (h - 2) < self.lbp_blocks {
            return Err(FeatureError::Parameter(format!(
                "lbp_blocks {} does not fit the patch interior",
                self.lbp_blocks
            )));
        }
        Ok(())
    }

    /// Dimension of each active modality, in emission order.
    pub fn dims(&self) -> Vec<usize> {
        let (w, h) = self.patch_size;
        self.modalities
            .iter()
            .map(|m| match m {
                Modality::Intensity => w * h,
                Modality::Color => 3 * self.color_bins,
                Modality::Hog => {
                    let (bx, by) = hog_blocks(w / self.hog_cell, h / self.hog_cell, self.hog_block);
                    bx * by * self.hog_block * self.hog_block * self.hog_orientations
                }
                Modality::Lbp => LBP_BINS * self.lbp_blocks * self.lbp_blocks,
            })
            .collect()
    }
}

/// One unit-norm vector per active modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalObservation {
    pub vectors: Vec<DVector<f64>>,
}

impl MultimodalObservation {
    pub fn dims(&self) -> Vec<usize> {
        self.vectors.iter().map(|v| v.len()).collect()
    }

    /// All modalities stacked and rescaled to unit norm.
    pub fn stacked(&self) -> DVector<f64> {
        let total: usize = self.vectors.iter().map(|v| v.len()).sum();
        let mut out = DVector::zeros(total);
        let mut offset = 0;
        for v in &self.vectors {
            out.rows_mut(offset, v.len()).copy_from(v);
            offset += v.len();
        }
        normalize_or_uniform(out)
    }

    /// Mean per-modality cosine similarity.
    pub fn correlation(&self, other: &Self) -> f64 {
        let k = self.vectors.len() as f64;
        self.vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| a.dot(b))
            .sum::<f64>()
            / k
    }
}

/// Unit-norm copy of `v`, or the uniform vector `1/√d` when `v` is numerically zero.
pub fn normalize_or_uniform(mut v: DVector<f64>) -> DVector<f64> {
    let norm = v.norm();
    if norm > 1e-12 && norm.is_finite() {
        v /= norm;
        v
    } else {
        let d = v.len();
        DVector::from_element(d, 1.0 / (d as f64).sqrt())
    }
}

/// Mean-subtracted luma, row-major.
pub fn extract_intensity(p: &Patch) -> DVector<f64> {
    let g = p.gray();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    normalize_or_uniform(DVector::from_iterator(g.len(), g.iter().map(|v| v - mean)))
}

/// Per-channel marginal histograms `[R | G | B]`.
pub fn extract_color_hist(p: &Patch, bins_per_channel: usize) -> DVector<f64> {
    let bins = bins_per_channel.max(2);
    let mut hist = DVector::zeros(3 * bins);
    let share = 1.0 / p.rgb().len() as f64;
    for px in p.rgb() {
        for (c, &v) in px.iter().enumerate() {
            let b = ((v * bins as f64).floor() as usize).min(bins - 1);
            hist[c * bins + b] += share;
        }
    }
    normalize_or_uniform(hist)
}

fn hog_blocks(cells_x: usize, cells_y: usize, block: usize) -> (usize, usize) {
    (cells_x + 1 - block, cells_y + 1 - block)
}

fn hog_grid(w: usize, h: usize, cell: usize, block: usize) -> Result<(usize, usize), FeatureError> {
    if cell == 0 || w % cell != 0 || h % cell != 0 {
        return Err(FeatureError::CellGrid {
            width: w,
            height: h,
            cell,
        });
    }
    let (cx, cy) = (w / cell, h / cell);
    if cx < block || cy < block {
        return Err(FeatureError::TooSmall {
            width: w,
            height: h,
            what: "one HOG block",
        });
    }
    Ok((cx, cy))
}

/// Unsigned edge-orientation histograms per cell, row-major over the cell
/// grid. Gradients use centered differences with replicated borders; a
/// pixel votes its gradient magnitude into the bin holding its edge
/// orientation (gradient direction plus π/2, taken mod π).
pub fn hog_cell_histograms(p: &Patch, cell: usize, n_orientations: usize) -> Result<Vec<Vec<f64>>, FeatureError> {
    let (w, h) = (p.width(), p.height());
    let (cx, cy) = hog_grid(w, h, cell, 1)?;
    let mut cells = vec![vec![0.0; n_orientations]; cx * cy];
    let bin_width = PI / n_orientations as f64;
    for y in 0..h {
        for x in 0..w {
            let gx = p.gray_at((x + 1).min(w - 1), y) - p.gray_at(x.saturating_sub(1), y);
            let gy = p.gray_at(x, (y + 1).min(h - 1)) - p.gray_at(x, y.saturating_sub(1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let edge = (gy.atan2(gx) + PI / 2.0).rem_euclid(PI);
            let bin = ((edge / bin_width).floor() as usize).min(n_orientations - 1);
            cells[(y / cell) * cx + x / cell][bin] += mag;
        }
    }
    Ok(cells)
}

/// Cell histograms grouped into overlapping `block × block` blocks (stride
/// one cell), each block L2-normalized, clipped at `clip` and renormalized.
pub fn extract_hog(p: &Patch, cell: usize, n_orientations: usize) -> Result<DVector<f64>, FeatureError> {
    extract_hog_with(p, cell, n_orientations, 2, 0.2)
}

pub fn extract_hog_with(
    p: &Patch,
    cell: usize,
    n_orientations: usize,
    block: usize,
    clip: f64,
) -> Result<DVector<f64>, FeatureError> {
    if n_orientations == 0 {
        return Err(FeatureError::Parameter("n_orientations must be positive".into()));
    }
    let (cx, cy) = hog_grid(p.width(), p.height(), cell, block)?;
    let cells = hog_cell_histograms(p, cell, n_orientations)?;
    let (bx, by) = hog_blocks(cx, cy, block);
    let mut out = Vec::with_capacity(bx * by * block * block * n_orientations);
    let mut buf = Vec::with_capacity(block * block * n_orientations);
    for y in 0..by {
        for x in 0..bx {
            buf.clear();
            for dy in 0..block {
                for dx in 0..block {
                    buf.extend_from_slice(&cells[(y + dy) * cx + x + dx]);
                }
            }
            let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                buf.iter_mut().for_each(|v| *v = (*v / norm).min(clip));
                let renorm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
                buf.iter_mut().for_each(|v| *v /= renorm);
            } else {
                buf.iter_mut().for_each(|v| *v = 0.0);
            }
            out.extend_from_slice(&buf);
        }
    }
    Ok(normalize_or_uniform(DVector::from_vec(out)))
}

/// Neighbor offsets clockwise from the top-left; bit `i` of a code is set
/// when neighbor `i` is at least as bright as the center.
const LBP_NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

fn lbp_transitions(code: u8) -> u32 {
    (code ^ code.rotate_right(1)).count_ones()
}

/// Maps each 8-bit code to its histogram bin: uniform codes (at most two
/// circular transitions) get bins 0..58 in code order, the rest share bin 58.
pub fn lbp_bin_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut next = 0u8;
    for code in 0..=255u8 {
        if lbp_transitions(code) <= 2 {
            table[code as usize] = next;
            next += 1;
        } else {
            table[code as usize] = (LBP_BINS - 1) as u8;
        }
    }
    debug_assert_eq!(next as usize, LBP_BINS - 1);
    table
}

pub fn lbp_code(p: &Patch, x: usize, y: usize) -> u8 {
    let c = p.gray_at(x, y);
    let mut code = 0u8;
    for (i, (dx, dy)) in LBP_NEIGHBORS.iter().enumerate() {
        let nx = (x as isize + dx) as usize;
        let ny = (y as isize + dy) as usize;
        if p.gray_at(nx, ny) >= c {
            code |= 1 << i;
        }
    }
    code
}

/// Uniform-pattern LBP histogram over interior pixels, single block.
pub fn extract_lbp(p: &Patch) -> Result<DVector<f64>, FeatureError> {
    extract_lbp_blocks(p, 1)
}

pub fn extract_lbp_blocks(p: &Patch, blocks: usize) -> Result<DVector<f64>, FeatureError> {
    let (w, h) = (p.width(), p.height());
    if w < 3 || h < 3 {
        return Err(FeatureError::TooSmall {
            width: w,
            height: h,
            what: "LBP",
        });
    }
    if blocks == 0 || blocks > w - 2 || blocks > h - 2 {
        return Err(FeatureError::Parameter(format!("{blocks} LBP blocks do not fit")));
    }
    let table = lbp_bin_table();
    let (iw, ih) = (w - 2, h - 2);
    let mut hist = DVector::zeros(LBP_BINS * blocks * blocks);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let bx = (x - 1) * blocks / iw;
            let by = (y - 1) * blocks / ih;
            let bin = table[lbp_code(p, x, y) as usize] as usize;
            hist[(by * blocks + bx) * LBP_BINS + bin] += 1.0;
        }
    }
    Ok(normalize_or_uniform(hist))
}

pub fn extract(p: &Patch, cfg: &FeatureConfig) -> Result<MultimodalObservation, FeatureError> {
    let vectors = cfg
        .modalities
        .iter()
        .map(|m| match m {
            Modality::Intensity => Ok(extract_intensity(p)),
            Modality::Color => Ok(extract_color_hist(p, cfg.color_bins)),
            Modality::Hog => extract_hog_with(p, cfg.hog_cell, cfg.hog_orientations, cfg.hog_block, cfg.hog_clip),
            Modality::Lbp => extract_lbp_blocks(p, cfg.lbp_blocks),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MultimodalObservation { vectors })
}

/// Warps the state's region to the canonical patch and extracts every active modality.
pub fn observe(frame: &Frame, state: &AffineState, cfg: &FeatureConfig) -> Result<MultimodalObservation, FeatureError> {
    let patch = affine_warp(frame, state, cfg.patch_size)?;
    extract(&patch, cfg)
}

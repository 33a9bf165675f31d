//! Center-error precision and overlap success curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::geometry::BoundingBox;

/// Largest center-error threshold, in pixels.
pub const MAX_CENTER_ERROR: usize = 50;
/// Overlap thresholds run over `0, 1/STEPS, ..., 1`.
pub const OVERLAP_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurves {
    pub precision: Curve,
    pub precision_at_20: f64,
    pub success: Curve,
    pub success_auc: f64,
    pub frames: usize,
}

fn check_lengths(results: &[BoundingBox], gt: &[BoundingBox]) -> Result<(), BenchError> {
    if results.len() != gt.len() {
        return Err(BenchError::LengthMismatch {
            results: results.len(),
            ground_truth: gt.len(),
        });
    }
    if results.is_empty() {
        return Err(BenchError::Empty("no frames to evaluate".into()));
    }
    Ok(())
}

/// Fraction of frames whose center error is at most each integer threshold
/// `0..=50`; the second value is the score at 20 px.
pub fn precision_curve(results: &[BoundingBox], gt: &[BoundingBox]) -> Result<(Curve, f64), BenchError> {
    check_lengths(results, gt)?;
    let errors: Vec<f64> = results.iter().zip(gt).map(|(r, g)| r.center_distance(g)).collect();
    let n = errors.len() as f64;
    let thresholds: Vec<f64> = (0..=MAX_CENTER_ERROR).map(|t| t as f64).collect();
    let values: Vec<f64> = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    let at_20 = values[20];
    Ok((Curve { thresholds, values }, at_20))
}

/// Counts a frame with overlap `s` at threshold `tau`.
///
/// The zero threshold admits every frame, so the curve starts at 1; above
/// zero the overlap must exceed the threshold, which keeps the top grid
/// point at 0 even for perfect overlap.
fn succeeds(s: f64, tau: f64) -> bool {
    tau == 0.0 || s > tau
}

/// Fraction of frames whose overlap passes each threshold of the grid
/// `{0, 0.01, ..., 1}`; the second value is the mean over the grid.
pub fn success_curve(results: &[BoundingBox], gt: &[BoundingBox]) -> Result<(Curve, f64), BenchError> {
    check_lengths(results, gt)?;
    let overlaps: Vec<f64> = results.iter().zip(gt).map(|(r, g)| r.iou(g)).collect();
    let n = overlaps.len() as f64;
    let thresholds: Vec<f64> = (0..=OVERLAP_STEPS).map(|i| i as f64 / OVERLAP_STEPS as f64).collect();
    let values: Vec<f64> = thresholds
        .iter()
        .map(|&t| overlaps.iter().filter(|&&s| succeeds(s, t)).count() as f64 / n)
        .collect();
    let auc = values.iter().sum::<f64>() / values.len() as f64;
    Ok((Curve { thresholds, values }, auc))
}

pub fn evaluate(results: &[BoundingBox], gt: &[BoundingBox]) -> Result<MetricCurves, BenchError> {
    let (precision, precision_at_20) = precision_curve(results, gt)?;
    let (success, success_auc) = success_curve(results, gt)?;
    Ok(MetricCurves {
        precision,
        precision_at_20,
        success,
        success_auc,
        frames: results.len(),
    })
}

/// Mean per-frame overlap.
pub fn mean_iou(results: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64, BenchError> {
    check_lengths(results, gt)?;
    Ok(results.iter().zip(gt).map(|(r, g)| r.iou(g)).sum::<f64>() / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveFormat {
    Csv,
    Json,
    Both,
}

#[derive(Serialize)]
struct CurveDocument<'a> {
    thresholds: &'a [f64],
    values: &'a [f64],
    summary: Summary,
}

/// Headline numbers written next to every curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision_at_20: f64,
    pub success_auc: f64,
    pub frames: usize,
}

impl MetricCurves {
    pub fn summary(&self) -> Summary {
        Summary {
            precision_at_20: self.precision_at_20,
            success_auc: self.success_auc,
            frames: self.frames,
        }
    }
}

pub fn curve_to_csv(curve: &Curve) -> String {
    let mut out = String::from("threshold,value\n");
    for (t, v) in curve.thresholds.iter().zip(&curve.values) {
        let _ = writeln!(out, "{t},{v}");
    }
    out
}

pub fn curve_from_csv(text: &str) -> Result<Curve, BenchError> {
    let mut thresholds = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || BenchError::Malformed {
            path: "<csv>".into(),
            line: i + 1,
            content: line.to_string(),
        };
        let (t, v) = line.split_once(',').ok_or_else(bad)?;
        thresholds.push(t.trim().parse().map_err(|_| bad())?);
        values.push(v.trim().parse().map_err(|_| bad())?);
    }
    Ok(Curve { thresholds, values })
}

fn write(path: PathBuf, text: String) -> Result<PathBuf, BenchError> {
    std::fs::write(&path, text).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

/// Writes `precision.{csv,json}` and `success.{csv,json}` into `dir`.
pub fn emit_curves(curves: &MetricCurves, format: CurveFormat, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    if curves.frames == 0 || curves.precision.values.is_empty() || curves.success.values.is_empty() {
        return Err(BenchError::Empty("no curve data to write".into()));
    }
    std::fs::create_dir_all(dir).map_err(|source| BenchError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for (name, curve) in [("precision", &curves.precision), ("success", &curves.success)] {
        if matches!(format, CurveFormat::Csv | CurveFormat::Both) {
            written.push(write(dir.join(format!("{name}.csv")), curve_to_csv(curve))?);
        }
        if matches!(format, CurveFormat::Json | CurveFormat::Both) {
            let doc = CurveDocument {
                thresholds: &curve.thresholds,
                values: &curve.values,
                summary: curves.summary(),
            };
            let text = serde_json::to_string_pretty(&doc).expect("curve serializes");
            written.push(write(dir.join(format!("{name}.json")), text + "\n")?);
        }
    }
    Ok(written)
}

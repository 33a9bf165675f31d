//! OTB-style sequence directories and result files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::frame::Frame;
use crate::geometry::BoundingBox;

pub const GROUND_TRUTH_FILE: &str = "groundtruth_rect.txt";
pub const ATTRIBUTES_FILE: &str = "attributes.txt";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One annotated sequence on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub ground_truth: Vec<BoundingBox>,
    /// Tags such as `occlusion` or `illumination`.
    pub attributes: Vec<String>,
    /// Non-fatal problems noticed while loading.
    pub warnings: Vec<String>,
}

impl SequenceSpec {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load_frame(&self, i: usize) -> Result<Frame, BenchError> {
        let path = self
            .frames
            .get(i)
            .ok_or_else(|| BenchError::Empty(format!("frame {i} out of range")))?;
        Ok(Frame::load(path)?)
    }
}

/// Parses one `x,y,w,h` row; commas, tabs and spaces all separate fields.
fn parse_box(line: &str) -> Option<BoundingBox> {
    let fields: Vec<f64> = line
        .split(|c: char| c == ',' || c == '\t' || c == ' ')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .ok()?;
    match fields[..] {
        [x, y, w, h] => {
            let b = BoundingBox::new(x, y, w, h);
            b.is_valid().then_some(b)
        }
        _ => None,
    }
}

pub fn parse_ground_truth(text: &str, path: &Path) -> Result<Vec<BoundingBox>, BenchError> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        boxes.push(parse_box(line).ok_or_else(|| BenchError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            content: line.to_string(),
        })?);
    }
    Ok(boxes)
}

fn frame_number(path: &Path) -> Option<u64> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
        return None;
    }
    path.file_stem()?.to_str()?.parse().ok()
}

/// Reads `dir/img/*` (numbered images) and `dir/groundtruth_rect.txt`.
///
/// When the counts differ, both lists are cut to the shorter one and a
/// warning is recorded.
pub fn load_sequence(dir: &Path) -> Result<SequenceSpec, BenchError> {
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    if !gt_path.is_file() {
        return Err(BenchError::MissingGroundTruth(gt_path.display().to_string()));
    }
    let img_dir = dir.join("img");
    let listing = std::fs::read_dir(&img_dir).map_err(|_| BenchError::MissingImages(img_dir.display().to_string()))?;
    let mut numbered: Vec<(u64, PathBuf)> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| frame_number(&p).map(|n| (n, p)))
        .collect();
    if numbered.is_empty() {
        return Err(BenchError::MissingImages(img_dir.display().to_string()));
    }
    numbered.sort();

    let text = std::fs::read_to_string(&gt_path).map_err(|source| BenchError::Io {
        path: gt_path.display().to_string(),
        source,
    })?;
    let mut ground_truth = parse_ground_truth(&text, &gt_path)?;
    let mut frames: Vec<PathBuf> = numbered.into_iter().map(|(_, p)| p).collect();

    let mut warnings = Vec::new();
    if frames.len() != ground_truth.len() {
        let keep = frames.len().min(ground_truth.len());
        let msg = format!(
            "{}: {} frames but {} ground-truth rows; using the first {keep}",
            dir.display(),
            frames.len(),
            ground_truth.len()
        );
        warn!("{msg}");
        warnings.push(msg);
        frames.truncate(keep);
        ground_truth.truncate(keep);
    }
    if frames.is_empty() {
        return Err(BenchError::Empty(format!("{} has no annotated frames", dir.display())));
    }
    for f in &frames {
        image::image_dimensions(f).map_err(|source| BenchError::UnreadableImage {
            path: f.display().to_string(),
            source,
        })?;
    }

    let attributes = match std::fs::read_to_string(dir.join(ATTRIBUTES_FILE)) {
        Ok(t) => t
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        Err(_) => Vec::new(),
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(SequenceSpec {
        name,
        frames,
        ground_truth,
        attributes,
        warnings,
    })
}

/// `frame,x,y,w,h` rows with frames numbered from 1.
pub fn results_to_csv(boxes: &[BoundingBox]) -> String {
    let mut out = String::from("frame,x,y,w,h\n");
    for (i, b) in boxes.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{},{}", i + 1, b.x, b.y, b.w, b.h);
    }
    out
}

pub fn results_from_csv(text: &str, path: &Path) -> Result<Vec<BoundingBox>, BenchError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "frame,x,y,w,h" => {}
        other => {
            return Err(BenchError::Malformed {
                path: path.display().to_string(),
                line: other.map_or(1, |(i, _)| i + 1),
                content: other.map_or(String::new(), |(_, l)| l.to_string()),
            })
        }
    }
    let mut boxes = Vec::new();
    for (i, line) in lines {
        let bad = || BenchError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            content: line.to_string(),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        boxes.push(BoundingBox::new(v[0], v[1], v[2], v[3]));
    }
    if boxes.is_empty() {
        return Err(BenchError::Empty(format!("{} has no result rows", path.display())));
    }
    Ok(boxes)
}

//! Sequence loading, synthetic data, and precision/success evaluation.

pub mod metrics;
pub mod sequence;
pub mod synthetic;

use thiserror::Error;

use crate::frame::{Frame, FrameError};
use crate::geometry::BoundingBox;
use crate::tracker::{TrackResult, Tracker, TrackerConfig, TrackerError};

pub use metrics::{emit_curves, evaluate, mean_iou, CurveFormat, MetricCurves, Summary};
pub use sequence::{load_sequence, results_from_csv, results_to_csv, SequenceSpec};
pub use synthetic::{gen_synthetic, SyntheticSequence, SyntheticSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{results} result boxes but {ground_truth} ground-truth boxes")]
    LengthMismatch { results: usize, ground_truth: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{path}:{line}: malformed row {content:?}")]
    Malformed { path: String, line: usize, content: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing ground truth file {0}")]
    MissingGroundTruth(String),
    #[error("no numbered images in {0}")]
    MissingImages(String),
    #[error("unreadable image {path}: {source}")]
    UnreadableImage {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("{what} leaves the frame at frame {frame}")]
    OutOfBounds { frame: usize, what: &'static str },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
}

/// Output of a tracking run; `boxes[0]` is the initial box.
#[derive(Debug)]
pub struct TrackRun {
    pub boxes: Vec<BoundingBox>,
    pub steps: Vec<TrackResult>,
    /// Set when the run stopped early; the boxes up to that point are kept.
    pub error: Option<BenchError>,
}

/// Tracks `count` frames supplied by `load`, initialized on frame 0 with
/// `first_box`. Failures after initialization end the run but keep the
/// partial results.
pub fn track_frames<F>(count: usize, first_box: &BoundingBox, cfg: TrackerConfig, mut load: F) -> Result<TrackRun, BenchError>
where
    F: FnMut(usize) -> Result<Frame, BenchError>,
{
    if count == 0 {
        return Err(BenchError::Empty("no frames to track".into()));
    }
    let mut tracker = Tracker::init(&load(0)?, first_box, cfg)?;
    let mut run = TrackRun {
        boxes: vec![*first_box],
        steps: Vec::with_capacity(count - 1),
        error: None,
    };
    for i in 1..count {
        let step = load(i).and_then(|f| Ok(tracker.step(&f)?));
        match step {
            Ok(r) => {
                log::debug!("frame {} residual {:.4} iterations {}", r.frame, r.residual, r.solver_iterations);
                run.boxes.push(r.bbox);
                run.steps.push(r);
            }
            Err(e) => {
                log::error!("stopping at frame {i}: {e}");
                run.error = Some(e);
                break;
            }
        }
    }
    Ok(run)
}

pub fn track_sequence(seq: &SequenceSpec, cfg: TrackerConfig) -> Result<TrackRun, BenchError> {
    track_frames(seq.len(), &seq.ground_truth[0], cfg, |i| seq.load_frame(i))
}

//! Scripted synthetic sequences with exact ground truth.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sequence::{load_sequence, SequenceSpec, ATTRIBUTES_FILE, GROUND_TRUTH_FILE};
use super::BenchError;
use crate::frame::Frame;
use crate::geometry::BoundingBox;

/// Target center at a given (0-based) frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
}

/// Flat patterned strip covering the left `fraction` of the target box for
/// frames `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub start: usize,
    pub end: usize,
    pub fraction: f64,
}

/// Global multiplicative gain applied from `frame` on (gains compound).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainChange {
    pub frame: usize,
    pub gain: f64,
}

/// A copy of the target following its own waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distractor {
    pub waypoints: Vec<Waypoint>,
    /// Drawn over the target instead of beneath it.
    #[serde(default)]
    pub in_front: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Bands,
    Checker,
    Rings,
}

impl Texture {
    /// Color at normalized target coordinates `(u, v) ∈ [0, 1)²`; every
    /// channel stays within `[0.05, 0.65]`.
    fn color(self, u: f64, v: f64) -> [f64; 3] {
        match self {
            Texture::Bands => [
                0.35 + 0.3 * (2.0 * PI * (u + 0.3 * v)).cos(),
                0.35 + 0.3 * (2.0 * PI * v).sin() * (PI * u).cos(),
                0.35 - 0.3 * (2.0 * PI * (u - v)).cos(),
            ],
            Texture::Checker => {
                let on = ((u * 4.0) as usize + (v * 4.0) as usize) % 2 == 0;
                if on {
                    [0.65, 0.2, 0.1]
                } else {
                    [0.1, 0.3, 0.6]
                }
            }
            Texture::Rings => {
                let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                let s = (r * 6.0 * PI).cos();
                [0.35 + 0.3 * s, 0.35 - 0.3 * s, 0.35 + 0.3 * (2.0 * PI * u).sin()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Target `[w, h]` in pixels.
    pub target_size: [f64; 2],
    pub texture: Texture,
    pub waypoints: Vec<Waypoint>,
    /// Std of the additive per-channel Gaussian noise.
    pub noise_std: f64,
    /// Background clutter rectangles per 400 px², in `[0, 1]`.
    pub clutter_density: f64,
    /// Target rotation in radians per frame.
    pub rotation_rate: f64,
    pub occlusions: Vec<Occlusion>,
    pub illumination: Vec<GainChange>,
    pub distractors: Vec<Distractor>,
}

impl Default for SyntheticSpec {
    /// 100 frames of 3 px/frame diagonal motion with mild noise and one
    /// 10-frame occlusion of 40% of the target.
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            width: 400,
            height: 300,
            frames: 100,
            target_size: [32.0, 40.0],
            texture: Texture::Bands,
            waypoints: vec![
                Waypoint {
                    frame: 0,
                    x: 60.0,
                    y: 70.0,
                },
                Waypoint {
                    frame: 99,
                    x: 60.0 + 2.4 * 99.0,
                    y: 70.0 + 1.8 * 99.0,
                },
            ],
            noise_std: 0.02,
            clutter_density: 0.2,
            rotation_rate: 0.0,
            occlusions: vec![Occlusion {
                start: 40,
                end: 50,
                fraction: 0.4,
            }],
            illumination: Vec::new(),
            distractors: Vec::new(),
        }
    }
}

fn interpolate(points: &[Waypoint], frame: usize) -> (f64, f64) {
    let first = points[0];
    if frame <= first.frame {
        return (first.x, first.y);
    }
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if frame <= b.frame {
            let t = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
            return (a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
        }
    }
    let last = points[points.len() - 1];
    (last.x, last.y)
}

fn check_waypoints(points: &[Waypoint], what: &str) -> Result<(), BenchError> {
    if points.is_empty() {
        return Err(BenchError::Spec(format!("{what} needs at least one waypoint")));
    }
    if points.windows(2).any(|p| p[1].frame <= p[0].frame) {
        return Err(BenchError::Spec(format!("{what} waypoints must have increasing frames")));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(BenchError::Spec(format!("{what} waypoints must be finite")));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Spec(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("frame size {}x{} is below 16x16", self.width, self.height));
        }
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        if self.target_size.iter().any(|s| !(s.is_finite() && *s >= 4.0)) {
            return bad(format!("target_size {:?} must be >= 4 px", self.target_size));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return bad("clutter_density must be in [0, 1]".into());
        }
        if !self.rotation_rate.is_finite() {
            return bad("rotation_rate must be finite".into());
        }
        check_waypoints(&self.waypoints, "target")?;
        for d in &self.distractors {
            check_waypoints(&d.waypoints, "distractor")?;
        }
        for o in &self.occlusions {
            if o.start >= o.end || !(0.0..=1.0).contains(&o.fraction) {
                return bad(format!("occlusion {o:?} needs start < end and fraction in [0, 1]"));
            }
        }
        for g in &self.illumination {
            if !(g.gain > 0.0 && g.gain.is_finite()) {
                return bad(format!("illumination gain {} must be > 0", g.gain));
            }
        }
        Ok(())
    }

    pub fn attributes(&self) -> Vec<String> {
        let mut tags = Vec::new();
        if !self.occlusions.is_empty() {
            tags.push("occlusion");
        }
        if self.rotation_rate != 0.0 {
            tags.push("rotation");
        }
        if !self.illumination.is_empty() {
            tags.push("illumination");
        }
        if self.clutter_density > 0.0 {
            tags.push("clutter");
        }
        if !self.distractors.is_empty() {
            tags.push("distractor");
        }
        tags.into_iter().map(String::from).collect()
    }
}

/// Lazily rendered sequence: frames are produced on demand, deterministically
/// from `(spec, seed)`.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    spec: SyntheticSpec,
    seed: u64,
    background: Frame,
    ground_truth: Vec<BoundingBox>,
}

impl SyntheticSequence {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self, BenchError> {
        spec.validate()?;
        let (w, h) = (spec.width as f64, spec.height as f64);
        let mut ground_truth = Vec::with_capacity(spec.frames);
        for i in 0..spec.frames {
            let b = target_box(&spec, &spec.waypoints, i);
            if !b.inside(w, h) {
                return Err(BenchError::OutOfBounds { frame: i, what: "target" });
            }
            ground_truth.push(b);
            for d in &spec.distractors {
                if !target_box(&spec, &d.waypoints, i).inside(w, h) {
                    return Err(BenchError::OutOfBounds {
                        frame: i,
                        what: "distractor",
                    });
                }
            }
        }
        let background = render_background(&spec, seed);
        Ok(Self {
            spec,
            seed,
            background,
            ground_truth,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.frames
    }

    pub fn is_empty(&self) -> bool {
        self.spec.frames == 0
    }

    pub fn ground_truth(&self) -> &[BoundingBox] {
        &self.ground_truth
    }

    /// Center of distractor `d` at frame `i`.
    pub fn distractor_box(&self, d: usize, i: usize) -> BoundingBox {
        target_box(&self.spec, &self.spec.distractors[d].waypoints, i)
    }

    /// Frame `i` (0-based), quantized to 8 bits.
    pub fn render(&self, i: usize) -> Frame {
        let spec = &self.spec;
        let mut frame = self.background.clone();
        let angle = spec.rotation_rate * i as f64;
        let draw = |frame: &mut Frame, points: &[Waypoint]| {
            let (cx, cy) = interpolate(points, i);
            draw_target(frame, spec, cx, cy, angle);
        };
        for d in spec.distractors.iter().filter(|d| !d.in_front) {
            draw(&mut frame, &d.waypoints);
        }
        draw(&mut frame, &spec.waypoints);
        for d in spec.distractors.iter().filter(|d| d.in_front) {
            draw(&mut frame, &d.waypoints);
        }

        let gt = self.ground_truth[i];
        for o in spec.occlusions.iter().filter(|o| (o.start..o.end).contains(&i)) {
            let x1 = gt.x + o.fraction * gt.w;
            fill_rect(&mut frame, gt.x, gt.y, x1, gt.y + gt.h, |x, y| {
                let v = if (x / 3 + y / 3) % 2 == 0 { 0.3 } else { 0.45 };
                [v, v, v]
            });
        }

        let gain: f64 = spec
            .illumination
            .iter()
            .filter(|g| g.frame <= i)
            .map(|g| g.gain)
            .product();
        if gain != 1.0 {
            frame.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * gain) as f32);
        }
        if spec.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(i as u64 + 1);
            let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
            frame
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v as f64 + normal.sample(&mut rng)) as f32);
        }
        frame.quantized()
    }
}

/// Axis-aligned box of the (possibly rotated) target at frame `i`.
fn target_box(spec: &SyntheticSpec, points: &[Waypoint], i: usize) -> BoundingBox {
    let (cx, cy) = interpolate(points, i);
    let [w, h] = spec.target_size;
    let angle = spec.rotation_rate * i as f64;
    if angle == 0.0 {
        return BoundingBox::from_center(cx, cy, w, h);
    }
    let (s, c) = angle.sin_cos();
    let bw = c.abs() * w + s.abs() * h;
    let bh = s.abs() * w + c.abs() * h;
    BoundingBox::from_center(cx, cy, bw, bh)
}

fn fill_rect(frame: &mut Frame, x0: f64, y0: f64, x1: f64, y1: f64, color: impl Fn(usize, usize) -> [f64; 3]) {
    // pixels whose centers fall inside [x0, x1) × [y0, y1)
    let cols = ((x0 - 0.5).ceil().max(0.0) as usize)..((x1 - 0.5).ceil().max(0.0) as usize).min(frame.width());
    let rows = ((y0 - 0.5).ceil().max(0.0) as usize)..((y1 - 0.5).ceil().max(0.0) as usize).min(frame.height());
    for y in rows {
        for x in cols.clone() {
            let c = color(x, y);
            frame.set_pixel(x, y, [c[0] as f32, c[1] as f32, c[2] as f32]);
        }
    }
}

fn draw_target(frame: &mut Frame, spec: &SyntheticSpec, cx: f64, cy: f64, angle: f64) {
    let [w, h] = spec.target_size;
    let (s, c) = angle.sin_cos();
    let reach = (w * w + h * h).sqrt() / 2.0 + 1.0;
    let x_range = ((cx - reach).floor().max(0.0) as usize)..((cx + reach).ceil().max(0.0) as usize).min(frame.width());
    let y_range = ((cy - reach).floor().max(0.0) as usize)..((cy + reach).ceil().max(0.0) as usize).min(frame.height());
    for y in y_range {
        for x in x_range.clone() {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // rotate back into the target frame
            let u = (c * dx + s * dy) / w + 0.5;
            let v = (-s * dx + c * dy) / h + 0.5;
            if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                let col = spec.texture.color(u, v);
                frame.set_pixel(x, y, [col[0] as f32, col[1] as f32, col[2] as f32]);
            }
        }
    }
}

/// Smooth pattern in `[0.15, 0.6]` plus clutter rectangles in the same range.
fn render_background(spec: &SyntheticSpec, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.01..0.05),
                rng.gen_range(0.01..0.05),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let mut frame = Frame::from_fn(spec.width, spec.height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let mut px = [0.0f32; 3];
        for (c, [a, b, p, q]) in waves.iter().enumerate() {
            let s = 0.5 * ((a * fx + p).sin() + (b * fy + q).cos());
            px[c] = (0.375 + 0.225 * s) as f32;
        }
        px
    });
    let count = (spec.clutter_density * (spec.width * spec.height) as f64 / 400.0).round() as usize;
    for _ in 0..count {
        let w = rng.gen_range(4.0..20.0);
        let h = rng.gen_range(4.0..20.0);
        let x0 = rng.gen_range(0.0..spec.width as f64);
        let y0 = rng.gen_range(0.0..spec.height as f64);
        let col = [rng.gen_range(0.15..0.6), rng.gen_range(0.15..0.6), rng.gen_range(0.15..0.6)];
        fill_rect(&mut frame, x0, y0, x0 + w, y0 + h, |_, _| col);
    }
    frame
}

/// Renders `spec` into `out_dir` in OTB layout and loads it back.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<SequenceSpec, BenchError> {
    let seq = SyntheticSequence::new(spec.clone(), seed)?;
    let img = out_dir.join("img");
    std::fs::create_dir_all(&img).map_err(|source| BenchError::Io {
        path: img.display().to_string(),
        source,
    })?;
    let digits = spec.frames.to_string().len().max(4);
    for i in 0..seq.len() {
        let path = img.join(format!("{:0digits$}.png", i + 1));
        seq.render(i).save_png(&path)?;
    }
    let gt: String = seq
        .ground_truth()
        .iter()
        .map(|b| format!("{},{},{},{}\n", b.x, b.y, b.w, b.h))
        .collect();
    let write = |name: &str, text: String| {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(GROUND_TRUTH_FILE, gt)?;
    write(ATTRIBUTES_FILE, spec.attributes().join(",") + "\n")?;
    load_sequence(out_dir)
}

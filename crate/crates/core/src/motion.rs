//! Affine particle filter: random-walk transition, likelihood reweighting,
//! systematic resampling and patch warping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, Patch};
use crate::geometry::BoundingBox;

/// Lower bound applied to scale and aspect after a random step.
const MIN_SCALE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("expected {expected} likelihoods, got {got}")]
    LikelihoodCount { expected: usize, got: usize },
    #[error("likelihood {index} is {value}; likelihoods must be finite and non-negative")]
    BadLikelihood { index: usize, value: f64 },
    #[error("all particle likelihoods are zero: tracking failure")]
    TrackingFailure,
    #[error("affine state is degenerate: {0}")]
    Degenerate(String),
    #[error("cannot warp: {0}")]
    Warp(String),
}

/// Six-parameter affine state.
///
/// The canonical patch of size `w × h`, centered at the origin, is mapped into
/// the image by `p = (x, y) + R(rotation) · [[1, skew], [0, 1]] · diag(scale, scale·aspect) · q`.
/// A state with scale 1, aspect 1 and no rotation or skew therefore covers a
/// `w × h` pixel region centered on `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineState {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub aspect: f64,
    pub rotation: f64,
    pub skew: f64,
}

impl AffineState {
    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.scale, self.aspect, self.rotation, self.skew]
    }

    pub fn from_array(p: [f64; 6]) -> Self {
        Self {
            x: p[0],
            y: p[1],
            scale: p[2],
            aspect: p[3],
            rotation: p[4],
            skew: p[5],
        }
    }

    /// Axis-aligned state covering `bbox` when warped to `patch` size.
    pub fn from_box(bbox: &BoundingBox, patch: (usize, usize)) -> Self {
        let (cx, cy) = bbox.center();
        let scale = bbox.w / patch.0 as f64;
        let aspect = (bbox.h / patch.1 as f64) / scale;
        Self {
            x: cx,
            y: cy,
            scale,
            aspect,
            rotation: 0.0,
            skew: 0.0,
        }
    }

    /// Linear part of the warp as `[[a, b], [c, d]]`.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let sx = self.scale;
        let sy = self.scale * self.aspect;
        // R · K · S with K = [[1, skew], [0, 1]]
        [
            [c * sx, (c * self.skew - s) * sy],
            [s * sx, (s * self.skew + c) * sy],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let a = self.linear();
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(MotionError::Degenerate("non-finite parameter".into()));
        }
        if self.scale <= 0.0 || self.aspect <= 0.0 {
            return Err(MotionError::Degenerate(format!(
                "scale {} and aspect {} must be positive",
                self.scale, self.aspect
            )));
        }
        if self.determinant().abs() < 1e-12 {
            return Err(MotionError::Degenerate("singular affine matrix".into()));
        }
        Ok(())
    }

    /// Maps canonical patch coordinates (origin at the patch center) to the image.
    pub fn map(&self, u: f64, v: f64) -> (f64, f64) {
        let a = self.linear();
        (
            self.x + a[0][0] * u + a[0][1] * v,
            self.y + a[1][0] * u + a[1][1] * v,
        )
    }

    /// Axis-aligned bounds of the warped patch region.
    pub fn bounding_box(&self, patch: (usize, usize)) -> BoundingBox {
        let hw = patch.0 as f64 / 2.0;
        let hh = patch.1 as f64 / 2.0;
        let corners = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(u, v)| self.map(u, v));
        let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        BoundingBox::new(min_x, min_y, max_x - min_x, max_y - min_y)
    }
}

/// Standard deviations of the Gaussian random walk, one per affine parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub std_per_param: [f64; 6],
}

impl Default for TransitionModel {
    fn default() -> Self {
        Self {
            std_per_param: [4.0, 4.0, 0.02, 0.002, 0.002, 0.001],
        }
    }
}

impl TransitionModel {
    pub fn new(std_per_param: [f64; 6]) -> Result<Self, MotionError> {
        let m = Self { std_per_param };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if self.std_per_param.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(MotionError::Degenerate(format!(
                "transition stds must be finite and >= 0: {:?}",
                self.std_per_param
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: AffineState,
    pub weight: f64,
}

/// Fixed-size weighted particle population with its own random stream.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    rng: ChaCha8Rng,
}

impl ParticleSet {
    /// `n` copies of `state` with uniform weights.
    pub fn new(state: AffineState, n: usize, seed: u64) -> Self {
        assert!(n > 0, "particle count must be positive");
        let w = 1.0 / n as f64;
        Self {
            particles: vec![Particle { state, weight: w }; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_particles(particles: Vec<Particle>, seed: u64) -> Self {
        assert!(!particles.is_empty(), "particle count must be positive");
        Self {
            particles,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn states(&self) -> Vec<AffineState> {
        self.particles.iter().map(|p| p.state).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    /// Perturbs every state by independent zero-mean Gaussians.
    pub fn propagate(&mut self, model: &TransitionModel) {
        for p in self.particles.iter_mut() {
            let mut s = p.state.to_array();
            for (v, std) in s.iter_mut().zip(model.std_per_param) {
                let z: f64 = self.rng.sample(StandardNormal);
                *v += std * z;
            }
            s[2] = s[2].max(MIN_SCALE);
            s[3] = s[3].max(MIN_SCALE);
            p.state = AffineState::from_array(s);
        }
    }

    /// `w_i ∝ w_i · likelihood_i`, renormalized.
    pub fn update_weights(&mut self, likelihoods: &[f64]) -> Result<(), MotionError> {
        if likelihoods.len() != self.particles.len() {
            return Err(MotionError::LikelihoodCount {
                expected: self.particles.len(),
                got: likelihoods.len(),
            });
        }
        if let Some((index, &value)) = likelihoods
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(MotionError::BadLikelihood { index, value });
        }
        let raw: Vec<f64> = self
            .particles
            .iter()
            .zip(likelihoods)
            .map(|(p, l)| p.weight * l)
            .collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(MotionError::TrackingFailure);
        }
        for (p, r) in self.particles.iter_mut().zip(raw) {
            p.weight = r / total;
        }
        Ok(())
    }

    /// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
    pub fn resample(&mut self) {
        let n = self.particles.len();
        let step = 1.0 / n as f64;
        let offset: f64 = self.rng.gen::<f64>() * step;
        let mut out = Vec::with_capacity(n);
        let mut cumulative = self.particles[0].weight;
        let mut idx = 0;
        for i in 0..n {
            let pointer = offset + i as f64 * step;
            while pointer >= cumulative && idx < n - 1 {
                idx += 1;
                cumulative += self.particles[idx].weight;
            }
            out.push(Particle {
                state: self.particles[idx].state,
                weight: step,
            });
        }
        self.particles = out;
    }
}

/// Samples the region described by `state` into a `w × h` patch using the
/// inverse mapping and bilinear interpolation.
pub fn affine_warp(frame: &Frame, state: &AffineState, out_size: (usize, usize)) -> Result<Patch, MotionError> {
    if frame.is_empty() {
        return Err(MotionError::Warp("empty frame".into()));
    }
    if out_size.0 == 0 || out_size.1 == 0 {
        return Err(MotionError::Warp(format!("output size {out_size:?} must be positive")));
    }
    state.validate()?;
    let (w, h) = out_size;
    let half_w = w as f64 / 2.0;
    let half_h = h as f64 / 2.0;
    Ok(Patch::from_fn(w, h, |i, j| {
        let u = i as f64 + 0.5 - half_w;
        let v = j as f64 + 0.5 - half_h;
        let (px, py) = state.map(u, v);
        frame.sample(px, py)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> AffineState {
        AffineState {
            x: 50.0,
            y: 40.0,
            scale: 1.0,
            aspect: 1.0,
            rotation: 0.0,
            skew: 0.0,
        }
    }

    #[test]
    fn zero_std_leaves_states_unchanged() {
        let mut set = ParticleSet::new(origin(), 20, 1);
        set.propagate(&TransitionModel::new([0.0; 6]).unwrap());
        assert!(set.states().iter().all(|s| *s == origin()));
    }

    #[test]
    fn propagate_is_reproducible() {
        let model = TransitionModel::default();
        let mut a = ParticleSet::new(origin(), 50, 9);
        let mut b = ParticleSet::new(origin(), 50, 9);
        a.propagate(&model);
        b.propagate(&model);
        assert_eq!(a.states(), b.states());
    }

    #[test]
    fn weight_update_hand_cases() {
        let mut set = ParticleSet::new(origin(), 3, 0);
        set.update_weights(&[2.0, 1.0, 1.0]).unwrap();
        assert_eq!(set.weights(), vec![0.5, 0.25, 0.25]);

        let mut set = ParticleSet::new(origin(), 4, 0);
        set.update_weights(&[0.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(set.weights(), vec![0.0, 0.0, 1.0, 0.0]);

        let mut set = ParticleSet::new(origin(), 2, 0);
        set.update_weights(&[1.0, 3.0]).unwrap();
        assert_eq!(set.weights(), vec![0.25, 0.75]);
    }

    #[test]
    fn all_zero_likelihoods_signal_failure() {
        let mut set = ParticleSet::new(origin(), 3, 0);
        assert!(matches!(
            set.update_weights(&[0.0, 0.0, 0.0]),
            Err(MotionError::TrackingFailure)
        ));
        assert!(matches!(
            set.update_weights(&[0.0, f64::NAN, 1.0]),
            Err(MotionError::BadLikelihood { index: 1, .. })
        ));
        assert!(set.update_weights(&[1.0]).is_err());
    }

    #[test]
    fn resample_equal_weights_keeps_each_particle_once() {
        let particles: Vec<Particle> = (0..8)
            .map(|i| Particle {
                state: AffineState { x: i as f64, ..origin() },
                weight: 1.0 / 8.0,
            })
            .collect();
        let mut set = ParticleSet::from_particles(particles, 3);
        set.resample();
        let xs: Vec<f64> = set.states().iter().map(|s| s.x).collect();
        assert_eq!(xs, (0..8).map(|i| i as f64).collect::<Vec<_>>());
        assert!(set.weights().iter().all(|&w| w == 1.0 / 8.0));
    }

    #[test]
    fn resample_degenerate_weights_copies_the_only_survivor() {
        let mut particles: Vec<Particle> = (0..5)
            .map(|i| Particle {
                state: AffineState { x: i as f64, ..origin() },
                weight: 0.0,
            })
            .collect();
        particles[0].weight = 1.0;
        let mut set = ParticleSet::from_particles(particles, 3);
        set.resample();
        assert!(set.states().iter().all(|s| s.x == 0.0));
    }

    #[test]
    fn identity_state_box_round_trip() {
        let b = BoundingBox::new(10.0, 20.0, 40.0, 60.0);
        let s = AffineState::from_box(&b, (32, 32));
        let back = s.bounding_box((32, 32));
        assert!((back.x - b.x).abs() < 1e-12 && (back.w - b.w).abs() < 1e-12);
        assert!((back.y - b.y).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
    }

    #[test]
    fn degenerate_state_is_rejected() {
        let frame = Frame::new(10, 10);
        let s = AffineState { scale: 0.0, ..origin() };
        assert!(matches!(
            affine_warp(&frame, &s, (4, 4)),
            Err(MotionError::Degenerate(_))
        ));
        assert!(affine_warp(&Frame::new(0, 0), &origin(), (4, 4)).is_err());
        assert!(affine_warp(&frame, &origin(), (0, 4)).is_err());
    }

    #[test]
    fn constant_region_gives_constant_patch() {
        let frame = Frame::from_fn(100, 80, |_, _| [0.2, 0.4, 0.6]);
        let p = affine_warp(&frame, &origin(), (16, 16)).unwrap();
        assert!(p
            .rgb()
            .iter()
            .all(|c| (c[0] - 0.2).abs() < 1e-6 && (c[1] - 0.4).abs() < 1e-6 && (c[2] - 0.6).abs() < 1e-6));
    }
}

//! The per-frame tracking loop: propagate, observe, jointly code, select,
//! resample, and maintain the temporal cache and template dictionary.

use std::collections::VecDeque;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{observe, FeatureConfig, FeatureError, MultimodalObservation};
use crate::frame::Frame;
use crate::geometry::BoundingBox;
use crate::motion::{AffineState, MotionError, ParticleSet, TransitionModel};
use crate::solver::{solve, SolverConfig, SolverError, SparseProblem, TemporalTarget};
use crate::templates::{
    init_dictionary, long_term_weights, short_term_select, update_dictionary, update_importance, CandidateBuffer,
    Dictionary, TemplateError,
};

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("invalid tracker config: {0}")]
    Config(String),
    #[error("tracking failed at frame {frame}: every particle has zero likelihood")]
    Failure { frame: usize },
    #[error("frame {got:?} does not match the first frame size {expected:?}")]
    FrameSize {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_particles: usize,
    pub m_templates: usize,
    /// Likelihood sharpness.
    pub gamma_obs: f64,
    /// Representativeness threshold for short-term selection.
    pub gamma_rep: f64,
    /// Temporal window length.
    pub temporal_window: usize,
    /// Candidate buffer length.
    pub buffer_len: usize,
    /// Buffer fill required before template updates are considered.
    pub min_buffer: usize,
    /// Updates are skipped while the newest result correlates at least this
    /// well with some template.
    pub correlation_gate: f64,
    /// Translation std (px) of the initial template jitter.
    pub jitter_std: f64,
    pub transition: TransitionModel,
    pub features: FeatureConfig,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
            lambda3: 0.5,
            alpha: 0.1,
            beta: 0.5,
            n_particles: 400,
            m_templates: 10,
            gamma_obs: 100.0,
            gamma_rep: 0.75,
            temporal_window: 5,
            buffer_len: 10,
            min_buffer: 5,
            correlation_gate: 0.98,
            jitter_std: 1.0,
            transition: TransitionModel::default(),
            features: FeatureConfig::default(),
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let bad = |msg: String| Err(TrackerError::Config(msg));
        let positive = [
            ("lambda1", self.lambda1),
            ("lambda3", self.lambda3),
            ("gamma_obs", self.gamma_obs),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("lambda2 must be >= 0, got {}", self.lambda2));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if !(self.gamma_rep > 0.0 && self.gamma_rep <= 1.0) {
            return bad(format!("gamma_rep must be in (0, 1], got {}", self.gamma_rep));
        }
        if self.n_particles == 0 || self.m_templates == 0 || self.buffer_len == 0 {
            return bad("n_particles, m_templates and buffer_len must be >= 1".into());
        }
        if self.min_buffer == 0 || self.min_buffer > self.buffer_len {
            return bad(format!(
                "min_buffer must be in 1..={}, got {}",
                self.buffer_len, self.min_buffer
            ));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return bad(format!("jitter_std must be >= 0, got {}", self.jitter_std));
        }
        self.transition.validate()?;
        self.features.validate()?;
        Ok(())
    }
}

/// Winning coefficients of a past frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// Target coefficients per modality (length `m`).
    pub coefficients: Vec<DVector<f64>>,
    pub observation: MultimodalObservation,
    pub frame: usize,
    /// The observation is itself a template; its term is left out.
    pub in_dictionary: bool,
}

/// Newest-first ring of at most `T` past winners.
#[derive(Debug, Clone)]
pub struct TemporalCache {
    window: usize,
    entries: VecDeque<CacheEntry>,
}

impl TemporalCache {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            entries: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, entry: CacheEntry) {
        if self.window == 0 {
            return;
        }
        self.entries.push_front(entry);
        self.entries.truncate(self.window);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter()
    }

    /// Targets ordered so that entry `l − 1` is weighted by `α^l`.
    pub fn targets(&self) -> Vec<TemporalTarget> {
        self.entries
            .iter()
            .map(|e| TemporalTarget {
                coefficients: e.coefficients.clone(),
                excluded: e.in_dictionary,
            })
            .collect()
    }
}

/// Per-frame output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackResult {
    pub frame: usize,
    pub state: AffineState,
    pub bbox: BoundingBox,
    /// Squared reconstruction error of the winner.
    pub residual: f64,
    pub solver_iterations: usize,
    /// Templates replaced this frame.
    pub templates_replaced: usize,
}

/// `exp(−gamma_obs · residual_sq)`.
pub fn likelihood(residual_sq: f64, gamma_obs: f64) -> f64 {
    (-gamma_obs * residual_sq).exp()
}

/// Index of the largest value; the first one wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn stack_columns(obs: &[MultimodalObservation], k: usize) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = obs.iter().map(|o| o.vectors[k].clone()).collect();
    DMatrix::from_columns(&cols)
}

#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    frame_size: (usize, usize),
    particles: ParticleSet,
    dictionary: Dictionary,
    buffer: CandidateBuffer,
    cache: TemporalCache,
    next_frame: usize,
}

impl Tracker {
    pub fn init(first_frame: &Frame, gt_box: &BoundingBox, cfg: TrackerConfig) -> Result<Self, TrackerError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut dictionary = init_dictionary(
            first_frame,
            gt_box,
            cfg.m_templates,
            cfg.jitter_std,
            &cfg.features,
            &mut rng,
        )?;
        dictionary.set_representativeness(long_term_weights(&dictionary, cfg.lambda3, &cfg.solver)?)?;
        let state = AffineState::from_box(gt_box, cfg.features.patch_size);
        // separate stream so the particle filter is independent of dictionary size
        let particles = ParticleSet::new(state, cfg.n_particles, cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
        Ok(Self {
            frame_size: (first_frame.width(), first_frame.height()),
            particles,
            dictionary,
            buffer: CandidateBuffer::new(cfg.buffer_len),
            cache: TemporalCache::new(cfg.temporal_window),
            next_frame: 1,
            cfg,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn cache(&self) -> &TemporalCache {
        &self.cache
    }

    pub fn buffer(&self) -> &CandidateBuffer {
        &self.buffer
    }

    /// Observations of every current particle state, in particle order.
    fn observe_all(&self, frame: &Frame, states: &[AffineState]) -> Result<Vec<MultimodalObservation>, TrackerError> {
        states
            .par_iter()
            .map(|s| observe(frame, s, &self.cfg.features).map_err(TrackerError::from))
            .collect()
    }

    /// Joint coding problem for `obs` against the current dictionary.
    pub fn build_problem(
        &self,
        obs: &[MultimodalObservation],
        lambda2: f64,
        temporal: Vec<TemporalTarget>,
    ) -> Result<SparseProblem, TrackerError> {
        let k = self.dictionary.modalities();
        let x = (0..k).map(|k| stack_columns(obs, k)).collect();
        Ok(SparseProblem::builder(self.dictionary.templates().to_vec(), x)
            .trivial(true)
            .lambda1(self.cfg.lambda1)
            .lambda2(lambda2)
            .alpha(self.cfg.alpha)
            .temporal(temporal)
            .build()?)
    }

    /// Target coefficients of a single observation without the temporal term.
    fn standalone_coefficients(&self, obs: &MultimodalObservation) -> Result<Vec<DVector<f64>>, TrackerError> {
        let problem = self.build_problem(std::slice::from_ref(obs), 0.0, Vec::new())?;
        let sol = solve(&problem, &self.cfg.solver)?;
        Ok(sol.target_column(self.dictionary.m(), 0))
    }

    fn refresh_cache(&mut self) -> Result<(), TrackerError> {
        let mut entries: Vec<CacheEntry> = self.cache.entries.drain(..).collect();
        for e in entries.iter_mut() {
            e.coefficients = self.standalone_coefficients(&e.observation)?;
            e.in_dictionary = self.dictionary.source_frames().contains(&e.frame);
        }
        self.cache.entries = entries.into();
        Ok(())
    }

    /// Selects and installs new templates; returns how many were replaced.
    fn update_templates(&mut self) -> Result<usize, TrackerError> {
        if self.buffer.len() < self.cfg.min_buffer {
            return Ok(0);
        }
        let (_, newest) = self.buffer.get(0).expect("buffer is non-empty");
        if self.dictionary.max_correlation(newest) >= self.cfg.correlation_gate {
            return Ok(0);
        }
        let selected: Vec<usize> = short_term_select(
            &self.buffer,
            self.dictionary.m(),
            self.cfg.lambda3,
            self.cfg.gamma_rep,
            &self.cfg.solver,
        )?
        .into_iter()
        .filter(|&i| {
            let frame = self.buffer.get(i).expect("selected index in range").0;
            !self.dictionary.source_frames().contains(&frame)
        })
        .collect();
        if selected.is_empty() {
            return Ok(0);
        }
        self.dictionary = update_dictionary(
            &self.dictionary,
            &self.buffer,
            &selected,
            self.cfg.beta,
            self.cfg.lambda3,
            &self.cfg.solver,
        )?;
        Ok(selected.len())
    }

    pub fn step(&mut self, frame: &Frame) -> Result<TrackResult, TrackerError> {
        let size = (frame.width(), frame.height());
        if size != self.frame_size {
            return Err(TrackerError::FrameSize {
                expected: self.frame_size,
                got: size,
            });
        }
        let index = self.next_frame;

        self.particles.propagate(&self.cfg.transition);
        let states = self.particles.states();
        let obs = self.observe_all(frame, &states)?;

        let problem = self.build_problem(&obs, self.cfg.lambda2, self.cache.targets())?;
        let sol = solve(&problem, &self.cfg.solver)?;
        let residuals = sol.column_residuals(&problem);
        let lik: Vec<f64> = residuals.iter().map(|&r| likelihood(r, self.cfg.gamma_obs)).collect();
        if lik.iter().all(|&v| v == 0.0) {
            return Err(TrackerError::Failure { frame: index });
        }
        let winner = argmax(&lik);
        let state = states[winner];
        let winner_obs = obs[winner].clone();
        let m = self.dictionary.m();

        self.particles.update_weights(&lik).map_err(|e| match e {
            MotionError::TrackingFailure => TrackerError::Failure { frame: index },
            other => other.into(),
        })?;
        self.particles.resample();

        let importance = update_importance(self.dictionary.importance(), &sol.target_column(m, winner))?;
        self.dictionary.set_importance(importance)?;

        self.buffer.push(index, winner_obs.clone());
        let coefficients = self.standalone_coefficients(&winner_obs)?;
        self.cache.push(CacheEntry {
            coefficients,
            observation: winner_obs,
            frame: index,
            in_dictionary: false,
        });

        let replaced = self.update_templates()?;
        if replaced > 0 {
            self.refresh_cache()?;
        }
        debug!(
            "frame {index}: winner {winner} residual {:.4} iters {} replaced {replaced}",
            residuals[winner], sol.iterations
        );

        self.next_frame += 1;
        let bbox = state
            .bounding_box(self.cfg.features.patch_size)
            .clamp_to(size.0 as f64, size.1 as f64);
        Ok(TrackResult {
            frame: index,
            state,
            bbox,
            residual: residuals[winner],
            solver_iterations: sol.iterations,
            templates_replaced: replaced,
        })
    }
}

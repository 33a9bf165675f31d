//! Target-template dictionary: initialization, adaptive short-term candidate
//! selection, long-term representativeness and importance bookkeeping.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{observe, FeatureConfig, FeatureError, MultimodalObservation};
use crate::frame::Frame;
use crate::geometry::BoundingBox;
use crate::motion::AffineState;
use crate::solver::{solve_self_representation, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("box {0:?} is not inside the frame")]
    BoxOutside(BoundingBox),
    #[error("invalid template parameter: {0}")]
    Parameter(String),
    #[error("cannot replace {r} of {m} templates")]
    TooManySelected { r: usize, m: usize },
    #[error("candidate index {0} is out of range")]
    BadCandidate(usize),
    #[error("inconsistent dictionary: {0}")]
    Shape(String),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `m` templates per modality plus their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    templates: Vec<DMatrix<f64>>,
    importance: Vec<f64>,
    representativeness: Vec<f64>,
    source_frames: Vec<usize>,
}

impl Dictionary {
    /// Builds a dictionary from `m` observations captured at `source_frames`,
    /// with uniform weights.
    pub fn from_observations(obs: &[MultimodalObservation], source_frames: Vec<usize>) -> Result<Self, TemplateError> {
        let m = obs.len();
        if m == 0 || source_frames.len() != m {
            return Err(TemplateError::Shape(format!(
                "{m} observations for {} source frames",
                source_frames.len()
            )));
        }
        let dims = obs[0].dims();
        if obs.iter().any(|o| o.dims() != dims) {
            return Err(TemplateError::Shape("observation dims differ".into()));
        }
        let templates = (0..dims.len())
            .map(|k| DMatrix::from_columns(&obs.iter().map(|o| o.vectors[k].clone()).collect::<Vec<_>>()))
            .collect();
        Ok(Self {
            templates,
            importance: vec![1.0 / m as f64; m],
            representativeness: vec![1.0 / m as f64; m],
            source_frames,
        })
    }

    pub fn m(&self) -> usize {
        self.source_frames.len()
    }

    pub fn modalities(&self) -> usize {
        self.templates.len()
    }

    /// Per-modality `d_k × m` template matrices.
    pub fn templates(&self) -> &[DMatrix<f64>] {
        &self.templates
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    pub fn representativeness(&self) -> &[f64] {
        &self.representativeness
    }

    pub fn source_frames(&self) -> &[usize] {
        &self.source_frames
    }

    pub fn set_importance(&mut self, w: Vec<f64>) -> Result<(), TemplateError> {
        self.importance = checked_weights(w, self.m(), "importance")?;
        Ok(())
    }

    pub fn set_representativeness(&mut self, w: Vec<f64>) -> Result<(), TemplateError> {
        self.representativeness = checked_weights(w, self.m(), "representativeness")?;
        Ok(())
    }

    /// Template `i` as a multimodal observation.
    pub fn column(&self, i: usize) -> MultimodalObservation {
        MultimodalObservation {
            vectors: self.templates.iter().map(|t| t.column(i).into_owned()).collect(),
        }
    }

    /// Stacked, unit-norm template columns (`d × m`).
    pub fn stacked(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..self.m()).map(|i| self.column(i).stacked()).collect();
        DMatrix::from_columns(&cols)
    }

    /// Largest mean-cosine similarity between `obs` and any template.
    pub fn max_correlation(&self, obs: &MultimodalObservation) -> f64 {
        (0..self.m())
            .map(|i| self.column(i).correlation(obs))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_checkpoint(&self) -> DictionaryCheckpoint {
        DictionaryCheckpoint {
            templates: self
                .templates
                .iter()
                .map(|t| t.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            importance: self.importance.clone(),
            representativeness: self.representativeness.clone(),
            source_frames: self.source_frames.clone(),
        }
    }

    pub fn from_checkpoint(c: DictionaryCheckpoint) -> Result<Self, TemplateError> {
        let m = c.source_frames.len();
        if m == 0 {
            return Err(TemplateError::Shape("empty dictionary".into()));
        }
        let mut templates = Vec::with_capacity(c.templates.len());
        for (k, rows) in c.templates.iter().enumerate() {
            if rows.is_empty() || rows.iter().any(|r| r.len() != m) {
                return Err(TemplateError::Shape(format!("modality {k} is not d×{m}")));
            }
            let t = DMatrix::from_row_iterator(rows.len(), m, rows.iter().flatten().copied());
            for (j, col) in t.column_iter().enumerate() {
                if (col.norm() - 1.0).abs() > 1e-6 {
                    return Err(TemplateError::Shape(format!("modality {k} column {j} is not unit norm")));
                }
            }
            templates.push(t);
        }
        if templates.is_empty() {
            return Err(TemplateError::Shape("no modalities".into()));
        }
        Ok(Self {
            templates,
            importance: checked_weights(c.importance, m, "importance")?,
            representativeness: checked_weights(c.representativeness, m, "representativeness")?,
            source_frames: c.source_frames,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<(), TemplateError> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|source| TemplateError::Checkpoint {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Checkpoint {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// JSON form of a [`Dictionary`]; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryCheckpoint {
    pub templates: Vec<Vec<Vec<f64>>>,
    pub importance: Vec<f64>,
    pub representativeness: Vec<f64>,
    pub source_frames: Vec<usize>,
}

fn checked_weights(w: Vec<f64>, m: usize, what: &str) -> Result<Vec<f64>, TemplateError> {
    if w.len() != m {
        return Err(TemplateError::Shape(format!("{what} has {} entries, expected {m}", w.len())));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(TemplateError::Parameter(format!("{what} weights must be finite and nonnegative")));
    }
    Ok(normalized(w))
}

/// Rescales to sum 1; an all-zero vector becomes uniform.
fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|v| *v = u);
    }
    w
}

/// Recent tracking results, newest first.
#[derive(Debug, Clone)]
pub struct CandidateBuffer {
    capacity: usize,
    entries: VecDeque<(usize, MultimodalObservation)>,
}

impl CandidateBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, frame: usize, obs: MultimodalObservation) {
        self.entries.push_front((frame, obs));
        self.entries.truncate(self.capacity);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `(frame index, observation)` of entry `i` (0 = newest).
    pub fn get(&self, i: usize) -> Option<(usize, &MultimodalObservation)> {
        self.entries.get(i).map(|(f, o)| (*f, o))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &MultimodalObservation)> {
        self.entries.iter().map(|(f, o)| (*f, o))
    }

    /// Stacked, unit-norm candidates as columns (`d × len`).
    pub fn stacked(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.entries.iter().map(|(_, o)| o.stacked()).collect();
        DMatrix::from_columns(&cols)
    }
}

/// Observation at `gt_box` followed by `m − 1` observations at boxes shifted
/// by Gaussian offsets of std `jitter_std` pixels, truncated at `2·jitter_std`.
pub fn init_dictionary<R: Rng>(
    frame: &Frame,
    gt_box: &BoundingBox,
    m: usize,
    jitter_std: f64,
    cfg: &FeatureConfig,
    rng: &mut R,
) -> Result<Dictionary, TemplateError> {
    if m == 0 {
        return Err(TemplateError::Parameter("m must be >= 1".into()));
    }
    if !(jitter_std >= 0.0 && jitter_std.is_finite()) {
        return Err(TemplateError::Parameter("jitter_std must be finite and >= 0".into()));
    }
    if !gt_box.is_valid() || !gt_box.inside(frame.width() as f64, frame.height() as f64) {
        return Err(TemplateError::BoxOutside(*gt_box));
    }
    let base = AffineState::from_box(gt_box, cfg.patch_size);
    let mut obs = vec![observe(frame, &base, cfg)?];
    if m > 1 {
        let mut offset = || {
            if jitter_std == 0.0 {
                return 0.0;
            }
            let normal = Normal::new(0.0, jitter_std).expect("std validated");
            normal.sample(rng).clamp(-2.0 * jitter_std, 2.0 * jitter_std)
        };
        for _ in 1..m {
            let (dx, dy) = (offset(), offset());
            let s = AffineState {
                x: base.x + dx,
                y: base.y + dy,
                ..base
            };
            obs.push(observe(frame, &s, cfg)?);
        }
    }
    Dictionary::from_observations(&obs, vec![0; m])
}

fn row_l1_sums(u: &DMatrix<f64>) -> Vec<f64> {
    u.row_iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect()
}

/// Indices (into the buffer) of the most representative recent results.
///
/// Solves the self-representation problem over the stacked candidates, ranks
/// rows of `U` by ℓ1 row-sum and returns the smallest prefix whose mean
/// row-sum mass reaches `gamma_rep`, capped at `min(l − 1, m − 1)`.
pub fn short_term_select(
    buf: &CandidateBuffer,
    m: usize,
    lambda3: f64,
    gamma_rep: f64,
    config: &SolverConfig,
) -> Result<Vec<usize>, TemplateError> {
    if buf.is_empty() {
        return Err(TemplateError::Parameter("candidate buffer is empty".into()));
    }
    if !(gamma_rep > 0.0 && gamma_rep <= 1.0) {
        return Err(TemplateError::Parameter(format!("gamma_rep {gamma_rep} not in (0, 1]")));
    }
    let l = buf.len();
    let cap = (l - 1).min(m.saturating_sub(1));
    if cap == 0 {
        return Ok(Vec::new());
    }
    let u = solve_self_representation(&buf.stacked(), lambda3, config)?;
    let sums = row_l1_sums(&u);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut r = cap;
    for (i, &idx) in order.iter().enumerate().take(cap) {
        mass += sums[idx];
        if mass / l as f64 >= gamma_rep {
            r = i + 1;
            break;
        }
    }
    order.truncate(r);
    Ok(order)
}

/// Normalized row-sums of the self-representation of the templates.
pub fn long_term_weights(dict: &Dictionary, lambda3: f64, config: &SolverConfig) -> Result<Vec<f64>, TemplateError> {
    if dict.m() == 1 {
        return Ok(vec![1.0]);
    }
    let u = solve_self_representation(&dict.stacked(), lambda3, config)?;
    Ok(normalized(row_l1_sums(&u)))
}

/// `β·w_rep + (1 − β)·w_imp`.
pub fn removal_weights(w_rep: &[f64], w_imp: &[f64], beta: f64) -> Result<Vec<f64>, TemplateError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(TemplateError::Parameter(format!("beta {beta} not in [0, 1]")));
    }
    if w_rep.len() != w_imp.len() {
        return Err(TemplateError::Shape("weight lengths differ".into()));
    }
    Ok(w_rep
        .iter()
        .zip(w_imp)
        .map(|(r, i)| beta * r + (1.0 - beta) * i)
        .collect())
}

/// Replaces the `r = selected.len()` templates with the lowest combined
/// weight by the selected buffer entries.
///
/// Ties go against the older `source_frame`. New templates enter with the
/// mean surviving importance; representativeness is recomputed afterwards.
pub fn update_dictionary(
    dict: &Dictionary,
    buf: &CandidateBuffer,
    selected: &[usize],
    beta: f64,
    lambda3: f64,
    config: &SolverConfig,
) -> Result<Dictionary, TemplateError> {
    let m = dict.m();
    let r = selected.len();
    if r >= m {
        return Err(TemplateError::TooManySelected { r, m });
    }
    if r == 0 {
        return Ok(dict.clone());
    }
    let combined = removal_weights(&dict.representativeness, &dict.importance, beta)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        combined[a]
            .total_cmp(&combined[b])
            .then(dict.source_frames[a].cmp(&dict.source_frames[b]))
            .then(a.cmp(&b))
    });
    let mut evicted = vec![false; m];
    for &i in &order[..r] {
        evicted[i] = true;
    }

    let mut columns = Vec::with_capacity(m);
    let mut importance = Vec::with_capacity(m);
    let mut frames = Vec::with_capacity(m);
    for i in (0..m).filter(|&i| !evicted[i]) {
        columns.push(dict.column(i));
        importance.push(dict.importance[i]);
        frames.push(dict.source_frames[i]);
    }
    let fresh = importance.iter().sum::<f64>() / importance.len() as f64;
    for &s in selected {
        let (frame, obs) = buf.get(s).ok_or(TemplateError::BadCandidate(s))?;
        if obs.dims() != dict.column(0).dims() {
            return Err(TemplateError::Shape("candidate dims differ from templates".into()));
        }
        columns.push(obs.clone());
        importance.push(fresh);
        frames.push(frame);
    }

    let mut next = Dictionary::from_observations(&columns, frames)?;
    next.importance = normalized(importance);
    next.representativeness = long_term_weights(&next, lambda3, config)?;
    Ok(next)
}

/// `w_i ← w_i · exp(|z̄_i|)`, renormalized, where `z̄` is the winner's
/// target coefficients averaged over modalities.
pub fn update_importance(w_imp: &[f64], coefficients: &[DVector<f64>]) -> Result<Vec<f64>, TemplateError> {
    let m = w_imp.len();
    if coefficients.is_empty() || coefficients.iter().any(|z| z.len() != m) {
        return Err(TemplateError::Shape(format!("coefficients must have length {m}")));
    }
    let k = coefficients.len() as f64;
    let out = (0..m)
        .map(|i| {
            let z = coefficients.iter().map(|c| c[i]).sum::<f64>() / k;
            w_imp[i] * z.abs().exp()
        })
        .collect();
    checked_weights(out, m, "importance")
}

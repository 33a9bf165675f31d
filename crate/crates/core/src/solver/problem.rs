use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SolverError;

const UNIT_NORM_TOL: f64 = 1e-6;

/// Coefficient vector of a past tracking result, one length-`m` vector per
/// modality, broadcast across all particle columns inside the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalTarget {
    pub coefficients: Vec<DVector<f64>>,
    /// The result this entry was computed from is itself a dictionary
    /// template, so it contributes nothing to the objective.
    pub excluded: bool,
}

impl TemporalTarget {
    pub fn new(coefficients: Vec<DVector<f64>>) -> Self {
        Self {
            coefficients,
            excluded: false,
        }
    }
}

/// One joint-sparse coding problem over `K` modalities.
///
/// Each modality `k` has a template block `D^k` (`d_k × m`) and observations
/// `X^k` (`d_k × n`). When `trivial` is set, the effective dictionary is
/// `[D^k, I]` and the coefficient matrix gains `d_k` trivial rows below the
/// `m` target rows.
#[derive(Debug, Clone)]
pub struct SparseProblem {
    templates: Vec<DMatrix<f64>>,
    observations: Vec<DMatrix<f64>>,
    /// `X^kᵀ`, kept so `Dᵀ G X` can run as a contiguous matrix product.
    observations_t: Vec<DMatrix<f64>>,
    trivial: bool,
    lambda1: f64,
    lambda2: f64,
    alpha: f64,
    temporal: Vec<TemporalTarget>,
}

impl SparseProblem {
    pub fn builder(
        templates: Vec<DMatrix<f64>>,
        observations: Vec<DMatrix<f64>>,
    ) -> SparseProblemBuilder {
        SparseProblemBuilder {
            templates,
            observations,
            trivial: true,
            lambda1: 0.5,
            lambda2: 0.0,
            alpha: 0.1,
            temporal: Vec::new(),
        }
    }

    pub fn modalities(&self) -> usize {
        self.templates.len()
    }

    /// Number of target templates.
    pub fn m(&self) -> usize {
        self.templates[0].ncols()
    }

    /// Number of observation columns (particles).
    pub fn n(&self) -> usize {
        self.observations[0].ncols()
    }

    pub fn dim(&self, k: usize) -> usize {
        self.templates[k].nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.templates.iter().map(|t| t.nrows()).collect()
    }

    /// Row count of the coefficient matrix for modality `k`.
    pub fn coefficient_rows(&self, k: usize) -> usize {
        if self.trivial {
            self.m() + self.dim(k)
        } else {
            self.m()
        }
    }

    pub fn template(&self, k: usize) -> &DMatrix<f64> {
        &self.templates[k]
    }

    pub fn observation(&self, k: usize) -> &DMatrix<f64> {
        &self.observations[k]
    }

    pub fn has_trivial(&self) -> bool {
        self.trivial
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn temporal(&self) -> &[TemporalTarget] {
        &self.temporal
    }

    /// Active temporal targets paired with their decay weight `alpha^lag`,
    /// where lag is the 1-based position in the newest-first list.
    pub fn active_temporal(&self) -> impl Iterator<Item = (f64, &TemporalTarget)> + '_ {
        let alpha = self.alpha;
        self.temporal
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.excluded)
            .map(move |(idx, t)| (alpha.powi(idx as i32 + 1), t))
    }

    /// Same problem with different temporal targets.
    pub fn with_temporal(&self, temporal: Vec<TemporalTarget>) -> Result<Self, SolverError> {
        let mut p = self.clone();
        p.temporal = temporal;
        p.validate()?;
        Ok(p)
    }

    /// Same problem with a different `lambda2`.
    pub fn with_lambda2(&self, lambda2: f64) -> Result<Self, SolverError> {
        let mut p = self.clone();
        p.lambda2 = lambda2;
        p.validate()?;
        Ok(p)
    }

    pub(crate) fn observation_t(&self, k: usize) -> &DMatrix<f64> {
        &self.observations_t[k]
    }

    pub(crate) fn check_coefficients(&self, w: &[DMatrix<f64>]) -> Result<(), SolverError> {
        if w.len() != self.modalities() {
            return Err(SolverError::Shape(format!(
                "expected {} coefficient blocks, got {}",
                self.modalities(),
                w.len()
            )));
        }
        for (k, wk) in w.iter().enumerate() {
            if wk.nrows() != self.coefficient_rows(k) || wk.ncols() != self.n() {
                return Err(SolverError::Shape(format!(
                    "coefficient block {k} is {}x{}, expected {}x{}",
                    wk.nrows(),
                    wk.ncols(),
                    self.coefficient_rows(k),
                    self.n()
                )));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), SolverError> {
        let k = self.templates.len();
        if k == 0 {
            return Err(SolverError::Shape("at least one modality is required".into()));
        }
        if self.observations.len() != k {
            return Err(SolverError::Shape(format!(
                "{k} template blocks but {} observation blocks",
                self.observations.len()
            )));
        }
        let m = self.templates[0].ncols();
        let n = self.observations[0].ncols();
        if m == 0 || n == 0 {
            return Err(SolverError::Shape("m and n must be positive".into()));
        }
        for (idx, (d, x)) in self.templates.iter().zip(&self.observations).enumerate() {
            if d.ncols() != m {
                return Err(SolverError::Shape(format!(
                    "modality {idx} has {} templates, expected {m}",
                    d.ncols()
                )));
            }
            if x.ncols() != n {
                return Err(SolverError::Shape(format!(
                    "modality {idx} has {} observations, expected {n}",
                    x.ncols()
                )));
            }
            if d.nrows() != x.nrows() || d.nrows() == 0 {
                return Err(SolverError::Shape(format!(
                    "modality {idx}: template rows {} vs observation rows {}",
                    d.nrows(),
                    x.nrows()
                )));
            }
            for (what, mat) in [("template", d), ("observation", x)] {
                if mat.iter().any(|v| !v.is_finite()) {
                    return Err(SolverError::NonFinite(format!("modality {idx} {what}")));
                }
                for (c, col) in mat.column_iter().enumerate() {
                    let norm = col.norm();
                    if (norm - 1.0).abs() > UNIT_NORM_TOL {
                        return Err(SolverError::NotNormalized {
                            what,
                            modality: idx,
                            column: c,
                            norm,
                        });
                    }
                }
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(SolverError::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SolverError::Parameter(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.trivial && self.lambda1 <= 0.0 {
            // [D, I] has a nullspace; without the row penalty the target
            // block is undetermined.
            return Err(SolverError::Parameter(
                "lambda1 must be positive when trivial templates are used".into(),
            ));
        }
        for (l, t) in self.temporal.iter().enumerate() {
            if t.coefficients.len() != k {
                return Err(SolverError::Shape(format!(
                    "temporal target {l} has {} modalities, expected {k}",
                    t.coefficients.len()
                )));
            }
            for c in &t.coefficients {
                if c.len() != m {
                    return Err(SolverError::Shape(format!(
                        "temporal target {l} has length {}, expected {m}",
                        c.len()
                    )));
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(SolverError::NonFinite(format!("temporal target {l}")));
                }
            }
        }
        Ok(())
    }
}

pub struct SparseProblemBuilder {
    templates: Vec<DMatrix<f64>>,
    observations: Vec<DMatrix<f64>>,
    trivial: bool,
    lambda1: f64,
    lambda2: f64,
    alpha: f64,
    temporal: Vec<TemporalTarget>,
}

impl SparseProblemBuilder {
    pub fn trivial(mut self, trivial: bool) -> Self {
        self.trivial = trivial;
        self
    }

    pub fn lambda1(mut self, v: f64) -> Self {
        self.lambda1 = v;
        self
    }

    pub fn lambda2(mut self, v: f64) -> Self {
        self.lambda2 = v;
        self
    }

    pub fn alpha(mut self, v: f64) -> Self {
        self.alpha = v;
        self
    }

    pub fn temporal(mut self, targets: Vec<TemporalTarget>) -> Self {
        self.temporal = targets;
        self
    }

    pub fn build(self) -> Result<SparseProblem, SolverError> {
        let mut p = SparseProblem {
            templates: self.templates,
            observations: self.observations,
            observations_t: Vec::new(),
            trivial: self.trivial,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            alpha: self.alpha,
            temporal: self.temporal,
        };
        p.validate()?;
        p.observations_t = p.observations.iter().map(|x| x.transpose()).collect();
        Ok(p)
    }
}

//! Joint-sparse coding by iteratively reweighted least squares.
//!
//! Minimizes, over per-modality coefficient blocks `W^k`,
//!
//! ```text
//! Σ_k ‖B^k W^k − X^k‖²_F + λ1 ‖W‖_{2,1} + λ2 Σ_l α^l ‖W − W_{t−l}‖_{2,1}
//! ```
//!
//! where `B^k = [D^k, I]`. Each of the `m` target rows is one group spanning
//! every particle column of every modality; each trivial row is its own group
//! within its modality. The temporal term touches target rows only.
//!
//! Every iteration majorizes the row norms by quadratics (the reweighting
//! step) and minimizes the majorizer exactly. The trivial block is eliminated
//! analytically, so each update factors an `m × m` matrix instead of an
//! `(m + d_k) × (m + d_k)` one.

mod problem;

pub use problem::{SparseProblem, SparseProblemBuilder, TemporalTarget};

use nalgebra::{Cholesky, DMatrix, DVector, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smoothing floor applied to row norms before reweighting.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("{what} column {column} of modality {modality} has norm {norm}, expected 1")]
    NotNormalized {
        what: &'static str,
        modality: usize,
        column: usize,
        norm: f64,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("normal matrix of modality {0} is not positive definite")]
    NotPositiveDefinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Relative objective change below which iteration stops.
    pub tol: f64,
    pub epsilon: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolverError> {
        if self.max_iters == 0 {
            return Err(SolverError::Parameter("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(SolverError::Parameter(format!("tol must be > 0, got {}", self.tol)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SolverError::Parameter(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CoefficientSolution {
    /// One `(m [+ d_k]) × n` block per modality; target rows first.
    pub coefficients: Vec<DMatrix<f64>>,
    /// Smoothed objective after each update.
    pub objective_trace: Vec<f64>,
    /// Smoothed objective at the least-squares starting point.
    pub initial_objective: f64,
    pub iterations: usize,
}

impl CoefficientSolution {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace
            .last()
            .copied()
            .unwrap_or(self.initial_objective)
    }

    /// Target-row coefficients of particle `col`, one length-`m` vector per modality.
    pub fn target_column(&self, m: usize, col: usize) -> Vec<DVector<f64>> {
        self.coefficients
            .iter()
            .map(|w| w.view((0, col), (m, 1)).column(0).into_owned())
            .collect()
    }

    /// Squared reconstruction error `Σ_k ‖x^k_i − B^k w^k_i‖²` for every column,
    /// using all coefficient rows.
    pub fn column_residuals(&self, problem: &SparseProblem) -> Vec<f64> {
        let mut out = vec![0.0; problem.n()];
        for (k, w) in self.coefficients.iter().enumerate() {
            let r = residual_block(problem, k, w);
            for (j, col) in r.column_iter().enumerate() {
                out[j] += col.norm_squared();
            }
        }
        out
    }
}

/// Diagonals of the reweighting matrices for one iteration.
#[derive(Debug, Clone)]
pub struct IrlsState {
    /// One value per target row.
    pub diag_sparsity: DVector<f64>,
    /// One vector per modality over its trivial rows; empty without trivial templates.
    pub diag_trivial: Vec<DVector<f64>>,
    /// Aligned with the problem's temporal targets, excluded ones included.
    pub diag_temporal: Vec<DVector<f64>>,
    pub epsilon: f64,
}

fn inv_weight(norm: f64, epsilon: f64) -> f64 {
    1.0 / (2.0 * norm.max(epsilon))
}

/// Huber-type smoothing of a row norm whose quadratic majorizer at any point
/// is exactly the reweighted quadratic used by the update.
fn smoothed(norm: f64, epsilon: f64) -> f64 {
    if norm >= epsilon {
        norm
    } else {
        norm * norm / (2.0 * epsilon) + epsilon / 2.0
    }
}

fn target_row_norms(problem: &SparseProblem, w: &[DMatrix<f64>]) -> Vec<f64> {
    let m = problem.m();
    let mut sq = vec![0.0; m];
    for wk in w {
        for col in wk.column_iter() {
            for (s, v) in sq.iter_mut().zip(col.iter().take(m)) {
                *s += v * v;
            }
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

fn temporal_row_norms(problem: &SparseProblem, w: &[DMatrix<f64>], target: &TemporalTarget) -> Vec<f64> {
    let m = problem.m();
    let mut sq = vec![0.0; m];
    for (wk, ck) in w.iter().zip(&target.coefficients) {
        for col in wk.column_iter() {
            for ((s, v), c) in sq.iter_mut().zip(col.iter().take(m)).zip(ck.iter()) {
                *s += (v - c) * (v - c);
            }
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Row norms of rows `start..` accumulated column by column (the storage
/// order), which is far cheaper than strided row access for tall blocks.
fn row_norms_from(wk: &DMatrix<f64>, start: usize) -> Vec<f64> {
    let mut sq = vec![0.0; wk.nrows() - start];
    for col in wk.column_iter() {
        for (s, v) in sq.iter_mut().zip(col.iter().skip(start)) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

fn trivial_row_norms(problem: &SparseProblem, wk: &DMatrix<f64>) -> Vec<f64> {
    row_norms_from(wk, problem.m())
}

/// Multiplies row `i` of `a` by `s[i]`.
fn scale_rows(a: &mut DMatrix<f64>, s: &DVector<f64>) {
    for mut col in a.column_iter_mut() {
        col.component_mul_assign(s);
    }
}

/// `B^k W^k − X^k`.
fn residual_block(problem: &SparseProblem, k: usize, wk: &DMatrix<f64>) -> DMatrix<f64> {
    let m = problem.m();
    let d = problem.template(k);
    let z = wk.rows(0, m);
    let mut r = d * z - problem.observation(k);
    if problem.has_trivial() {
        r += wk.rows(m, d.nrows());
    }
    r
}

fn fit_term(problem: &SparseProblem, w: &[DMatrix<f64>]) -> f64 {
    w.iter()
        .enumerate()
        .map(|(k, wk)| residual_block(problem, k, wk).norm_squared())
        .sum()
}

fn evaluate(problem: &SparseProblem, w: &[DMatrix<f64>], penalty: impl Fn(f64) -> f64) -> f64 {
    fit_term(problem, w) + penalties(problem, w, penalty)
}

/// Everything but the data-fit term.
fn penalties(problem: &SparseProblem, w: &[DMatrix<f64>], penalty: impl Fn(f64) -> f64) -> f64 {
    RowNorms::new(problem, w).penalty(problem, penalty)
}

/// Every group norm of one iterate.
struct RowNorms {
    target: Vec<f64>,
    /// Per modality; empty without trivial templates.
    trivial: Vec<Vec<f64>>,
    /// Aligned with the problem's temporal targets, excluded ones included.
    temporal: Vec<Vec<f64>>,
}

impl RowNorms {
    fn new(problem: &SparseProblem, w: &[DMatrix<f64>]) -> Self {
        let trivial = if problem.has_trivial() {
            w.iter().map(|wk| trivial_row_norms(problem, wk)).collect()
        } else {
            Vec::new()
        };
        Self::with_trivial(problem, w, trivial)
    }

    fn with_trivial(problem: &SparseProblem, w: &[DMatrix<f64>], trivial: Vec<Vec<f64>>) -> Self {
        Self {
            target: target_row_norms(problem, w),
            trivial,
            temporal: problem
                .temporal()
                .iter()
                .map(|t| temporal_row_norms(problem, w, t))
                .collect(),
        }
    }

    fn penalty(&self, problem: &SparseProblem, penalty: impl Fn(f64) -> f64) -> f64 {
        let mut sparsity: f64 = self.target.iter().copied().map(&penalty).sum();
        for norms in &self.trivial {
            sparsity += norms.iter().copied().map(&penalty).sum::<f64>();
        }
        let mut temporal = 0.0;
        for (lag, (target, norms)) in problem.temporal().iter().zip(&self.temporal).enumerate() {
            if target.excluded {
                continue;
            }
            let decay = problem.alpha().powi(lag as i32 + 1);
            temporal += decay * norms.iter().copied().map(&penalty).sum::<f64>();
        }
        problem.lambda1() * sparsity + problem.lambda2() * temporal
    }

    fn weights(&self, epsilon: f64) -> IrlsState {
        let inv = |v: &[f64]| DVector::from_iterator(v.len(), v.iter().map(|&r| inv_weight(r, epsilon)));
        IrlsState {
            diag_sparsity: inv(&self.target),
            diag_trivial: self.trivial.iter().map(|n| inv(n)).collect(),
            diag_temporal: self.temporal.iter().map(|n| inv(n)).collect(),
            epsilon,
        }
    }
}

/// Exact (non-smoothed) objective value of `w`.
pub fn objective(problem: &SparseProblem, w: &[DMatrix<f64>]) -> Result<f64, SolverError> {
    problem.check_coefficients(w)?;
    Ok(evaluate(problem, w, |r| r))
}

/// Objective with every row norm replaced by its `epsilon`-smoothed surrogate.
/// This is the quantity the iteration decreases monotonically; it differs from
/// [`objective`] by at most `epsilon / 2` per group.
pub fn smoothed_objective(
    problem: &SparseProblem,
    w: &[DMatrix<f64>],
    epsilon: f64,
) -> Result<f64, SolverError> {
    problem.check_coefficients(w)?;
    Ok(evaluate(problem, w, |r| smoothed(r, epsilon)))
}

/// Reweighting diagonals `1 / (2 max(‖row‖, ε))` at the current iterate.
pub fn reweight(
    problem: &SparseProblem,
    w: &[DMatrix<f64>],
    epsilon: f64,
) -> Result<IrlsState, SolverError> {
    problem.check_coefficients(w)?;
    if !(epsilon > 0.0) {
        return Err(SolverError::Parameter("epsilon must be > 0".into()));
    }
    Ok(RowNorms::new(problem, w).weights(epsilon))
}

/// Minimizes the quadratic majorizer defined by `state` for modality `k`:
///
/// ```text
/// W^k = (BᵀB + λ1·D̃ + λ2 Σ α^l D^l)⁻¹ (BᵀX + λ2 Σ α^l D^l W_{t−l})
/// ```
///
/// With trivial templates the lower block is eliminated first:
/// `E = H (X − D Z)` with `H = (I + λ1·D̃_E)⁻¹`, leaving the `m × m` system
/// `(Dᵀ G D + Λ) Z = Dᵀ G X + R` where `G = I − H`.
pub fn closed_form_step(
    problem: &SparseProblem,
    state: &IrlsState,
    k: usize,
) -> Result<DMatrix<f64>, SolverError> {
    if k >= problem.modalities() {
        return Err(SolverError::Shape(format!("modality {k} out of range")));
    }
    let rows = if problem.has_trivial() { problem.m() + problem.dim(k) } else { problem.m() };
    let mut w = DMatrix::zeros(rows, problem.n());
    step_into(problem, state, k, &mut w)?;
    Ok(w)
}

struct StepOutput {
    /// `‖B^k W^k − X^k‖²`.
    fit: f64,
    /// Trivial-row norms of the new block; empty without trivial templates.
    trivial_norms: Vec<f64>,
}

/// Writes the update for modality `k` into `w` (already shaped) and returns
/// by-products the iteration needs next.
fn step_into(
    problem: &SparseProblem,
    state: &IrlsState,
    k: usize,
    w: &mut DMatrix<f64>,
) -> Result<StepOutput, SolverError> {
    let m = problem.m();
    let d = problem.template(k);
    let x = problem.observation(k);
    let lambda1 = problem.lambda1();
    let lambda2 = problem.lambda2();

    let mut lam_z = &state.diag_sparsity * lambda1;
    let mut pull = DVector::<f64>::zeros(m);
    if lambda2 > 0.0 {
        for (lag, (target, diag)) in problem.temporal().iter().zip(&state.diag_temporal).enumerate() {
            if target.excluded {
                continue;
            }
            let decay = problem.alpha().powi(lag as i32 + 1);
            let scaled = diag * (lambda2 * decay);
            pull += scaled.component_mul(&target.coefficients[k]);
            lam_z += scaled;
        }
    }

    let (mut normal, mut rhs, shrink) = if problem.has_trivial() {
        let e = &state.diag_trivial[k];
        let shrink = e.map(|v| 1.0 / (1.0 + lambda1 * v));
        let keep = shrink.map(|h| 1.0 - h);
        let mut gd = d.clone();
        scale_rows(&mut gd, &keep);
        let rhs = (problem.observation_t(k) * &gd).transpose();
        (d.tr_mul(&gd), rhs, Some((shrink, keep)))
    } else {
        (d.tr_mul(d), (problem.observation_t(k) * d).transpose(), None)
    };

    for i in 0..m {
        normal[(i, i)] += lam_z[i];
    }
    for mut col in rhs.column_iter_mut() {
        col += &pull;
    }

    let chol = Cholesky::new(normal).ok_or(SolverError::NotPositiveDefinite(k))?;
    let z = chol.solve(&rhs);

    match shrink {
        Some((h, g)) => {
            // E = H (X − D Z); the residual B W − X = −G (X − D Z) comes for free.
            // Columns are built in place, one at a time, to stay in cache.
            let rows = d.nrows();
            let (xs, ds, zs) = (x.as_slice(), d.as_slice(), z.as_slice());
            let (hs, gs) = (h.as_slice(), g.as_slice());
            let mut fit = 0.0;
            let mut sq = vec![0.0; rows];
            for (j, wc) in w.as_mut_slice().chunks_exact_mut(m + rows).enumerate() {
                let (wz, we) = wc.split_at_mut(m);
                wz.copy_from_slice(&zs[j * m..(j + 1) * m]);
                we.copy_from_slice(&xs[j * rows..(j + 1) * rows]);
                for (i, &zij) in wz.iter().enumerate() {
                    for (v, dv) in we.iter_mut().zip(&ds[i * rows..(i + 1) * rows]) {
                        *v -= zij * dv;
                    }
                }
                for (((v, s), hv), gv) in we.iter_mut().zip(sq.iter_mut()).zip(hs).zip(gs) {
                    let r = gv * *v;
                    fit += r * r;
                    *v *= hv;
                    *s += *v * *v;
                }
            }
            Ok(StepOutput {
                fit,
                trivial_norms: sq.into_iter().map(f64::sqrt).collect(),
            })
        }
        None => {
            let mut r = x.clone();
            r.gemm(1.0, d, &z, -1.0);
            w.copy_from(&z);
            Ok(StepOutput {
                fit: r.norm_squared(),
                trivial_norms: Vec::new(),
            })
        }
    }
}

/// Minimum-norm solution of the unregularized least-squares fit.
fn least_squares_start(problem: &SparseProblem, k: usize) -> Result<DMatrix<f64>, SolverError> {
    let m = problem.m();
    let d = problem.template(k);
    let x = problem.observation(k);
    if problem.has_trivial() {
        // Z = Dᵀ(I + DDᵀ)⁻¹X = (I + DᵀD)⁻¹DᵀX, E = X − DZ.
        let mut normal = d.tr_mul(d);
        for i in 0..m {
            normal[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(normal).ok_or(SolverError::NotPositiveDefinite(k))?;
        let z = chol.solve(&d.tr_mul(x));
        let e = x - d * &z;
        let mut w = DMatrix::zeros(m + d.nrows(), x.ncols());
        w.rows_mut(0, m).copy_from(&z);
        w.rows_mut(m, d.nrows()).copy_from(&e);
        Ok(w)
    } else {
        let svd = SVD::new(d.clone(), true, true);
        let cutoff = svd.singular_values.max() * 1e-10;
        svd.solve(x, cutoff)
            .map_err(|e| SolverError::Parameter(format!("least-squares start failed: {e}")))
    }
}

fn all_finite(w: &[DMatrix<f64>]) -> bool {
    w.iter().all(|b| b.iter().all(|v| v.is_finite()))
}

/// Runs the reweighted iteration from the least-squares start until the
/// relative objective change drops below `config.tol` or `config.max_iters`
/// updates have been made.
pub fn solve(problem: &SparseProblem, config: &SolverConfig) -> Result<CoefficientSolution, SolverError> {
    config.validate()?;
    let mut w = (0..problem.modalities())
        .map(|k| least_squares_start(problem, k))
        .collect::<Result<Vec<_>, _>>()?;
    if !all_finite(&w) {
        return Err(SolverError::NonFinite("least-squares start".into()));
    }
    let mut norms = RowNorms::new(problem, &w);
    let initial_objective = fit_term(problem, &w) + norms.penalty(problem, |r| smoothed(r, config.epsilon));
    let mut prev = initial_objective;
    let mut trace = Vec::with_capacity(config.max_iters);

    for _ in 0..config.max_iters {
        let state = norms.weights(config.epsilon);
        let steps = w
            .par_iter_mut()
            .enumerate()
            .map(|(k, wk)| step_into(problem, &state, k, wk))
            .collect::<Result<Vec<_>, _>>()?;
        let mut fit = 0.0;
        let mut trivial = Vec::with_capacity(steps.len());
        for s in steps {
            fit += s.fit;
            if problem.has_trivial() {
                trivial.push(s.trivial_norms);
            }
        }
        norms = RowNorms::with_trivial(problem, &w, trivial);
        let obj = fit + norms.penalty(problem, |r| smoothed(r, config.epsilon));
        // any non-finite entry reaches the fit or a row norm
        if !obj.is_finite() {
            return Err(SolverError::NonFinite("iterate".into()));
        }
        trace.push(obj);
        let change = (prev - obj).abs() / prev.max(1e-12);
        prev = obj;
        if change < config.tol {
            break;
        }
    }

    Ok(CoefficientSolution {
        iterations: trace.len(),
        coefficients: w,
        objective_trace: trace,
        initial_objective,
    })
}

/// Self-representation `min_U ‖Y − YU‖²_F + λ3 ‖U‖_{2,1}` over unit-norm
/// columns of `y`; returns the `l × l` matrix `U`.
pub fn solve_self_representation(
    y: &DMatrix<f64>,
    lambda3: f64,
    config: &SolverConfig,
) -> Result<DMatrix<f64>, SolverError> {
    let problem = SparseProblem::builder(vec![y.clone()], vec![y.clone()])
        .trivial(false)
        .lambda1(lambda3)
        .lambda2(0.0)
        .build()?;
    let mut sol = solve(&problem, config)?;
    let mut u = sol.coefficients.swap_remove(0);
    consolidate_rows(&problem, &mut u);
    Ok(u)
}

/// Moves whole rows of `u` into other rows whenever that does not increase
/// the exact objective.
///
/// Merging row `j` into row `i` never raises the row-norm penalty (triangle
/// inequality) and leaves the fit unchanged when candidates `i` and `j` are
/// identical, so duplicated candidates end up sharing a single row. Rows are
/// visited weakest first; targets are tried strongest first, lower index
/// (newer candidate) winning ties.
fn consolidate_rows(problem: &SparseProblem, u: &mut DMatrix<f64>) {
    let l = u.nrows();
    if l < 2 {
        return;
    }
    let score = |u: &DMatrix<f64>| evaluate(problem, std::slice::from_ref(u), |r| r);
    let mut current = score(u);
    let mut order: Vec<usize> = (0..l).collect();
    let norms: Vec<f64> = (0..l).map(|i| u.row(i).norm()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    for &j in order.iter().rev() {
        if u.row(j).norm() == 0.0 {
            continue;
        }
        for &i in &order {
            if i == j || u.row(i).norm() == 0.0 {
                continue;
            }
            let mut trial = u.clone();
            let moved = trial.row(j).into_owned();
            let mut target = trial.row_mut(i);
            target += &moved;
            trial.row_mut(j).fill(0.0);
            let value = score(&trial);
            if value <= current + 1e-9 * current.abs().max(1e-12) {
                *u = trial;
                current = value;
                break;
            }
        }
    }
}

//! Test-only reference implementations, kept independent of the library's
//! solver path.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use trac::solver::{SparseProblem, TemporalTarget};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Dictionary columns are random unit vectors; observations mix a few
/// templates plus noise so that the fit is nontrivial.
pub fn random_blocks(
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    m: usize,
    n: usize,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let mut templates = Vec::new();
    let mut observations = Vec::new();
    let mix = gaussian_matrix(rng, m, n);
    for &d in dims {
        let dk = unit_columns(gaussian_matrix(rng, d, m));
        let noise = gaussian_matrix(rng, d, n) * 0.3;
        let xk = unit_columns(&dk * &mix + noise);
        templates.push(dk);
        observations.push(xk);
    }
    (templates, observations)
}

pub struct RandomShape {
    pub dims: Vec<usize>,
    pub m: usize,
    pub n: usize,
    pub temporal: usize,
}

pub fn random_shape(rng: &mut ChaCha8Rng, max_dim: usize, max_m: usize, max_n: usize, max_k: usize) -> RandomShape {
    let k = rng.gen_range(1..=max_k);
    RandomShape {
        dims: (0..k).map(|_| rng.gen_range(4..=max_dim)).collect(),
        m: rng.gen_range(2..=max_m),
        n: rng.gen_range(1..=max_n),
        temporal: rng.gen_range(0..=5),
    }
}

pub fn random_temporal(rng: &mut ChaCha8Rng, count: usize, k: usize, m: usize) -> Vec<TemporalTarget> {
    (0..count)
        .map(|_| TemporalTarget {
            coefficients: (0..k)
                .map(|_| DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.3))
                .collect(),
            excluded: rng.gen_bool(0.2),
        })
        .collect()
}

pub fn random_problem(
    rng: &mut ChaCha8Rng,
    shape: &RandomShape,
    lambda1: f64,
    lambda2: f64,
    alpha: f64,
) -> SparseProblem {
    let (t, x) = random_blocks(rng, &shape.dims, shape.m, shape.n);
    let temporal = random_temporal(rng, shape.temporal, shape.dims.len(), shape.m);
    SparseProblem::builder(t, x)
        .lambda1(lambda1)
        .lambda2(lambda2)
        .alpha(alpha)
        .temporal(temporal)
        .build()
        .unwrap()
}

/// Full dictionary `[D, I]` (or `D` alone).
pub fn full_dictionary(problem: &SparseProblem, k: usize) -> DMatrix<f64> {
    let d = problem.template(k);
    if !problem.has_trivial() {
        return d.clone();
    }
    let rows = d.nrows();
    let m = d.ncols();
    let mut b = DMatrix::zeros(rows, m + rows);
    b.columns_mut(0, m).copy_from(d);
    for i in 0..rows {
        b[(i, m + i)] = 1.0;
    }
    b
}

/// Gaussian elimination with partial pivoting, one right-hand side column at a time.
pub fn dense_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, b.ncols());
    for c in 0..b.ncols() {
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n).map(|j| a[(i, j)]).collect();
                row.push(b[(i, c)]);
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
                .unwrap();
            m.swap(col, pivot);
            for r in col + 1..n {
                let f = m[r][col] / m[col][col];
                if f != 0.0 {
                    for j in col..=n {
                        m[r][j] -= f * m[col][j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = m[i][n];
            for j in i + 1..n {
                s -= m[i][j] * out[(j, c)];
            }
            out[(i, c)] = s / m[i][i];
        }
    }
    out
}

fn power_iteration_sq(b: &DMatrix<f64>) -> f64 {
    let mut v = DVector::from_element(b.ncols(), 1.0);
    let mut est = 0.0;
    for _ in 0..2000 {
        let w = b.transpose() * (b * &v);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (norm - est).abs() < 1e-14 * norm {
            est = norm;
            break;
        }
        est = norm;
    }
    est
}

fn huber_prox_scale(norm: f64, step_lambda: f64, epsilon: f64) -> f64 {
    if norm == 0.0 {
        return 0.0;
    }
    if norm > epsilon + step_lambda {
        (norm - step_lambda) / norm
    } else {
        1.0 / (1.0 + step_lambda / epsilon)
    }
}

/// Evaluates the epsilon-smoothed objective directly from its definition,
/// using the explicit dictionary `[D, I]`.
pub fn reference_smoothed_objective(problem: &SparseProblem, w: &[DMatrix<f64>], epsilon: f64) -> f64 {
    let h = |r: f64| if r >= epsilon { r } else { r * r / (2.0 * epsilon) + epsilon / 2.0 };
    let m = problem.m();
    let mut total = 0.0;
    for (k, wk) in w.iter().enumerate() {
        let b = full_dictionary(problem, k);
        total += (&b * wk - problem.observation(k)).norm_squared();
    }
    for i in 0..m {
        let sq: f64 = w.iter().map(|wk| wk.row(i).norm_squared()).sum();
        total += problem.lambda1() * h(sq.sqrt());
    }
    if problem.has_trivial() {
        for wk in w {
            for r in m..wk.nrows() {
                total += problem.lambda1() * h(wk.row(r).norm());
            }
        }
    }
    for (lag, t) in problem.temporal().iter().enumerate() {
        if t.excluded {
            continue;
        }
        let decay = problem.alpha().powi(lag as i32 + 1);
        for i in 0..m {
            let mut sq = 0.0;
            for (wk, ck) in w.iter().zip(&t.coefficients) {
                for j in 0..wk.ncols() {
                    sq += (wk[(i, j)] - ck[i]).powi(2);
                }
            }
            total += problem.lambda2() * decay * h(sq.sqrt());
        }
    }
    total
}

/// FISTA with adaptive restart on the smoothed objective (no temporal
/// term). The smoothed group penalty has a closed-form prox, so iterates are
/// exact up to the stopping rule: stop once `L·max|ΔW| < tol`.
pub fn proximal_gradient_oracle(
    problem: &SparseProblem,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> (Vec<DMatrix<f64>>, f64) {
    assert!(
        problem.lambda2() == 0.0 || problem.temporal().iter().all(|t| t.excluded),
        "oracle handles the sparsity term only"
    );
    let k_count = problem.modalities();
    let m = problem.m();
    let dicts: Vec<DMatrix<f64>> = (0..k_count).map(|k| full_dictionary(problem, k)).collect();
    let lipschitz = 2.0 * dicts.iter().map(power_iteration_sq).fold(0.0, f64::max);
    let step = 1.0 / lipschitz;
    let tl = step * problem.lambda1();

    let mut w: Vec<DMatrix<f64>> = dicts
        .iter()
        .zip(0..k_count)
        .map(|(b, k)| DMatrix::zeros(b.ncols(), problem.observation(k).ncols()))
        .collect();
    let mut y = w.clone();
    let mut t = 1.0f64;
    let mut prev_obj = reference_smoothed_objective(problem, &w, epsilon);

    for _ in 0..max_iters {
        let mut next: Vec<DMatrix<f64>> = y
            .iter()
            .zip(&dicts)
            .enumerate()
            .map(|(k, (yk, b))| {
                let grad = b.transpose() * (b * yk - problem.observation(k)) * 2.0;
                yk - grad * step
            })
            .collect();
        for i in 0..m {
            let norm = next.iter().map(|v| v.row(i).norm_squared()).sum::<f64>().sqrt();
            let s = huber_prox_scale(norm, tl, epsilon);
            for v in next.iter_mut() {
                let mut row = v.row_mut(i);
                row *= s;
            }
        }
        if problem.has_trivial() {
            for v in next.iter_mut() {
                for r in m..v.nrows() {
                    let s = huber_prox_scale(v.row(r).norm(), tl, epsilon);
                    let mut row = v.row_mut(r);
                    row *= s;
                }
            }
        }
        let obj = reference_smoothed_objective(problem, &next, epsilon);
        let delta = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        if obj > prev_obj {
            // restart momentum
            t = 1.0;
            y = w.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        y = next
            .iter()
            .zip(&w)
            .map(|(a, b)| a + (a - b) * beta)
            .collect();
        t = t_next;
        w = next;
        prev_obj = obj;
        if delta * lipschitz < tol {
            break;
        }
    }
    (w, prev_obj)
}

//! Euclidean projection onto `{u : A_i + B_i^T u <= -margin}` and the min-norm
//! QP controller.
//!
//! Solved with the Goldfarb-Idnani dual active-set method specialized to an
//! identity Hessian: start from the unconstrained minimizer `v` and add the
//! most violated constraint until none is violated, dropping constraints whose
//! multiplier would turn negative. The equality-constrained subproblems are
//! solved through a Cholesky factorization of the Gram matrix of the active
//! normals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::params::ConstraintParams;

/// Working set and multipliers at termination.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActiveSetState {
    pub working_set: Vec<usize>,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub active: ActiveSetState,
    pub iterations: usize,
}

/// `argmin |u|^2` subject to `A_i + B_i^T u <= 0`.
pub fn solve_min_norm_qp(p: &ConstraintParams) -> Result<DVector<f64>> {
    project_onto_polytope(p, &DVector::zeros(p.input_dim()), 0.0)
}

/// `argmin |u - v|^2` subject to `A_i + B_i^T u <= -margin`.
pub fn project_onto_polytope(p: &ConstraintParams, v: &DVector<f64>, margin: f64) -> Result<DVector<f64>> {
    Ok(project_with_state(p, v, margin)?.u)
}

pub fn project_with_state(p: &ConstraintParams, v: &DVector<f64>, margin: f64) -> Result<QpSolution> {
    p.check_input(v)?;
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::contract(format!("margin must be nonnegative, got {margin}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projection target".into()));
    }

    // Constraints in the form n_i^T u >= c_i with n_i = -B_i, c_i = A_i + margin.
    let mut rows = Vec::with_capacity(p.n_constraints());
    for i in 0..p.n_constraints() {
        let bi = p.normal(i);
        let ci = p.offsets()[i] + margin;
        if bi.iter().all(|x| *x == 0.0) {
            if ci > 0.0 {
                return Err(Error::Infeasible { max_margin: ci });
            }
            continue;
        }
        rows.push(Row { index: i, normal: -bi, offset: ci });
    }

    let m = p.input_dim();
    let mut u = v.clone();
    let mut active: Vec<usize> = Vec::new(); // positions into `rows`
    let mut lambda: Vec<f64> = Vec::new();
    let max_iter = 50 * (rows.len() + m + 1);
    let mut iterations = 0;

    while let Some(target) = most_violated(&rows, &u, &active) {
        let mut lambda_target = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::contract("active-set iteration did not terminate"));
            }
            let normal = &rows[target].normal;
            let (z, r) = directions(&rows, &active, normal)?;
            let slack = rows[target].slack(&u);

            // largest dual step before an active multiplier reaches zero
            let mut dual_step = f64::INFINITY;
            let mut blocking = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 0.0 {
                    let t = lambda[j] / rj;
                    if t < dual_step {
                        dual_step = t;
                        blocking = Some(j);
                    }
                }
            }
            let z2 = z.norm_squared();
            let primal_step = if z2 > 1e-24 * normal.norm_squared() {
                -slack / z2
            } else {
                f64::INFINITY
            };
            let step = dual_step.min(primal_step);
            if step.is_infinite() {
                return Err(Error::Infeasible { max_margin: -slack });
            }

            if primal_step.is_finite() {
                u.axpy(step, &z, 1.0);
            }
            for (lj, rj) in lambda.iter_mut().zip(r.iter()) {
                *lj -= step * rj;
            }
            lambda_target += step;

            if primal_step <= dual_step {
                active.push(target);
                lambda.push(lambda_target);
                break;
            }
            let drop = blocking.expect("finite dual step has a blocking constraint");
            active.remove(drop);
            lambda.remove(drop);
        }
    }

    let mut pairs: Vec<(usize, f64)> = active
        .iter()
        .zip(lambda.iter())
        .map(|(&pos, &l)| (rows[pos].index, l.max(0.0)))
        .collect();
    pairs.sort_by_key(|(i, _)| *i);
    Ok(QpSolution {
        u,
        active: ActiveSetState {
            working_set: pairs.iter().map(|(i, _)| *i).collect(),
            multipliers: pairs.iter().map(|(_, l)| *l).collect(),
        },
        iterations,
    })
}

struct Row {
    index: usize,
    normal: DVector<f64>,
    offset: f64,
}

impl Row {
    /// `n^T u - c`; negative when violated.
    fn slack(&self, u: &DVector<f64>) -> f64 {
        self.normal.dot(u) - self.offset
    }

    fn tolerance(&self, u: &DVector<f64>) -> f64 {
        1e-12 * (1.0 + self.offset.abs() + self.normal.norm() * u.norm())
    }
}

/// Most violated inactive row; ties go to the lowest index.
fn most_violated(rows: &[Row], u: &DVector<f64>, active: &[usize]) -> Option<usize> {
    let mut worst: Option<(usize, f64)> = None;
    for (pos, row) in rows.iter().enumerate() {
        if active.contains(&pos) {
            continue;
        }
        let slack = row.slack(u);
        if slack < -row.tolerance(u) && worst.is_none_or(|(_, w)| slack < w) {
            worst = Some((pos, slack));
        }
    }
    worst.map(|(pos, _)| pos)
}

/// Primal direction `z` (component of `normal` orthogonal to the active
/// normals) and dual direction `r` (its coefficients in the active normals).
fn directions(rows: &[Row], active: &[usize], normal: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if active.is_empty() {
        return Ok((normal.clone(), DVector::zeros(0)));
    }
    let m = normal.len();
    let basis = DMatrix::from_fn(m, active.len(), |d, j| rows[active[j]].normal[d]);
    let gram = basis.tr_mul(&basis);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::contract("active normals became linearly dependent"))?;
    let r = chol.solve(&basis.tr_mul(normal));
    let z = normal - &basis * &r;
    Ok((z, r))
}

//! Minimizers of `J_p` / `J~_q`.
//!
//! [`solve_exact`] is a damped Newton method kept strictly inside the polytope
//! by a fraction-to-boundary cap and globalized with Armijo backtracking.
//! [`solve_gradient_flow`] integrates `k' = -grad J(k)` with an adaptive
//! Dormand-Prince 5(4) scheme. [`closed_form_1d`] is the single-constraint,
//! single-input formula.

mod flow;

use nalgebra::{DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Evaluation, Objective};
use crate::params::{find_interior_point, row_normalized, scale_params, ConstraintParams, ScaledParams, DEFAULT_FEAS_BUDGET, DEFAULT_FEAS_TOL};
use crate::qp::project_onto_polytope;
use crate::sim::ControlProblem;

pub use flow::{solve_gradient_flow, solve_gradient_flow_with, FlowOptions, DEFAULT_FLOW_TOL};

/// Margin used when pulling an exterior warmstart into the polytope, in units
/// of the row-normalized constraints.
pub const WARMSTART_MARGIN: f64 = 1e-3;
const CENTERING_STEPS: usize = 5;
const MAX_CONDITION: f64 = 1e12;
const MAX_BACKTRACKS: usize = 60;
const STEP_RESOLUTION: f64 = 4.0 * f64::EPSILON;
const POLISH_STEP: f64 = 1e-13;
const GRADIENT_NOISE: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// `|grad| <= grad_tol`, or the gradient reached its rounding floor.
    Converged,
    MaxIter,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub k_star: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    /// Centering, Newton and fallback gradient steps (or accepted ODE steps
    /// for the gradient flow).
    pub iterations: usize,
    pub status: SolveStatus,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub boundary_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iter: 100,
            armijo: 1e-4,
            boundary_fraction: 0.99,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_tol > 0.0
            && self.max_iter > 0
            && self.armijo > 0.0
            && self.boundary_fraction > 0.0
            && self.boundary_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid solver options {self:?}")))
        }
    }
}

/// Minimizer of `J_p`.
pub fn solve(p: &ConstraintParams, opts: &SolverOptions, warmstart: Option<&DVector<f64>>) -> Result<SolveResult> {
    solve_exact(Objective::unscaled(p), opts, warmstart)
}

/// Minimizer of `J~_q`.
pub fn solve_scaled(q: &ScaledParams, opts: &SolverOptions, warmstart: Option<&DVector<f64>>) -> Result<SolveResult> {
    solve_exact(Objective::scaled(q), opts, warmstart)
}

/// `u*(x)`: the minimizer for the constraints of `problem` at state `x`.
///
/// Newton runs on the scaled constraints `q(p(x))`, whose minimizer is the
/// same; the scaled objective keeps the Hessian well conditioned when the
/// constraint data is large.
pub fn u_star(
    problem: &ControlProblem,
    x: &DVector<f64>,
    opts: &SolverOptions,
    warmstart: Option<&DVector<f64>>,
) -> Result<SolveResult> {
    let p = problem.constraints(x)?;
    let (q, _) = scale_params(&p);
    // Near the origin the scaled minimizer can sit inside the domain guard
    // while the unscaled one, with margins M times larger, does not.
    match solve_scaled(&q, opts, warmstart) {
        Ok(res) if res.converged() => Ok(res),
        Ok(res) => match solve(&p, opts, warmstart) {
            Ok(unscaled) if unscaled.converged() => Ok(unscaled),
            _ => Ok(res),
        },
        Err(Error::OutsideDomain { .. }) => solve(&p, opts, warmstart),
        Err(err) => Err(err),
    }
}

/// Damped Newton on `objective`.
///
/// Without a warmstart the iteration starts at a feasibility certificate
/// followed by a short gradient centering pass. A warmstart that is not
/// strictly interior is first projected onto the polytope tightened by
/// [`WARMSTART_MARGIN`], with rows normalized to unit length.
pub fn solve_exact(
    objective: Objective<'_>,
    opts: &SolverOptions,
    warmstart: Option<&DVector<f64>>,
) -> Result<SolveResult> {
    opts.validate()?;
    let p = objective.params();
    if is_degenerate(&objective) {
        return degenerate_result(&objective);
    }

    let mut iterations = 0;
    let mut k = match warmstart.map(|w| interiorize(p, w)).transpose()?.flatten() {
        Some(k) => k,
        None => {
            let cert = find_interior_point(p, DEFAULT_FEAS_BUDGET)?;
            let mut k = cert.interior_point;
            for _ in 0..CENTERING_STEPS {
                let eval = objective.evaluate(&k, false)?;
                if eval.gradient.norm() <= opts.grad_tol {
                    break;
                }
                let direction = -&eval.gradient;
                match line_search(&objective, &k, &eval, &direction, opts) {
                    Some(next) => {
                        k = next;
                        iterations += 1;
                    }
                    None => break,
                }
            }
            k
        }
    };

    let mut eval = objective.evaluate(&k, true)?;
    loop {
        let grad_norm = eval.gradient.norm();
        let direction = newton_direction(&eval);
        let step_norm = direction.norm();
        let scale = 1.0 + k.norm();
        // Rounding k perturbs the gradient by about eps |H| |k|; below that
        // floor, or once the correction is lost in the rounding of k, no
        // further progress is measurable.
        let hess_norm = eval.hessian.as_ref().map_or(0.0, |h| h.norm());
        let floor = GRADIENT_NOISE * f64::EPSILON * hess_norm * scale;
        let resolved = step_norm <= STEP_RESOLUTION * scale || grad_norm <= floor;
        let polished = grad_norm <= opts.grad_tol && step_norm <= POLISH_STEP * scale;
        if resolved || polished || iterations >= opts.max_iter {
            let status = if resolved || grad_norm <= opts.grad_tol {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIter
            };
            return Ok(finished(k, &eval, iterations, status));
        }

        let next = roundoff_step(&objective, &k, &eval, &direction, opts)
            .or_else(|| line_search(&objective, &k, &eval, &direction, opts));
        match next {
            Some(next) => {
                k = next;
                eval = objective.evaluate(&k, true)?;
                iterations += 1;
            }
            None => {
                let status = if grad_norm <= opts.grad_tol {
                    SolveStatus::Converged
                } else {
                    SolveStatus::MaxIter
                };
                return Ok(finished(k, &eval, iterations, status));
            }
        }
    }
}

fn finished(k: DVector<f64>, eval: &Evaluation, iterations: usize, status: SolveStatus) -> SolveResult {
    SolveResult {
        objective: eval.value,
        grad_norm: eval.gradient.norm(),
        k_star: k,
        iterations,
        status,
    }
}

/// `r = 0` with normals that do not span the input space.
fn is_degenerate(objective: &Objective<'_>) -> bool {
    if objective.r() > 0.0 {
        return false;
    }
    let b = objective.params().normals();
    let m = b.ncols();
    if b.nrows() < m {
        return true;
    }
    let svd = SVD::new(b.clone(), false, false);
    let top = svd.singular_values.max();
    svd.rank(1e-12 * top.max(f64::MIN_POSITIVE)) < m
}

fn degenerate_result(objective: &Objective<'_>) -> Result<SolveResult> {
    let cert = find_interior_point(objective.params(), DEFAULT_FEAS_BUDGET)?;
    let eval = objective.evaluate(&cert.interior_point, false)?;
    Ok(SolveResult {
        k_star: cert.interior_point,
        objective: eval.value,
        grad_norm: eval.gradient.norm(),
        iterations: 0,
        status: SolveStatus::Degenerate,
    })
}

/// Returns the warmstart if strictly interior, its projection onto the
/// tightened polytope otherwise, or `None` if the tightened set is empty.
pub(crate) fn interiorize(p: &ConstraintParams, warm: &DVector<f64>) -> Result<Option<DVector<f64>>> {
    if warm.len() != p.input_dim() {
        return Err(Error::contract(format!(
            "warmstart has length {}, expected {}",
            warm.len(),
            p.input_dim()
        )));
    }
    let q = row_normalized(p);
    if warm.iter().all(|v| v.is_finite()) && q.max_margin(warm)? < -DEFAULT_FEAS_TOL {
        return Ok(Some(warm.clone()));
    }
    let start = if warm.iter().all(|v| v.is_finite()) {
        warm.clone()
    } else {
        DVector::zeros(p.input_dim())
    };
    match project_onto_polytope(&q, &start, WARMSTART_MARGIN) {
        Ok(k) if p.max_margin(&k)? < -DEFAULT_FEAS_TOL => Ok(Some(k)),
        Ok(_) => Ok(None),
        Err(err) if err.is_infeasible() => Ok(None),
        Err(err) => Err(err),
    }
}

fn newton_direction(eval: &Evaluation) -> DVector<f64> {
    let hess = eval.hessian.as_ref().expect("newton needs the hessian");
    if let Some(chol) = hess.clone().cholesky() {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        let condition = (hi / lo).powi(2);
        if lo > 0.0 && condition <= MAX_CONDITION {
            return -chol.solve(&eval.gradient);
        }
    }
    -&eval.gradient
}

/// Largest step in `direction` that keeps every margin at least
/// `(1 - boundary_fraction)` of its current value.
fn boundary_cap(p: &ConstraintParams, margins: &DVector<f64>, direction: &DVector<f64>, fraction: f64) -> f64 {
    let rates = p.normals() * direction;
    margins
        .iter()
        .zip(rates.iter())
        .filter(|(_, rate)| **rate > 0.0)
        .map(|(s, rate)| fraction * (-s) / rate)
        .fold(f64::INFINITY, f64::min)
}

/// Fraction-to-boundary cap, then Armijo backtracking on `J`.
fn line_search(
    objective: &Objective<'_>,
    k: &DVector<f64>,
    eval: &Evaluation,
    direction: &DVector<f64>,
    opts: &SolverOptions,
) -> Option<DVector<f64>> {
    let slope = eval.gradient.dot(direction);
    if !(slope < 0.0) {
        return None;
    }
    let mut step = boundary_cap(objective.params(), &eval.margins, direction, opts.boundary_fraction).min(1.0);
    for _ in 0..MAX_BACKTRACKS {
        let trial = k + direction * step;
        if let Ok(value) = objective.value(&trial) {
            if value <= eval.value + opts.armijo * step * slope && value < eval.value {
                return Some(trial);
            }
        }
        step *= 0.5;
    }
    None
}

/// Near the minimizer the decrease in `J` drops below its rounding error and
/// backtracking would chase noise; take the capped step there if it reduces
/// the gradient norm.
fn roundoff_step(
    objective: &Objective<'_>,
    k: &DVector<f64>,
    eval: &Evaluation,
    direction: &DVector<f64>,
    opts: &SolverOptions,
) -> Option<DVector<f64>> {
    let decrement = -eval.gradient.dot(direction);
    if !(decrement <= 1e-12 * (1.0 + eval.value.abs())) {
        return None;
    }
    let step = boundary_cap(objective.params(), &eval.margins, direction, opts.boundary_fraction).min(1.0);
    let trial = k + direction * step;
    let next = objective.evaluate(&trial, false).ok()?;
    let tolerance = 1e-12 * (1.0 + eval.value.abs());
    (next.gradient.norm() < eval.gradient.norm() && next.value <= eval.value + tolerance).then_some(trial)
}

/// Closed-form minimizer for one constraint on a scalar input:
/// `-(A + sqrt(A^2 + B^4)) / B` for `B != 0`, and `0` otherwise.
pub fn closed_form_1d(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("closed-form arguments".into()));
    }
    if b == 0.0 {
        return if a < 0.0 {
            Ok(0.0)
        } else {
            Err(Error::Infeasible { max_margin: a })
        };
    }
    let root = a.hypot(b * b);
    if a <= 0.0 {
        // A + sqrt(A^2 + B^4) = B^4 / (sqrt(A^2 + B^4) - A), avoids cancellation
        Ok(-b * b * b / (root - a))
    } else {
        Ok(-(a + root) / b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::eval_j;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(a: &[f64], b: &[&[f64]]) -> ConstraintParams {
        let rows: Vec<Vec<f64>> = b.iter().map(|r| r.to_vec()).collect();
        ConstraintParams::from_rows(a, &rows).unwrap()
    }

    fn random_feasible(rng: &mut ChaCha8Rng, n: usize, m: usize) -> ConstraintParams {
        let k = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-4.0..4.0));
        let depth = DVector::from_fn(n, |_, _| rng.random_range(0.05..5.0));
        ConstraintParams::new(-depth - &b * &k, b).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(closed_form_1d(-1.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(closed_form_1d(0.0, 1.0).unwrap(), -1.0);
        assert_relative_eq!(closed_form_1d(-1.0, 1.0).unwrap(), 1.0 - 2f64.sqrt(), epsilon = 1e-15);
        assert!(closed_form_1d(0.0, 0.0).is_err());
        assert!(closed_form_1d(2.0, 0.0).is_err());
    }

    #[test]
    fn closed_form_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = rng.random_range(-10.0..10.0);
            let b: f64 = rng.random_range(-10.0..10.0);
            let k = closed_form_1d(a, b).unwrap();
            let p = params(&[a], &[&[b]]);
            let g = Objective::unscaled(&p).gradient(&DVector::from_element(1, k)).unwrap()[0];
            let h = Objective::unscaled(&p).hessian(&DVector::from_element(1, k)).unwrap()[(0, 0)];
            assert!(g.abs() / h < 1e-9 * (1.0 + k.abs()), "a={a} b={b} g={g}");
        }
    }

    #[test]
    fn solve_examples() {
        let opts = SolverOptions::default();
        let p = params(&[-1.0], &[&[1.0]]);
        let res = solve(&p, &opts, None).unwrap();
        assert!(res.converged());
        assert_relative_eq!(res.k_star[0], 1.0 - 2f64.sqrt(), epsilon = 1e-10);

        let p = params(&[-1.0, -1.0], &[&[1.0], &[-1.0]]);
        let res = solve(&p, &opts, None).unwrap();
        assert!(res.k_star[0].abs() < 1e-10);
        assert_relative_eq!(res.objective, 1.0, epsilon = 1e-12);

        let p = params(&[-1.0, -1.0], &[&[1.0, 0.0], &[-1.0, 0.0]]);
        let res = solve(&p, &opts, None).unwrap();
        assert!(res.k_star.norm() < 1e-10);
    }

    #[test]
    fn infeasible_is_an_error() {
        let p = params(&[1.0, 1.0], &[&[1.0], &[-1.0]]);
        let err = solve(&p, &SolverOptions::default(), None).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }));
    }

    #[test]
    fn rank_deficient_r_zero_is_degenerate() {
        let p = params(&[-0.5, -0.5], &[&[1.0, 0.0], &[-1.0, 0.0]]);
        let q = ScaledParams::new(p, 0.0).unwrap();
        let res = solve_scaled(&q, &SolverOptions::default(), None).unwrap();
        assert_eq!(res.status, SolveStatus::Degenerate);
    }

    #[test]
    fn exterior_warmstart_is_interiorized() {
        let p = params(&[-1.0, -1.0], &[&[1.0], &[-1.0]]);
        for w in [5.0, -3.0, 1.0, f64::NAN] {
            let res = solve(&p, &SolverOptions::default(), Some(&DVector::from_element(1, w))).unwrap();
            assert!(res.converged());
            assert!(res.k_star[0].abs() < 1e-10);
        }
        assert!(solve(&p, &SolverOptions::default(), Some(&DVector::zeros(2))).is_err());
    }

    #[test]
    fn invalid_options_are_rejected() {
        let p = params(&[-1.0], &[&[1.0]]);
        let opts = SolverOptions {
            boundary_fraction: 1.0,
            ..SolverOptions::default()
        };
        assert!(solve(&p, &opts, None).is_err());
    }

    #[test]
    fn minimizer_is_unique_across_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let opts = SolverOptions::default();
        for (n, m) in [(2, 2), (5, 3), (10, 10), (3, 1)] {
            for _ in 0..20 {
                let p = random_feasible(&mut rng, n, m);
                let reference = solve(&p, &opts, None).unwrap();
                assert!(reference.converged(), "{reference:?}");
                for _ in 0..5 {
                    let start = DVector::from_fn(m, |_, _| rng.random_range(-6.0..6.0));
                    let res = solve(&p, &opts, Some(&start)).unwrap();
                    assert!(res.converged(), "{res:?} {reference:?}");
                    assert!((&res.k_star - &reference.k_star).norm() < 1e-6);
                    assert!(p.max_margin(&res.k_star).unwrap() < 0.0);
                }
            }
        }
    }

    #[test]
    fn scaled_and_unscaled_minimizers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let opts = SolverOptions::default();
        for _ in 0..100 {
            let mut p = random_feasible(&mut rng, 3, 2);
            p = p.divided_by(0.1);
            let (q, _) = scale_params(&p);
            let a = solve(&p, &opts, None).unwrap();
            let b = solve_scaled(&q, &opts, None).unwrap();
            assert!(a.converged() && b.converged());
            assert!((&a.k_star - &b.k_star).norm() < 1e-8);
        }
    }

    #[test]
    fn accepted_steps_decrease_objective() {
        // Re-running with max_iter = t gives the t-th iterate.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let p = random_feasible(&mut rng, 4, 2);
            let mut previous = f64::INFINITY;
            for max_iter in 1..12 {
                let opts = SolverOptions {
                    max_iter,
                    ..SolverOptions::default()
                };
                let res = solve(&p, &opts, None).unwrap();
                let value = eval_j(&p, &res.k_star).unwrap();
                assert!(value <= previous + 1e-12 * value.abs());
                previous = value;
            }
        }
    }

    #[test]
    fn minimizer_varies_smoothly_along_a_segment() {
        // every point of the segment contains `center` at depth >= 0.2
        let b0 = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, -0.5, 1.0, 0.2, -1.0]);
        let b1 = DMatrix::from_row_slice(3, 2, &[0.8, -0.4, -1.0, 0.6, 0.1, -0.7]);
        let d0 = DVector::from_vec(vec![1.0, 0.2, 0.5]);
        let d1 = DVector::from_vec(vec![0.3, 1.5, 0.8]);
        let center = DVector::from_vec(vec![0.4, -0.3]);
        let opts = SolverOptions::default();
        let samples: Vec<DVector<f64>> = (0..100)
            .map(|i| {
                let t = i as f64 / 99.0;
                let b = &b0 * (1.0 - t) + &b1 * t;
                let a = -(&d0 * (1.0 - t) + &d1 * t) - &b * &center;
                let p = ConstraintParams::new(a, b).unwrap();
                solve(&p, &opts, None).unwrap().k_star
            })
            .collect();
        let second: Vec<f64> = samples
            .windows(3)
            .map(|w| (&w[0] - &w[1] * 2.0 + &w[2]).norm())
            .collect();
        for (i, d) in second.iter().enumerate() {
            let lo = i.saturating_sub(5);
            let hi = (i + 6).min(second.len());
            let mut local: Vec<f64> = second[lo..hi].to_vec();
            local.sort_by(|a, b| a.total_cmp(b));
            let trend = local[local.len() / 2];
            assert!(*d <= 10.0 * trend + 1e-9, "jump at {i}: {d} vs {trend}");
        }
    }

    #[test]
    fn u_star_matches_closed_form_for_one_clf() {
        use crate::sim::{clf_constraint, ControlAffineSystem, ControlProblem, ScalarField};
        use std::sync::Arc;
        let system = ControlAffineSystem::single_integrator(1);
        let sys = system.clone();
        let map = Arc::new(move |x: &DVector<f64>| {
            let (a, b) = clf_constraint(&ScalarField::half_squared_norm(), |x| 0.1 * x.norm_squared(), &sys, x)?;
            ConstraintParams::new(DVector::from_element(1, a), DMatrix::from_element(1, 1, b[0]))
        });
        let problem = ControlProblem::new("clf", system, map, ScalarField::half_squared_norm(), vec![]);
        for x in [-3.0, -0.2, 0.5, 4.0] {
            let state = DVector::from_element(1, x);
            let u = u_star(&problem, &state, &SolverOptions::default(), None).unwrap();
            let expected = closed_form_1d(0.1 * x * x, x).unwrap();
            assert_relative_eq!(u.k_star[0], expected, max_relative = 1e-9);
        }
    }

    #[test]
    fn u_star_is_zero_without_input_coupling() {
        use crate::sim::{ControlAffineSystem, ControlProblem, ScalarField};
        use std::sync::Arc;
        let map = Arc::new(|_: &DVector<f64>| ConstraintParams::new(DVector::from_vec(vec![-1.0, -2.0]), DMatrix::zeros(2, 2)));
        let problem = ControlProblem::new(
            "uncoupled",
            ControlAffineSystem::single_integrator(2),
            map,
            ScalarField::half_squared_norm(),
            vec![],
        );
        let u = u_star(&problem, &DVector::from_vec(vec![1.0, 2.0]), &SolverOptions::default(), None).unwrap();
        assert!(u.k_star.norm() < 1e-12);
    }

    #[test]
    fn u_star_near_origin_matches_unscaled_solve() {
        use crate::sim::{make_example_1, Example1};
        let problem = make_example_1(Example1::TwoD, None, 0).unwrap();
        for x in [[1.3e-201, -1.59e-6], [2e-6, 1e-6], [-4.75e-6, 0.0]] {
            let x = DVector::from_column_slice(&x);
            let p = problem.constraints(&x).unwrap();
            let exact = solve(&p, &SolverOptions::default(), None).unwrap();
            for warm in [None, Some(x.scale(-0.4))] {
                let res = u_star(&problem, &x, &SolverOptions::default(), warm.as_ref()).unwrap();
                assert!(res.converged(), "{res:?}");
                assert!((&res.k_star - &exact.k_star).norm() <= 1e-6 * exact.k_star.norm(), "{res:?} {exact:?}");
            }
        }
    }

    #[test]
    fn ill_conditioned_unscaled_solve_converges() {
        let p = ConstraintParams::from_rows(
            &[2.10625, -16834.285400390625],
            &[vec![-4.0, 2.25], vec![15945.09375, -8931.501953125]],
        )
        .unwrap();
        let res = solve(&p, &SolverOptions::default(), None).unwrap();
        assert!(res.converged(), "{res:?}");
        let (q, _) = scale_params(&p);
        let scaled = solve_scaled(&q, &SolverOptions::default(), None).unwrap();
        assert!((&res.k_star - &scaled.k_star).norm() <= 1e-8 * (1.0 + res.k_star.norm()));
    }
}

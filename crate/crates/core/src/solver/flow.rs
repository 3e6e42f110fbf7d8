use nalgebra::DVector;

use super::{degenerate_result, interiorize, is_degenerate, SolveResult, SolveStatus};
use crate::error::Result;
use crate::objective::Objective;
use crate::params::{find_interior_point, DEFAULT_FEAS_BUDGET};

/// Gradient-norm tolerance used for dataset labels.
pub const DEFAULT_FLOW_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    /// Stop once `|grad J| <= tol`.
    pub tol: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub min_step: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_FLOW_TOL,
            rtol: 1e-9,
            atol: 1e-12,
            max_steps: 2_000_000,
            min_step: 1e-14,
        }
    }
}

// Dormand-Prince 5(4) tableau; the flow is autonomous so the nodes are unused.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `k' = -grad J(k)` until `|grad J| <= tol`.
pub fn solve_gradient_flow(
    objective: Objective<'_>,
    tol: f64,
    warmstart: Option<&DVector<f64>>,
) -> Result<SolveResult> {
    solve_gradient_flow_with(
        objective,
        &FlowOptions {
            tol,
            ..FlowOptions::default()
        },
        warmstart,
    )
}

pub fn solve_gradient_flow_with(
    objective: Objective<'_>,
    opts: &FlowOptions,
    warmstart: Option<&DVector<f64>>,
) -> Result<SolveResult> {
    let p = objective.params();
    if is_degenerate(&objective) {
        return degenerate_result(&objective);
    }
    let mut k = match warmstart.map(|w| interiorize(p, w)).transpose()?.flatten() {
        Some(k) => k,
        None => find_interior_point(p, DEFAULT_FEAS_BUDGET)?.interior_point,
    };

    let rhs = |y: &DVector<f64>| objective.gradient(y).map(|g| -g).ok();
    let mut slope = -objective.gradient(&k)?;
    let mut h = (0.01 * (1.0 + k.norm()) / slope.norm().max(1e-300)).min(1.0);
    let mut steps = 0;
    let mut stages: Vec<DVector<f64>> = Vec::with_capacity(7);

    while slope.norm() > opts.tol {
        if steps >= opts.max_steps || h < opts.min_step {
            return finish(&objective, k, steps, SolveStatus::MaxIter);
        }
        stages.clear();
        stages.push(slope.clone());
        let mut y_new = None;
        let mut y_prev = None;
        for s in 1..7 {
            let mut y = k.clone();
            for (j, kj) in stages.iter().enumerate() {
                if A[s][j] != 0.0 {
                    y.axpy(h * A[s][j], kj, 1.0);
                }
            }
            match rhs(&y) {
                Some(f) => stages.push(f),
                None => break,
            }
            if s == 6 {
                y_new = Some(y);
            } else if s == 5 {
                y_prev = Some(y);
            }
        }
        let Some(y_new) = y_new.filter(|_| stages.len() == 7) else {
            // a stage left the polytope
            h *= 0.25;
            continue;
        };

        // Near the minimizer a position error e moves the gradient by up to
        // lambda * e, so the stiff mode must be resolved below tol / lambda.
        let y_prev = y_prev.expect("six stages");
        let spread = (&y_new - &y_prev).norm();
        let lambda = if spread > 0.0 { (&stages[6] - &stages[5]).norm() / spread } else { 0.0 };
        let floor = if lambda > 0.0 { 0.1 * opts.tol / lambda } else { f64::INFINITY };

        let mut err = 0.0;
        for d in 0..k.len() {
            let delta: f64 = (0..7).map(|s| E[s] * stages[s][d]).sum::<f64>() * h;
            let magnitude = k[d].abs().max(y_new[d].abs());
            let scale = (opts.atol + opts.rtol * magnitude).min(floor.max(4.0 * f64::EPSILON * magnitude));
            err += (delta / scale).powi(2);
        }
        err = (err / k.len() as f64).sqrt();

        if err <= 1.0 {
            k = y_new;
            slope = stages.pop().expect("seven stages");
            steps += 1;
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= grow;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    finish(&objective, k, steps, SolveStatus::Converged)
}

fn finish(objective: &Objective<'_>, k: DVector<f64>, steps: usize, status: SolveStatus) -> Result<SolveResult> {
    let eval = objective.evaluate(&k, false)?;
    Ok(SolveResult {
        objective: eval.value,
        grad_norm: eval.gradient.norm(),
        k_star: k,
        iterations: steps,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ConstraintParams, ScaledParams};
    use crate::solver::{solve, solve_scaled, SolverOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(a: &[f64], b: &[&[f64]]) -> ConstraintParams {
        let rows: Vec<Vec<f64>> = b.iter().map(|r| r.to_vec()).collect();
        ConstraintParams::from_rows(a, &rows).unwrap()
    }

    #[test]
    fn flow_matches_newton_on_examples() {
        let cases = [
            params(&[-1.0], &[&[1.0]]),
            params(&[-1.0, -1.0], &[&[1.0], &[-1.0]]),
            params(&[-1.0, -1.0], &[&[1.0, 0.0], &[-1.0, 0.0]]),
            params(&[-1.0], &[&[0.0]]),
        ];
        for p in &cases {
            let flow = solve_gradient_flow(Objective::unscaled(p), DEFAULT_FLOW_TOL, None).unwrap();
            let newton = solve(p, &SolverOptions::default(), None).unwrap();
            assert_eq!(flow.status, SolveStatus::Converged);
            assert!(flow.grad_norm <= DEFAULT_FLOW_TOL);
            assert!((&flow.k_star - &newton.k_star).norm() <= 1e-4);
        }
    }

    #[test]
    fn pure_quadratic_flows_to_origin() {
        let p = params(&[-1.0], &[&[0.0, 0.0]]);
        let start = DVector::from_vec(vec![2.0, -1.0]);
        let res = solve_gradient_flow(Objective::unscaled(&p), 1e-8, Some(&start)).unwrap();
        assert!(res.k_star.norm() < 1e-7);
    }

    #[test]
    fn flow_stays_interior_on_training_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut done = 0;
        while done < 200 {
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<Vec<f64>> = (0..2)
                .map(|_| loop {
                    let v: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                    if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                        break v;
                    }
                })
                .collect();
            let base = ConstraintParams::from_rows(&a, &b).unwrap();
            let Ok(q) = ScaledParams::new(base, rng.random_range(0.05..1.0)) else { continue };
            let Ok(flow) = solve_gradient_flow(Objective::scaled(&q), DEFAULT_FLOW_TOL, None) else {
                continue;
            };
            done += 1;
            assert!(q.base().max_margin(&flow.k_star).unwrap() < 0.0);
            let newton = solve_scaled(&q, &SolverOptions::default(), None).unwrap();
            assert!(newton.converged());
        }
    }
}

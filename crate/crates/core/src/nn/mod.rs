//! Neural approximation of the minimizer map `q -> k~*(q)` on the training
//! box, and its use as a controller or as a Newton warmstart.

mod dataset;
mod model;
mod train;

use nalgebra::DVector;

pub use dataset::{sample_dataset, sample_state_dataset, sidecar_path, Dataset, DatasetMeta};
pub use model::{silu, silu_derivative, Gradients, Layer, MlpModel, MODEL_SCHEMA_VERSION};
pub use train::{mse, split_indices, train, EpochStats, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::params::{scale_params, ConstraintParams};
use crate::qp::project_onto_polytope;
use crate::sim::{ControlOutput, ControlProblem, Controller};
use crate::solver::{solve_scaled, u_star, SolveResult, SolverOptions};

/// Network prediction of `k*(p)`, read off the scaled parameters.
pub fn predict_params(model: &MlpModel, p: &ConstraintParams) -> Result<DVector<f64>> {
    let (q, _) = scale_params(p);
    let k = model.predict(&q)?;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    Ok(k)
}

/// `u(x)` from the network. In hard mode the prediction is projected onto the
/// closed polytope of `p(x)`, so every margin is at most zero.
pub fn nn_control(model: &MlpModel, problem: &ControlProblem, x: &DVector<f64>, hard: bool) -> Result<DVector<f64>> {
    let p = problem.constraints(x)?;
    let k = predict_params(model, &p)?;
    if hard {
        project_onto_polytope(&p, &k, 0.0)
    } else {
        Ok(k)
    }
}

/// Newton on `q(p)` started from the network prediction.
pub fn warmstart_solve(model: &MlpModel, p: &ConstraintParams, opts: &SolverOptions) -> Result<SolveResult> {
    let guess = predict_params(model, p)?;
    let (q, _) = scale_params(p);
    solve_scaled(&q, opts, Some(&guess))
}

/// Network controller, soft or hard.
#[derive(Debug, Clone)]
pub struct NnController {
    model: MlpModel,
    problem: ControlProblem,
    hard: bool,
}

impl NnController {
    pub fn new(model: MlpModel, problem: ControlProblem, hard: bool) -> Self {
        Self { model, problem, hard }
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }
}

impl Controller for NnController {
    fn control(&mut self, x: &DVector<f64>) -> Result<ControlOutput> {
        Ok(ControlOutput::plain(nn_control(&self.model, &self.problem, x, self.hard)?))
    }
}

/// Exact `u*` computed by Newton warmstarted at the network prediction.
#[derive(Debug, Clone)]
pub struct WarmstartController {
    model: MlpModel,
    problem: ControlProblem,
    opts: SolverOptions,
}

impl WarmstartController {
    pub fn new(model: MlpModel, problem: ControlProblem, opts: SolverOptions) -> Self {
        Self { model, problem, opts }
    }
}

impl Controller for WarmstartController {
    fn control(&mut self, x: &DVector<f64>) -> Result<ControlOutput> {
        let guess = nn_control(&self.model, &self.problem, x, false)?;
        let res = u_star(&self.problem, x, &self.opts, Some(&guess))?;
        Ok(ControlOutput {
            u: res.k_star,
            iterations: res.iterations,
            status: Some(res.status),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_example_1, make_example_2, Example1};
    use crate::solver::solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn states(count: usize, seed: u64, problem: &ControlProblem) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = problem.system.state_dim();
        let mut out = Vec::new();
        while out.len() < count {
            let x = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
            if problem.min_barrier(&x) > 0.0 {
                out.push(x);
            }
        }
        out
    }

    #[test]
    fn hard_mode_always_satisfies_constraints() {
        let model = MlpModel::two_dimensional(3);
        for problem in [make_example_1(Example1::TwoD, None, 0).unwrap(), make_example_2()] {
            for x in states(200, 1, &problem) {
                let u = nn_control(&model, &problem, &x, true).unwrap();
                let p = problem.constraints(&x).unwrap();
                let worst = p.max_margin(&u).unwrap();
                let scale = p.scale_factor();
                assert!(worst <= 1e-9 * scale, "margin {worst} at {x}");
            }
        }
    }

    #[test]
    fn untrained_model_gives_finite_inputs_on_both_examples() {
        // one N = m = 2 model serves the 2-state and the 3-state problem
        let mut controller_2d = NnController::new(MlpModel::two_dimensional(0), make_example_1(Example1::TwoD, None, 0).unwrap(), false);
        let mut controller_uni = NnController::new(controller_2d.model().clone(), make_example_2(), false);
        assert_eq!(controller_2d.model(), controller_uni.model());
        let u = controller_2d.control(&DVector::from_vec(vec![3.0, 1.0])).unwrap().u;
        assert!(u.len() == 2 && u.iter().all(|v| v.is_finite()));
        let u = controller_uni.control(&DVector::from_vec(vec![1.0, 1.0, 3.0])).unwrap().u;
        assert!(u.len() == 2 && u.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn warmstart_reaches_the_cold_minimizer() {
        let model = MlpModel::two_dimensional(5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0;
        while checked < 50 {
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let p = ConstraintParams::from_rows(&a, &b).unwrap();
            let Ok(cold) = solve(&p, &SolverOptions::default(), None) else { continue };
            if !cold.converged() {
                continue;
            }
            let warm = warmstart_solve(&model, &p, &SolverOptions::default()).unwrap();
            assert!(warm.converged());
            assert!((&warm.k_star - &cold.k_star).norm() <= 1e-8 * (1.0 + cold.k_star.norm()));
            checked += 1;
        }
    }

    #[test]
    fn zero_model_warmstarts_at_the_origin() {
        let mut model = MlpModel::two_dimensional(0);
        for layer in model.layers_mut() {
            layer.weights.fill(0.0);
            layer.biases.fill(0.0);
        }
        let p = ConstraintParams::from_rows(&[3.0, -2.0], &[vec![-1.0, 2.0], vec![4.0, 1.0]]).unwrap();
        let (q, _) = scale_params(&p);
        let expected = solve_scaled(&q, &SolverOptions::default(), Some(&DVector::zeros(2))).unwrap();
        assert_eq!(warmstart_solve(&model, &p, &SolverOptions::default()).unwrap(), expected);
    }

    #[test]
    fn soft_controller_is_lipschitz_on_a_grid() {
        let model = MlpModel::two_dimensional(7);
        let problem = make_example_1(Example1::TwoD, None, 0).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            for j in 0..20 {
                let x = DVector::from_vec(vec![-4.5 + 0.47 * i as f64, -4.5 + 0.47 * j as f64]);
                if problem.min_barrier(&x) <= 0.0 {
                    continue;
                }
                let u = nn_control(&model, &problem, &x, false).unwrap();
                for d in 0..2 {
                    let mut y = x.clone();
                    y[d] += h;
                    let v = nn_control(&model, &problem, &y, false).unwrap();
                    worst = worst.max((v - &u).norm() / h);
                }
            }
        }
        assert!(worst.is_finite() && worst < 1e3, "{worst}");
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let model = MlpModel::two_dimensional(0);
        let problem = make_example_1(Example1::TenD, None, 7).unwrap();
        let x = DVector::from_element(10, 3.0);
        assert!(matches!(nn_control(&model, &problem, &x, false), Err(Error::Contract(_))));
    }
}

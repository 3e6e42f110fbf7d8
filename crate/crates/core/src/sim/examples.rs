use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cbf_constraint, clf_constraint, ControlAffineSystem, ControlProblem, ScalarField};
use crate::error::{Error, Result};
use crate::params::ConstraintParams;

/// Seed of the default 10D obstacle layout.
pub const DEFAULT_10D_SEED: u64 = 7;
const RADIUS_10D: f64 = 0.8;
const OBSTACLES_10D: usize = 9;
const BOX_10D: f64 = 2.5;
const ORIGIN_CLEARANCE: f64 = 1.2;
const BARRIER_GAIN_10D: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Example1 {
    /// `n = m = 2`, three discs and one product barrier.
    TwoD,
    /// `n = m = 10`, nine balls with reciprocal barriers.
    TenD,
}

/// Spherical obstacles `|x - c_i| < r_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacles {
    pub centers: Vec<DVector<f64>>,
    pub radii: Vec<f64>,
}

impl Obstacles {
    pub fn preset_2d() -> Self {
        Self {
            centers: vec![
                DVector::from_vec(vec![0.0, 2.5]),
                DVector::from_vec(vec![-2.0, -2.0]),
                DVector::from_vec(vec![2.0, -2.0]),
            ],
            radii: vec![1.0; 3],
        }
    }

    pub fn preset_10d(seed: u64) -> Self {
        Self {
            centers: random_centers(seed, OBSTACLES_10D, 10, BOX_10D, RADIUS_10D),
            radii: vec![RADIUS_10D; OBSTACLES_10D],
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.centers.is_empty() || self.centers.len() != self.radii.len() {
            return Err(Error::contract("need one radius per obstacle center"));
        }
        if self.centers.iter().any(|c| c.len() != dim) {
            return Err(Error::contract(format!("obstacle centers must have length {dim}")));
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::contract("obstacle radii must be positive"));
        }
        Ok(())
    }
}

/// Centers uniform in `[-half_width, half_width]^dim`, redrawn while within
/// `1.2 r` of the origin.
pub fn random_centers(seed: u64, count: usize, dim: usize, half_width: f64, radius: f64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let c = DVector::from_fn(dim, |_, _| rng.random_range(-half_width..=half_width));
            if c.norm() >= ORIGIN_CLEARANCE * radius {
                break c;
            }
        })
        .collect()
}

/// Per-obstacle barriers used for reporting: `|x - c|^2 - r^2` in 2D and
/// `8 (1 - r^2 / |x - c|^2)` in 10D.
pub fn example_1_barriers(dim: Example1, obstacles: &Obstacles) -> Vec<ScalarField> {
    obstacles
        .centers
        .iter()
        .zip(&obstacles.radii)
        .map(|(c, &r)| match dim {
            Example1::TwoD => circle_barrier(c.clone(), r),
            Example1::TenD => reciprocal_barrier(c.clone(), r),
        })
        .collect()
}

fn circle_barrier(c: DVector<f64>, r: f64) -> ScalarField {
    let c2 = c.clone();
    ScalarField::new(move |x| (x - &c).norm_squared() - r * r, move |x| (x - &c2) * 2.0)
}

fn reciprocal_barrier(c: DVector<f64>, r: f64) -> ScalarField {
    let c2 = c.clone();
    ScalarField::new(
        move |x| BARRIER_GAIN_10D * (1.0 - r * r / (x - &c).norm_squared()),
        move |x| {
            let d = x - &c2;
            let d2 = d.norm_squared();
            d * (2.0 * BARRIER_GAIN_10D * r * r / (d2 * d2))
        },
    )
}

/// `h = prod_i h_i` with gradient `sum_i grad h_i prod_{j != i} h_j`.
fn product_barrier(factors: Vec<ScalarField>) -> ScalarField {
    let values = factors.clone();
    ScalarField::new(
        move |x| values.iter().map(|h| h.value(x)).product(),
        move |x| {
            let vals: Vec<f64> = factors.iter().map(|h| h.value(x)).collect();
            let mut grad = DVector::zeros(x.len());
            for (i, h) in factors.iter().enumerate() {
                let others: f64 = vals
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, v)| v)
                    .product();
                grad.axpy(others, &h.gradient(x), 1.0);
            }
            grad
        },
    )
}

fn clf_w(x: &DVector<f64>) -> f64 {
    0.1 * x.norm_squared()
}

fn assemble(rows: Vec<(f64, DVector<f64>)>) -> Result<ConstraintParams> {
    let m = rows[0].1.len();
    let a = DVector::from_iterator(rows.len(), rows.iter().map(|(a, _)| *a));
    let b = DMatrix::from_fn(rows.len(), m, |i, j| rows[i].1[j]);
    ConstraintParams::new(a, b)
}

/// Single integrator with `V = |x|^2 / 2`, `W = 0.1 |x|^2` and obstacle
/// barriers with `alpha(s) = s`.
///
/// 2D: constraint 1 is the CLF and constraint 2 the product barrier.
/// 10D: constraints 1..9 are the reciprocal barriers and 10 the CLF.
/// `obstacles` overrides the preset layout; `seed` only affects the 10D preset.
pub fn make_example_1(dim: Example1, obstacles: Option<Obstacles>, seed: u64) -> Result<ControlProblem> {
    let n = match dim {
        Example1::TwoD => 2,
        Example1::TenD => 10,
    };
    let obstacles = obstacles.unwrap_or_else(|| match dim {
        Example1::TwoD => Obstacles::preset_2d(),
        Example1::TenD => Obstacles::preset_10d(seed),
    });
    obstacles.validate(n)?;
    let system = ControlAffineSystem::single_integrator(n);
    let lyapunov = ScalarField::half_squared_norm();
    let barriers = example_1_barriers(dim, &obstacles);

    let (name, map): (_, super::ConstraintMap) = match dim {
        Example1::TwoD => {
            let h = product_barrier(barriers.clone());
            let (sys, v) = (system.clone(), lyapunov.clone());
            (
                "example-1-2d",
                Arc::new(move |x| {
                    let clf = clf_constraint(&v, clf_w, &sys, x)?;
                    let cbf = cbf_constraint(&h, |s| s, &sys, x)?;
                    assemble(vec![clf, cbf])
                }),
            )
        }
        Example1::TenD => {
            let (sys, v, hs) = (system.clone(), lyapunov.clone(), barriers.clone());
            (
                "example-1-10d",
                Arc::new(move |x| {
                    let mut rows = hs
                        .iter()
                        .map(|h| cbf_constraint(h, |s| s, &sys, x))
                        .collect::<Result<Vec<_>>>()?;
                    rows.push(clf_constraint(&v, clf_w, &sys, x)?);
                    assemble(rows)
                }),
            )
        }
    };
    Ok(ControlProblem::new(name, system, map, lyapunov, barriers))
}

/// Unicycle with drift, `V = (x^2 + y^2 + theta^2) / 2`, `W = 0.1 |x|^2` and
/// the barrier `h = -y + (2x + 1)^2 + 1` with `alpha(s) = 2 s`.
pub fn make_example_2() -> ControlProblem {
    let system = ControlAffineSystem::unicycle_with_drift();
    let lyapunov = ScalarField::half_squared_norm();
    let h = ScalarField::new(
        |s| -s[1] + (2.0 * s[0] + 1.0).powi(2) + 1.0,
        |s| DVector::from_vec(vec![4.0 * (2.0 * s[0] + 1.0), -1.0, 0.0]),
    );
    let (sys, v, barrier) = (system.clone(), lyapunov.clone(), h.clone());
    let map: super::ConstraintMap = Arc::new(move |x| {
        let clf = clf_constraint(&v, clf_w, &sys, x)?;
        let cbf = cbf_constraint(&barrier, |s| 2.0 * s, &sys, x)?;
        assemble(vec![clf, cbf])
    });
    ControlProblem::new("example-2", system, map, lyapunov, vec![h])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn numeric_gradient(h: &ScalarField, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            let step = 1e-6 * (1.0 + x[i].abs());
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += step;
            lo[i] -= step;
            (h.value(&hi) - h.value(&lo)) / (2.0 * step)
        })
    }

    #[test]
    fn two_d_constraints_match_closed_forms() {
        let problem = make_example_1(Example1::TwoD, None, 0).unwrap();
        let x = v(&[1.3, -0.4]);
        let p = problem.constraints(&x).unwrap();
        assert_eq!((p.n_constraints(), p.input_dim()), (2, 2));
        assert_relative_eq!(p.offsets()[0], 0.1 * x.norm_squared());
        assert_relative_eq!(p.normal(0), x.clone());
        let h: f64 = Obstacles::preset_2d()
            .centers
            .iter()
            .map(|c| (&x - c).norm_squared() - 1.0)
            .product();
        assert_relative_eq!(p.offsets()[1], -h, max_relative = 1e-14);
    }

    #[test]
    fn product_barrier_gradient_matches_differences() {
        let obstacles = Obstacles::preset_2d();
        let h = product_barrier(example_1_barriers(Example1::TwoD, &obstacles));
        for x in [v(&[1.3, -0.4]), v(&[4.0, 4.0]), v(&[-0.5, 0.7])] {
            assert_relative_eq!(h.gradient(&x), numeric_gradient(&h, &x), max_relative = 1e-6);
        }
        let bar = reciprocal_barrier(v(&[1.0, -1.0, 0.5]), 0.8);
        let x = v(&[0.2, 0.3, -0.1]);
        assert_relative_eq!(bar.gradient(&x), numeric_gradient(&bar, &x), max_relative = 1e-6);
    }

    #[test]
    fn far_state_constraints() {
        let problem = make_example_1(Example1::TwoD, None, 0).unwrap();
        let x = v(&[5.0, 5.0]);
        let p = problem.constraints(&x).unwrap();
        let margins = p.margins(&-&x).unwrap();
        // u = -x decreases V but also h faster than alpha(h) allows
        assert!(margins[0] < 0.0);
        let h = p.offsets()[1].abs();
        assert_relative_eq!(margins[1], h * (-1.0 + 75.0 / 30.25 + 140.0 / 97.0 + 100.0 / 57.0), max_relative = 1e-12);
        let u = crate::solver::u_star(&problem, &x, &Default::default(), None).unwrap().k_star;
        assert!(p.max_margin(&u).unwrap() < 0.0);
    }

    #[test]
    fn product_vanishes_on_obstacle_boundary() {
        let obstacles = Obstacles::preset_2d();
        let h = product_barrier(example_1_barriers(Example1::TwoD, &obstacles));
        assert_eq!(h.value(&v(&[0.0, 1.5])), 0.0);
    }

    #[test]
    fn ten_d_layout() {
        let problem = make_example_1(Example1::TenD, None, DEFAULT_10D_SEED).unwrap();
        let x = DVector::from_element(10, 0.3);
        let p = problem.constraints(&x).unwrap();
        assert_eq!((p.n_constraints(), p.input_dim()), (10, 10));
        assert_relative_eq!(p.offsets()[9], 0.1 * x.norm_squared());
        for c in &Obstacles::preset_10d(DEFAULT_10D_SEED).centers {
            assert!(c.norm() >= 1.2 * 0.8);
            assert!(c.amax() <= 2.5);
        }
        assert_eq!(problem.barriers().len(), 9);
        let other = Obstacles::preset_10d(DEFAULT_10D_SEED + 1);
        assert_ne!(other, Obstacles::preset_10d(DEFAULT_10D_SEED));
    }

    #[test]
    fn bad_obstacles_are_rejected() {
        let bad = Obstacles {
            centers: vec![v(&[0.0, 2.0])],
            radii: vec![0.0],
        };
        assert!(make_example_1(Example1::TwoD, Some(bad), 0).is_err());
    }

    #[test]
    fn example_2_constraints_match_closed_forms() {
        let problem = make_example_2();
        assert_eq!(problem.system.drift(&DVector::zeros(3)), DVector::zeros(3));
        let g = problem.system.input_matrix(&v(&[0.0, 0.0, 0.7]));
        assert_relative_eq!(g.column(0).into_owned(), v(&[0.7_f64.cos(), 0.7_f64.sin(), 0.0]));
        assert_eq!(g.column(1).into_owned(), v(&[0.0, 0.0, 1.0]));
        assert_eq!(problem.min_barrier(&v(&[0.0, 0.0, 1.0])), 2.0);

        let (x, y, th) = (0.7, -1.2, 2.9);
        let p = problem.constraints(&v(&[x, y, th])).unwrap();
        let h = -y + (2.0 * x + 1.0).powi(2) + 1.0;
        assert_relative_eq!(p.offsets()[0], -y * y + 0.1 * (x * x + y * y + th * th), max_relative = 1e-14);
        assert_relative_eq!(p.normal(0), v(&[x * th.cos() + y * th.sin(), th]), max_relative = 1e-14);
        assert_relative_eq!(p.offsets()[1], -y - 2.0 * h, max_relative = 1e-14);
        assert_relative_eq!(
            p.normal(1),
            v(&[-4.0 * (2.0 * x + 1.0) * th.cos() + th.sin(), 0.0]),
            max_relative = 1e-14
        );
    }
}

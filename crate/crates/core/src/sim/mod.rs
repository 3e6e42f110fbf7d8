//! Control-affine systems `x' = f(x) + g(x) u`, CLF/CBF constraint builders,
//! the example problems and closed-loop simulation.

mod examples;
mod simulate;
mod trajectory;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::params::ConstraintParams;

pub use examples::{
    example_1_barriers, make_example_1, make_example_2, random_centers, Example1, Obstacles, DEFAULT_10D_SEED,
};
pub use simulate::{
    interconnection_field, simulate, simulate_interconnection, ControlOutput, Controller, ExactController, Mode,
    QpController, Simulation, SimulationFailure, Warmstart, HALT_NORM,
};
pub use trajectory::{metrics, Metrics, Trajectory, V_INCREASE_TOL};

pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ConstraintMap = Arc<dyn Fn(&DVector<f64>) -> Result<ConstraintParams> + Send + Sync>;

/// `x' = f(x) + g(x) u` with `x` in R^n and `u` in R^m.
#[derive(Clone)]
pub struct ControlAffineSystem {
    n: usize,
    m: usize,
    drift: VectorField,
    input_matrix: MatrixField,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .finish_non_exhaustive()
    }
}

impl ControlAffineSystem {
    pub fn new(n: usize, m: usize, drift: VectorField, input_matrix: MatrixField) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::contract("state and input dimensions must be positive"));
        }
        Ok(Self {
            n,
            m,
            drift,
            input_matrix,
        })
    }

    /// `x' = u` in R^n.
    pub fn single_integrator(n: usize) -> Self {
        Self {
            n,
            m: n,
            drift: Arc::new(move |_| DVector::zeros(n)),
            input_matrix: Arc::new(move |_| DMatrix::identity(n, n)),
        }
    }

    /// Unicycle `(x, y, theta)` with input `(v, omega)` and drift `-y` in the
    /// `y` equation.
    pub fn unicycle_with_drift() -> Self {
        Self {
            n: 3,
            m: 2,
            drift: Arc::new(|s| DVector::from_vec(vec![0.0, -s[1], 0.0])),
            input_matrix: Arc::new(|s| {
                let (sin, cos) = s[2].sin_cos();
                DMatrix::from_row_slice(3, 2, &[cos, 0.0, sin, 0.0, 0.0, 1.0])
            }),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input_matrix)(x)
    }

    /// `f(x) + g(x) u`.
    pub fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n || u.len() != self.m {
            return Err(Error::contract(format!(
                "expected state {} and input {}, got {} and {}",
                self.n,
                self.m,
                x.len(),
                u.len()
            )));
        }
        let v = self.drift(x) + self.input_matrix(x) * u;
        finite(v, "state velocity")
    }
}

/// A scalar function together with its gradient.
#[derive(Clone)]
pub struct ScalarField {
    value: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    gradient: VectorField,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ScalarField")
    }
}

impl ScalarField {
    pub fn new(
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    /// `V(x) = |x|^2 / 2`.
    pub fn half_squared_norm() -> Self {
        Self::new(|x| 0.5 * x.norm_squared(), |x| x.clone())
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }
}

/// CLF decrease condition `grad V^T (f + g u) + W <= 0` as `a + b^T u`:
/// `a = grad V^T f + W`, `b = g^T grad V`.
pub fn clf_constraint(
    v: &ScalarField,
    w: impl Fn(&DVector<f64>) -> f64,
    system: &ControlAffineSystem,
    x: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let grad = v.gradient(x);
    let a = grad.dot(&system.drift(x)) + w(x);
    let b = system.input_matrix(x).tr_mul(&grad);
    finite_pair(a, b, "CLF constraint")
}

/// CBF condition `grad h^T (f + g u) + alpha(h) >= 0` negated into
/// `a + b^T u <= 0`: `a = -grad h^T f - alpha(h)`, `b = -g^T grad h`.
pub fn cbf_constraint(
    h: &ScalarField,
    alpha: impl Fn(f64) -> f64,
    system: &ControlAffineSystem,
    x: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let grad = h.gradient(x);
    let a = -grad.dot(&system.drift(x)) - alpha(h.value(x));
    let b = -system.input_matrix(x).tr_mul(&grad);
    finite_pair(a, b, "CBF constraint")
}

fn finite(v: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn finite_pair(a: f64, b: DVector<f64>, what: &str) -> Result<(f64, DVector<f64>)> {
    if a.is_finite() {
        Ok((a, finite(b, what)?))
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// A system, its state-dependent constraints and the certificate functions
/// used for reporting (`V` and the barriers `h_i`).
#[derive(Clone)]
pub struct ControlProblem {
    pub name: String,
    pub system: ControlAffineSystem,
    constraint_map: ConstraintMap,
    lyapunov: ScalarField,
    barriers: Vec<ScalarField>,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("system", &self.system)
            .field("barriers", &self.barriers.len())
            .finish_non_exhaustive()
    }
}

impl ControlProblem {
    pub fn new(
        name: impl Into<String>,
        system: ControlAffineSystem,
        constraint_map: ConstraintMap,
        lyapunov: ScalarField,
        barriers: Vec<ScalarField>,
    ) -> Self {
        Self {
            name: name.into(),
            system,
            constraint_map,
            lyapunov,
            barriers,
        }
    }

    /// `(a_i(x), b_i(x))` for all constraints.
    pub fn constraints(&self, x: &DVector<f64>) -> Result<ConstraintParams> {
        if x.len() != self.system.state_dim() {
            return Err(Error::contract(format!(
                "state has length {}, expected {}",
                x.len(),
                self.system.state_dim()
            )));
        }
        let p = (self.constraint_map)(x)?;
        if p.input_dim() != self.system.input_dim() {
            return Err(Error::contract("constraint map disagrees with the input dimension"));
        }
        Ok(p)
    }

    pub fn lyapunov(&self, x: &DVector<f64>) -> f64 {
        self.lyapunov.value(x)
    }

    pub fn barriers(&self) -> &[ScalarField] {
        &self.barriers
    }

    /// `min_i h_i(x)`, or `+inf` without barriers.
    pub fn min_barrier(&self, x: &DVector<f64>) -> f64 {
        self.barriers.iter().map(|h| h.value(x)).fold(f64::INFINITY, f64::min)
    }
}

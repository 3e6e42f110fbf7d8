//! Smooth universal-formula controllers for systems with an arbitrary number of
//! affine input constraints.
//!
//! Given constraints `A_i + B_i^T u < 0` (i = 1..N, u in R^m), the controller
//! value is the unique minimizer of the strictly convex function
//!
//! ```text
//!     J_p(k) = - sum_i (|B_i|^2 + |k|^2) / (2 (A_i + B_i^T k))
//! ```
//!
//! over the open polytope of admissible inputs. The crate provides
//!
//! - [`params`]: constraint tuples, strict-feasibility search and the scaling
//!   map onto the bounded training box,
//! - [`objective`]: `J_p`, its weighted and scaled variants with analytic
//!   gradients and Hessians,
//! - [`solver`]: damped Newton, gradient-flow integration and the closed-form
//!   single-constraint formula,
//! - [`qp`]: the min-norm QP baseline and Euclidean projection onto the polytope,
//! - [`sim`]: control-affine systems, CLF/CBF constraint builders, the example
//!   problems and closed-loop simulation,
//! - [`nn`]: dataset generation, an MLP approximation of the minimizer map and
//!   its use as a controller or warmstart,
//! - [`bench`]: paired per-call timing of controllers.

pub mod bench;
pub mod error;
pub mod nn;
pub mod objective;
pub mod params;
pub mod qp;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
pub use objective::{Objective, WeightVector};
pub use params::{find_interior_point, scale_params, ConstraintParams, FeasibilityCertificate, ScaledParams};
pub use solver::{closed_form_1d, solve_exact, solve_gradient_flow, SolveResult, SolveStatus, SolverOptions};

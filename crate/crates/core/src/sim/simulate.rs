use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{ControlProblem, Trajectory};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::qp::{project_with_state, solve_min_norm_qp};
use crate::params::ConstraintParams;
use crate::solver::{interiorize, u_star, SolveStatus, SolverOptions};

/// Simulations stop once `|x|` drops below this; `u*` is undefined at the
/// origin.
pub const HALT_NORM: f64 = 1e-6;
const MAX_DISPLACEMENT: f64 = 0.01;
const MAX_SUBSTEPS: usize = 1 << 22;
const BOUNDARY_FRACTION: f64 = 0.99;
const PROX_MAX_ITER: usize = 50;
const PROX_STEP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: DVector<f64>,
    pub iterations: usize,
    /// Solver status for optimization-based controllers.
    pub status: Option<SolveStatus>,
}

impl ControlOutput {
    pub fn plain(u: DVector<f64>) -> Self {
        Self {
            u,
            iterations: 0,
            status: None,
        }
    }
}

/// State feedback `x -> u`.
pub trait Controller {
    fn control(&mut self, x: &DVector<f64>) -> Result<ControlOutput>;
}

impl<F> Controller for F
where
    F: FnMut(&DVector<f64>) -> Result<ControlOutput>,
{
    fn control(&mut self, x: &DVector<f64>) -> Result<ControlOutput> {
        self(x)
    }
}

/// Where the exact controller starts Newton.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warmstart {
    /// Feasibility certificate plus centering.
    Cold,
    /// The previous call's result.
    Previous,
    /// The min-norm QP solution.
    MinNormQp,
}

/// `u*(x)` computed by Newton on the scaled constraints.
#[derive(Debug, Clone)]
pub struct ExactController {
    problem: ControlProblem,
    opts: SolverOptions,
    warmstart: Warmstart,
    previous: Option<DVector<f64>>,
}

impl ExactController {
    pub fn new(problem: ControlProblem, opts: SolverOptions, warmstart: Warmstart) -> Self {
        Self {
            problem,
            opts,
            warmstart,
            previous: None,
        }
    }
}

impl Controller for ExactController {
    fn control(&mut self, x: &DVector<f64>) -> Result<ControlOutput> {
        let warm = match self.warmstart {
            Warmstart::Cold => None,
            Warmstart::Previous => self.previous.clone(),
            Warmstart::MinNormQp => Some(solve_min_norm_qp(&self.problem.constraints(x)?)?),
        };
        let res = u_star(&self.problem, x, &self.opts, warm.as_ref())?;
        self.previous = Some(res.k_star.clone());
        Ok(ControlOutput {
            u: res.k_star,
            iterations: res.iterations,
            status: Some(res.status),
        })
    }
}

/// The min-norm CLF-CBF QP: `argmin |u|^2` subject to all constraints.
#[derive(Debug, Clone)]
pub struct QpController {
    problem: ControlProblem,
}

impl QpController {
    pub fn new(problem: ControlProblem) -> Self {
        Self { problem }
    }
}

impl Controller for QpController {
    fn control(&mut self, x: &DVector<f64>) -> Result<ControlOutput> {
        let p = self.problem.constraints(x)?;
        let sol = project_with_state(&p, &DVector::zeros(p.input_dim()), 0.0)?;
        Ok(ControlOutput {
            u: sol.u,
            iterations: sol.iterations,
            status: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// The controller is evaluated at every RK4 stage.
    Continuous,
    /// The input is held over each step.
    SampleAndHold,
}

/// Where and why a simulation stopped early.
#[derive(Debug)]
pub struct SimulationFailure {
    pub time: f64,
    pub state: DVector<f64>,
    pub error: Error,
}

#[derive(Debug)]
pub struct Simulation {
    /// Rows up to the failure, if any.
    pub trajectory: Trajectory,
    pub failure: Option<SimulationFailure>,
}

impl Simulation {
    pub fn into_result(self) -> Result<Trajectory> {
        match self.failure {
            Some(f) => Err(f.error),
            None => Ok(self.trajectory),
        }
    }
}

fn check_setup(problem: &ControlProblem, x0: &DVector<f64>, t_final: f64, dt: f64) -> Result<usize> {
    if x0.len() != problem.system.state_dim() {
        return Err(Error::contract(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            problem.system.state_dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) || !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::contract(format!("need dt > 0 and T >= 0, got dt={dt}, T={t_final}")));
    }
    Ok((t_final / dt).round() as usize)
}

/// Fixed-step RK4 closed loop from `x0` over `[0, T]`.
///
/// In continuous mode a step whose displacement would exceed 1% of
/// `1 + |x|` is split into smaller RK4 substeps. One trajectory row is recorded per step, at the state where the step
/// starts, plus a final row at `T`. The solver statistics of a row belong to
/// the controller call at that state.
pub fn simulate(
    problem: &ControlProblem,
    controller: &mut dyn Controller,
    x0: &DVector<f64>,
    t_final: f64,
    dt: f64,
    mode: Mode,
) -> Result<Simulation> {
    let steps = check_setup(problem, x0, t_final, dt)?;
    let mut trajectory = Trajectory::default();
    let mut x = x0.clone();

    for step in 0..=steps {
        let t = step as f64 * dt;
        if x.norm() < HALT_NORM {
            trajectory.push_halted(problem, t, x);
            break;
        }
        let started = Instant::now();
        let out = match controller.control(&x) {
            Ok(out) => out,
            Err(e) => return fail_at(trajectory, t, x, e),
        };
        let ms = started.elapsed().as_secs_f64() * 1e3;
        let margins = match problem.constraints(&x).and_then(|p| p.margins(&out.u)) {
            Ok(m) => m,
            Err(e) => return fail_at(trajectory, t, x, e),
        };
        trajectory.push(problem, t, x.clone(), out.u.clone(), margins, out.iterations, ms);
        if step == steps {
            break;
        }

        let step = match mode {
            Mode::SampleAndHold => {
                let held = out.u;
                let mut f = |y: &DVector<f64>| problem.system.velocity(y, &held);
                rk4(&mut f, &x, dt, None)
            }
            Mode::Continuous => {
                let mut f = |y: &DVector<f64>| -> Result<DVector<f64>> {
                    let u = controller.control(y)?.u;
                    problem.system.velocity(y, &u)
                };
                match problem.system.velocity(&x, &out.u) {
                    Ok(k1) => continuous_step(&mut f, &x, dt, k1),
                    Err(e) => Err((x.clone(), e)),
                }
            }
        };
        match step {
            Ok(next) => x = next,
            Err((state, e)) => return fail_at(trajectory, t, state, e),
        }
    }
    Ok(Simulation {
        trajectory,
        failure: None,
    })
}

type StepResult = std::result::Result<DVector<f64>, (DVector<f64>, Error)>;

/// RK4 over `[0, dt]`, split into substeps that move the state by at most
/// `MAX_DISPLACEMENT (1 + |x|)` each. Slow fields take a single step.
fn continuous_step(
    f: &mut dyn FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    x: &DVector<f64>,
    dt: f64,
    k1: DVector<f64>,
) -> StepResult {
    let mut y = x.clone();
    let mut k1 = Some(k1);
    let mut remaining = dt;
    while remaining > 0.0 {
        let slope = match k1.take() {
            Some(k) => k,
            None => f(&y).map_err(|e| (y.clone(), e))?,
        };
        let speed = slope.norm();
        let limit = MAX_DISPLACEMENT * (1.0 + y.norm());
        let mut h = remaining;
        if speed * h > limit {
            h = (limit / speed).max(dt / MAX_SUBSTEPS as f64);
        }
        // avoid a sliver at the end of the interval
        if remaining - h < 1e-9 * dt {
            h = remaining;
        }
        y = rk4(f, &y, h, Some(slope))?;
        remaining -= h;
    }
    Ok(y)
}

/// One classical RK4 step; on failure returns the stage state that failed.
fn rk4(
    f: &mut dyn FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    x: &DVector<f64>,
    h: f64,
    k1: Option<DVector<f64>>,
) -> StepResult {
    let k1 = match k1 {
        Some(k) => k,
        None => f(x).map_err(|e| (x.clone(), e))?,
    };
    let y2 = x + &k1 * (0.5 * h);
    let k2 = f(&y2).map_err(|e| (y2.clone(), e))?;
    let y3 = x + &k2 * (0.5 * h);
    let k3 = f(&y3).map_err(|e| (y3.clone(), e))?;
    let y4 = x + &k3 * h;
    let k4 = f(&y4).map_err(|e| (y4.clone(), e))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err((y4, Error::NonFinite("state".into())))
    }
}

/// `(x', u')` of the interconnection `x' = f + g u`, `u' = -tau grad_u J_{p(x)}(u)`.
pub fn interconnection_field(
    problem: &ControlProblem,
    tau: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let p = problem.constraints(x)?;
    let grad = Objective::unscaled(&p).gradient(u)?;
    Ok((problem.system.velocity(x, u)?, grad * -tau))
}

/// Joint integration of state and input under the gradient dynamics
/// `u' = -tau grad_u J`.
///
/// The input equation is stiff for large `tau`, so each substep advances `u`
/// by implicit Euler against the constraints at the predicted state, which is
/// a proximal step on the barrier `J` and stays interior, and `x` by Heun's
/// rule. Substeps move `x` by at most `MAX_DISPLACEMENT (1 + |x|)` and are
/// halved until the new pair is strictly interior. `solver_iters` holds the
/// substep count of the step.
pub fn simulate_interconnection(
    problem: &ControlProblem,
    tau: f64,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    t_final: f64,
    dt: f64,
) -> Result<Simulation> {
    let steps = check_setup(problem, x0, t_final, dt)?;
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::contract(format!("tau must be a nonnegative number, got {tau}")));
    }
    let p0 = problem.constraints(x0)?;
    Objective::unscaled(&p0).interior_margins(u0)?;

    let mut trajectory = Trajectory::default();
    let mut x = x0.clone();
    let mut u = u0.clone();
    for step in 0..=steps {
        let t = step as f64 * dt;
        if x.norm() < HALT_NORM {
            trajectory.push_halted(problem, t, x);
            break;
        }
        let margins = match problem.constraints(&x).and_then(|p| p.margins(&u)) {
            Ok(m) => m,
            Err(e) => return fail_at(trajectory, t, x, e),
        };
        if step == steps {
            trajectory.push(problem, t, x, u, margins, 0, 0.0);
            break;
        }
        let started = Instant::now();
        let mut substeps = 0;
        let mut remaining = dt;
        let (mut xn, mut un) = (x.clone(), u.clone());
        while remaining > 0.0 {
            let speed = match problem.system.velocity(&xn, &un) {
                Ok(v) => v.norm(),
                Err(e) => return fail_at(trajectory, t, xn, e),
            };
            let limit = MAX_DISPLACEMENT * (1.0 + xn.norm());
            let mut h = remaining;
            if speed * h > limit {
                h = limit / speed;
            }
            if remaining - h < 1e-9 * dt {
                h = remaining;
            }
            let next = loop {
                match interconnection_substep(problem, tau, &xn, &un, h) {
                    Ok(next) => break next,
                    Err(_) if h > dt / MAX_SUBSTEPS as f64 => h *= 0.5,
                    Err(e) => return fail_at(trajectory, t, xn, e),
                }
            };
            (xn, un) = next;
            remaining -= h;
            substeps += 1;
        }
        let ms = started.elapsed().as_secs_f64() * 1e3;
        trajectory.push(problem, t, x, u, margins, substeps, ms);
        (x, u) = (xn, un);
    }
    Ok(Simulation {
        trajectory,
        failure: None,
    })
}

fn interconnection_substep(
    problem: &ControlProblem,
    tau: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let v1 = problem.system.velocity(x, u)?;
    let predicted = x + &v1 * h;
    let u_next = if tau == 0.0 {
        u.clone()
    } else {
        proximal_step(&problem.constraints(&predicted)?, u, h * tau)?
    };
    let v2 = problem.system.velocity(&predicted, &u_next)?;
    let x_next = x + (v1 + v2) * (0.5 * h);
    Objective::unscaled(&problem.constraints(&x_next)?).interior_margins(&u_next)?;
    Ok((x_next, u_next))
}

/// Implicit Euler for `u' = -grad J_p(u)` over time `s`: the minimizer of
/// `J_p(v) + |v - u|^2 / (2 s)`, by damped Newton.
fn proximal_step(p: &ConstraintParams, u: &DVector<f64>, s: f64) -> Result<DVector<f64>> {
    let objective = Objective::unscaled(p);
    let mut v = interiorize(p, u)?.ok_or(Error::Infeasible { max_margin: f64::NAN })?;
    let phi = |v: &DVector<f64>| objective.value(v).map(|j| j + (v - u).norm_squared() / (2.0 * s));
    for _ in 0..PROX_MAX_ITER {
        let eval = objective.evaluate(&v, true)?;
        let value = eval.value + (&v - u).norm_squared() / (2.0 * s);
        let grad = &eval.gradient + (&v - u) / s;
        let m = v.len();
        let hess = eval.hessian.expect("hessian requested") + DMatrix::identity(m, m) / s;
        let dir = -hess
            .cholesky()
            .ok_or_else(|| Error::NonFinite("proximal Newton step".into()))?
            .solve(&grad);
        if dir.norm() <= PROX_STEP_TOL * (1.0 + v.norm()) {
            return Ok(v);
        }
        let rates = p.normals() * &dir;
        let mut step = eval
            .margins
            .iter()
            .zip(rates.iter())
            .filter(|(_, rate)| **rate > 0.0)
            .map(|(m, rate)| BOUNDARY_FRACTION * (-m) / rate)
            .fold(1.0, f64::min);
        let slope = grad.dot(&dir);
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &v + &dir * step;
            if let Ok(t) = phi(&trial) {
                if t <= value + 1e-4 * step * slope || t <= value && step < 1.0 {
                    v = trial;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // the decrease is below rounding; v is as good as it gets
            return Ok(v);
        }
    }
    Ok(v)
}

fn fail_at(trajectory: Trajectory, time: f64, state: DVector<f64>, error: Error) -> Result<Simulation> {
    Ok(Simulation {
        trajectory,
        failure: Some(SimulationFailure { time, state, error }),
    })
}

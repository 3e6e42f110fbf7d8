use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::ControlProblem;
use crate::error::{Error, Result};

/// Tolerance on per-step increases of `V` before one is counted.
pub const V_INCREASE_TOL: f64 = 1e-9;

/// Closed-loop samples, one row per step.
///
/// A halted trajectory ends with a row at a state inside the halting ball;
/// that row carries a zero input and NaN margins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub margins: Vec<DVector<f64>>,
    pub lyapunov: Vec<f64>,
    pub min_barrier: Vec<f64>,
    pub solver_iters: Vec<usize>,
    pub solver_ms: Vec<f64>,
    pub halted: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push(
        &mut self,
        problem: &ControlProblem,
        t: f64,
        x: DVector<f64>,
        u: DVector<f64>,
        margins: DVector<f64>,
        iterations: usize,
        ms: f64,
    ) {
        self.lyapunov.push(problem.lyapunov(&x));
        self.min_barrier.push(problem.min_barrier(&x));
        self.times.push(t);
        self.states.push(x);
        self.inputs.push(u);
        self.margins.push(margins);
        self.solver_iters.push(iterations);
        self.solver_ms.push(ms);
    }

    pub(crate) fn push_halted(&mut self, problem: &ControlProblem, t: f64, x: DVector<f64>) {
        let n_constraints = match self.margins.last() {
            Some(m) => m.len(),
            None => problem.constraints(&x).map_or(0, |p| p.n_constraints()),
        };
        let m = problem.system.input_dim();
        self.push(
            problem,
            t,
            x,
            DVector::zeros(m),
            DVector::from_element(n_constraints, f64::NAN),
            0,
            0.0,
        );
        self.halted = true;
    }

    fn dims(&self) -> (usize, usize, usize) {
        (
            self.states.first().map_or(0, |x| x.len()),
            self.inputs.first().map_or(0, |u| u.len()),
            self.margins.first().map_or(0, |m| m.len()),
        )
    }

    fn header(n: usize, m: usize, n_constraints: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((0..n).map(|i| format!("x_{i}")));
        h.extend((0..m).map(|i| format!("u_{i}")));
        h.extend((0..n_constraints).map(|i| format!("margin_{i}")));
        h.extend(["V", "min_h", "solver_iters", "solver_ms"].map(String::from));
        h
    }

    /// Checks increasing times and consistent row shapes.
    pub fn validate(&self) -> Result<()> {
        let rows = self.len();
        let lengths = [
            self.states.len(),
            self.inputs.len(),
            self.margins.len(),
            self.lyapunov.len(),
            self.min_barrier.len(),
            self.solver_iters.len(),
            self.solver_ms.len(),
        ];
        if lengths.iter().any(|&l| l != rows) {
            return Err(Error::Schema("trajectory columns have different lengths".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Schema("trajectory times are not strictly increasing".into()));
        }
        let (n, m, nc) = self.dims();
        let consistent = self.states.iter().all(|x| x.len() == n)
            && self.inputs.iter().all(|u| u.len() == m)
            && self.margins.iter().all(|c| c.len() == nc);
        if consistent {
            Ok(())
        } else {
            Err(Error::Schema("trajectory rows have inconsistent widths".into()))
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        self.validate()?;
        let (n, m, nc) = self.dims();
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(Self::header(n, m, nc))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = Vec::with_capacity(n + m + nc + 5);
            row.push(self.times[i].to_string());
            row.extend(self.states[i].iter().map(f64::to_string));
            row.extend(self.inputs[i].iter().map(f64::to_string));
            row.extend(self.margins[i].iter().map(f64::to_string));
            row.push(self.lyapunov[i].to_string());
            row.push(self.min_barrier[i].to_string());
            row.push(self.solver_iters[i].to_string());
            row.push(self.solver_ms[i].to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let header: Vec<String> = input.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
        let (n, m, nc) = (count("x_"), count("u_"), count("margin_"));
        if header != Self::header(n, m, nc) {
            return Err(Error::Schema(format!("unexpected trajectory header {header:?}")));
        }
        let mut t = Trajectory::default();
        for (line, record) in input.records().enumerate() {
            let record = record?;
            let field = |j: usize| -> Result<f64> {
                let raw = record.get(j).unwrap_or("").trim();
                raw.parse::<f64>().map_err(|e| Error::Parse {
                    location: format!("line {} column {}", line + 2, j + 1),
                    message: format!("{raw:?}: {e}"),
                })
            };
            let vector = |from: usize, len: usize| -> Result<DVector<f64>> {
                Ok(DVector::from_vec((from..from + len).map(field).collect::<Result<_>>()?))
            };
            t.times.push(field(0)?);
            t.states.push(vector(1, n)?);
            t.inputs.push(vector(1 + n, m)?);
            t.margins.push(vector(1 + n + m, nc)?);
            let tail = 1 + n + m + nc;
            t.lyapunov.push(field(tail)?);
            t.min_barrier.push(field(tail + 1)?);
            let iters = field(tail + 2)?;
            if !(iters >= 0.0 && iters.fract() == 0.0) {
                return Err(Error::Parse {
                    location: format!("line {} column {}", line + 2, tail + 3),
                    message: format!("solver_iters must be a nonnegative integer, got {iters}"),
                });
            }
            t.solver_iters.push(iters as usize);
            t.solver_ms.push(field(tail + 3)?);
        }
        t.halted = t.margins.last().is_some_and(|c| !c.is_empty() && c.iter().all(|v| v.is_nan()));
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(File::open(path)?)
    }
}

/// Safety and stability summary of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `min_i h_i(x(t))` per row.
    #[serde(skip)]
    pub min_h: Vec<f64>,
    /// `V(x(t))` per row.
    #[serde(skip)]
    pub lyapunov: Vec<f64>,
    pub min_h_min: f64,
    #[serde(rename = "V_final")]
    pub v_final: f64,
    /// Rows with some `h_i < 0`.
    pub violations: usize,
    /// Steps where `V` grew by more than [`V_INCREASE_TOL`].
    #[serde(rename = "V_increase_count")]
    pub v_increases: usize,
    pub final_norm: f64,
}

pub fn metrics(trajectory: &Trajectory, problem: &ControlProblem) -> Metrics {
    let min_h: Vec<f64> = trajectory.states.iter().map(|x| problem.min_barrier(x)).collect();
    let lyapunov: Vec<f64> = trajectory.states.iter().map(|x| problem.lyapunov(x)).collect();
    Metrics {
        min_h_min: min_h.iter().copied().fold(f64::INFINITY, f64::min),
        v_final: lyapunov.last().copied().unwrap_or(f64::NAN),
        violations: min_h.iter().filter(|h| **h < 0.0).count(),
        v_increases: lyapunov.windows(2).filter(|w| w[1] > w[0] + V_INCREASE_TOL).count(),
        final_norm: trajectory.final_state().map_or(f64::NAN, |x| x.norm()),
        min_h,
        lyapunov,
    }
}

//! Paired per-call timing of controllers.
//!
//! Every controller is timed on the same state sequence, collected from
//! sample-and-hold `u*` trajectories, and is also run in its own closed loop
//! from the same initial states for the safety and convergence columns.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::{metrics, simulate, ControlProblem, Controller, ExactController, Mode, Warmstart};
use crate::solver::{u_star, SolverOptions};

/// Calls discarded before timing starts.
pub const WARMUP_CALLS: usize = 10;
const MAX_STATE_DRAWS: usize = 100_000;

pub type ControllerFactory = Box<dyn Fn() -> Box<dyn Controller + Send> + Send + Sync>;

/// A controller under test. The factory gives a fresh instance per run, so
/// stateful warmstarts start clean.
pub struct BenchController {
    pub name: String,
    pub make: ControllerFactory,
}

impl BenchController {
    pub fn new<C, F>(name: impl Into<String>, make: F) -> Self
    where
        C: Controller + Send + 'static,
        F: Fn() -> C + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            make: Box::new(move || Box::new(make())),
        }
    }
}

impl fmt::Debug for BenchController {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BenchController").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    /// Number of initial states.
    pub samples: usize,
    pub seed: u64,
    /// Initial states are drawn uniformly from `[-half_width, half_width]^n`.
    pub half_width: f64,
    /// Initial states keep every barrier above this.
    pub min_barrier: f64,
    pub t_final: f64,
    pub dt: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            samples: 4,
            seed: 0,
            half_width: 5.0,
            min_barrier: 0.5,
            t_final: 2.0,
            // u* can have gains of a few hundred, too stiff for holding over 1e-2
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub name: String,
    pub calls: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub mean_iterations: f64,
    pub median_iterations: f64,
    /// Closed-loop rows with some barrier negative, summed over runs.
    pub violations: usize,
    /// Closed-loop runs that stopped on an error.
    pub failures: usize,
    /// Mean `|x(T)|` over the runs that finished.
    pub final_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub initial_states: Vec<Vec<f64>>,
    pub environment: String,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>7} {:>22} {:>11} {:>9} {:>10} {:>8} {:>10}",
            "controller", "calls", "time ms (mean ± std)", "median ms", "mean its", "violations", "failures", "final |x|"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:>7} {:>22} {:>11.4} {:>9.2} {:>10} {:>8} {:>10.3e}",
                r.name,
                r.calls,
                format!("{:.4} ± {:.4}", r.mean_ms, r.std_ms),
                r.median_ms,
                r.mean_iterations,
                r.violations,
                r.failures,
                r.final_norm
            )?;
        }
        write!(f, "{}", self.environment)
    }
}

/// Seeded initial states where every barrier exceeds `min_barrier` and `u*`
/// converges.
pub fn initial_states(problem: &ControlProblem, config: &BenchConfig) -> Result<Vec<DVector<f64>>> {
    let n = problem.system.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut states = Vec::with_capacity(config.samples);
    let opts = SolverOptions::default();
    for _ in 0..MAX_STATE_DRAWS {
        if states.len() == config.samples {
            return Ok(states);
        }
        let x = DVector::from_fn(n, |_, _| rng.random_range(-config.half_width..=config.half_width));
        if problem.min_barrier(&x) <= config.min_barrier {
            continue;
        }
        if matches!(u_star(problem, &x, &opts, None), Ok(res) if res.converged()) {
            states.push(x);
        }
    }
    Err(Error::contract(format!(
        "found only {} of {} admissible initial states in {MAX_STATE_DRAWS} draws",
        states.len(),
        config.samples
    )))
}

/// The states visited by sample-and-hold `u*` from each initial state.
pub fn state_sequence(problem: &ControlProblem, starts: &[DVector<f64>], config: &BenchConfig) -> Result<Vec<DVector<f64>>> {
    let runs: Vec<Vec<DVector<f64>>> = starts
        .par_iter()
        .map(|x0| {
            let mut exact = ExactController::new(problem.clone(), SolverOptions::default(), Warmstart::Previous);
            let sim = simulate(problem, &mut exact, x0, config.t_final, config.dt, Mode::SampleAndHold)?;
            let mut states = sim.into_result()?.states;
            // the halted row has no defined u*
            states.retain(|x| x.norm() >= crate::sim::HALT_NORM);
            Ok(states)
        })
        .collect::<Result<_>>()?;
    Ok(runs.into_iter().flatten().collect())
}

/// Per-call timings of one controller over `states`, after [`WARMUP_CALLS`]
/// discarded calls. Returns milliseconds and iteration counts.
pub fn time_calls(controller: &mut dyn Controller, states: &[DVector<f64>]) -> Result<(Vec<f64>, Vec<usize>)> {
    for x in states.iter().cycle().take(WARMUP_CALLS.min(states.len())) {
        controller.control(x)?;
    }
    let mut ms = Vec::with_capacity(states.len());
    let mut iterations = Vec::with_capacity(states.len());
    for x in states {
        let started = Instant::now();
        let out = controller.control(x)?;
        ms.push(started.elapsed().as_secs_f64() * 1e3);
        iterations.push(out.iterations);
    }
    Ok((ms, iterations))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Times and runs every controller. Timing is sequential; the closed-loop
/// runs fan out over the rayon pool.
pub fn run_bench(problem: &ControlProblem, controllers: &[BenchController], config: &BenchConfig) -> Result<BenchReport> {
    if config.samples == 0 {
        return Err(Error::contract("need at least one sample"));
    }
    if controllers.is_empty() {
        return Err(Error::contract("no controllers to benchmark"));
    }
    let starts = initial_states(problem, config)?;
    let states = state_sequence(problem, &starts, config)?;

    let mut rows = Vec::with_capacity(controllers.len());
    for entry in controllers {
        let mut controller = (entry.make)();
        let (ms, iterations) = time_calls(controller.as_mut(), &states)?;
        let (mean_ms, std_ms) = mean_std(&ms);
        let iterations: Vec<f64> = iterations.into_iter().map(|i| i as f64).collect();

        let runs: Vec<Option<(usize, f64)>> = starts
            .par_iter()
            .map(|x0| {
                let mut controller = (entry.make)();
                let sim = simulate(problem, controller.as_mut(), x0, config.t_final, config.dt, Mode::SampleAndHold).ok()?;
                let metrics = metrics(&sim.trajectory, problem);
                sim.failure.is_none().then_some((metrics.violations, metrics.final_norm))
            })
            .collect();
        let finished: Vec<(usize, f64)> = runs.iter().flatten().copied().collect();
        rows.push(BenchRow {
            name: entry.name.clone(),
            calls: ms.len(),
            mean_ms,
            std_ms,
            median_ms: median(&ms),
            mean_iterations: mean_std(&iterations).0,
            median_iterations: median(&iterations),
            violations: finished.iter().map(|r| r.0).sum(),
            failures: runs.len() - finished.len(),
            final_norm: finished.iter().map(|r| r.1).sum::<f64>() / finished.len() as f64,
        });
    }

    Ok(BenchReport {
        rows,
        initial_states: starts.iter().map(|x| x.as_slice().to_vec()).collect(),
        environment: environment_note(),
    })
}

fn environment_note() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "times are wall-clock per call on {} {} with {} core(s), {} rayon thread(s); absolute values depend on the hardware",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cores,
        rayon::current_num_threads()
    )
}

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::params::{find_interior_point, scale_params, ConstraintParams, ScaledParams, DEFAULT_FEAS_BUDGET};
use crate::sim::ControlProblem;
use crate::solver::{solve_gradient_flow, solve_scaled, SolveStatus, SolverOptions};

/// Draws inspected before a full run to detect hopeless `(N, m)` combinations.
const PROBE_DRAWS: usize = 400;
const MIN_ACCEPTANCE: f64 = 0.01;
/// Draws attempted per row before giving up.
const MAX_DRAWS_PER_ROW: usize = 100_000;
/// Factor on `label_tol / lambda_min` allowed between the flow label and the
/// Newton minimizer.
const LABEL_SLACK: f64 = 2.0;

/// Sidecar metadata stored next to the CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "N")]
    pub n_constraints: usize,
    pub m: usize,
    pub seed: u64,
    pub count: usize,
    pub label_tol: f64,
}

/// Rows of flattened scaled parameters `q` with minimizer labels `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    features: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, features: Vec<Vec<f64>>, labels: Vec<Vec<f64>>) -> Result<Self> {
        let d = ScaledParams::flat_dim(meta.n_constraints, meta.m);
        if features.len() != labels.len() {
            return Err(Error::Schema(format!("{} feature rows but {} label rows", features.len(), labels.len())));
        }
        if let Some(i) = features.iter().position(|f| f.len() != d) {
            return Err(Error::Schema(format!("row {i} has {} features, expected {d}", features[i].len())));
        }
        if let Some(i) = labels.iter().position(|k| k.len() != meta.m) {
            return Err(Error::Schema(format!("row {i} has {} labels, expected {}", labels[i].len(), meta.m)));
        }
        let meta = DatasetMeta {
            count: features.len(),
            ..meta
        };
        Ok(Self { meta, features, labels })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn n_constraints(&self) -> usize {
        self.meta.n_constraints
    }

    pub fn input_dim(&self) -> usize {
        self.meta.m
    }

    pub fn feature_dim(&self) -> usize {
        ScaledParams::flat_dim(self.meta.n_constraints, self.meta.m)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[Vec<f64>] {
        &self.labels
    }

    /// Scaled parameters of row `i`.
    pub fn params(&self, i: usize) -> Result<ScaledParams> {
        ScaledParams::from_flat(self.meta.n_constraints, self.meta.m, &self.features[i])
    }

    /// Selected rows as column matrices `(feature_dim x n, m x n)`.
    pub fn columns(&self, rows: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(self.feature_dim(), rows.len(), |i, j| self.features[rows[j]][i]);
        let y = DMatrix::from_fn(self.meta.m, rows.len(), |i, j| self.labels[rows[j]][i]);
        (x, y)
    }

    /// Writes `path` and the sidecar `<stem>.meta.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let d = self.feature_dim();
        let header: Vec<String> = (0..d)
            .map(|i| format!("q_{i}"))
            .chain((0..self.meta.m).map(|i| format!("k_{i}")))
            .collect();
        writer.write_record(&header)?;
        for (q, k) in self.features.iter().zip(&self.labels) {
            writer.write_record(q.iter().chain(k.iter()).map(|v| v.to_string()))?;
        }
        writer.flush()?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::save`] together with its sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = sidecar_path(path);
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let d = ScaledParams::flat_dim(meta.n_constraints, meta.m);
        let mut reader = csv::Reader::from_path(path)?;
        let header = reader.headers()?.clone();
        let expected: Vec<String> = (0..d)
            .map(|i| format!("q_{i}"))
            .chain((0..meta.m).map(|i| format!("k_{i}")))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Schema(format!(
                "header has {} columns, expected q_0..q_{} and k_0..k_{} for N = {}, m = {}",
                header.len(),
                d - 1,
                meta.m - 1,
                meta.n_constraints,
                meta.m
            )));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let mut values = Vec::with_capacity(d + meta.m);
            for (col, field) in record.iter().enumerate() {
                values.push(field.trim().parse::<f64>().map_err(|e| Error::Parse {
                    location: format!("line {line} column {}", col + 1),
                    message: format!("{field:?}: {e}"),
                })?);
            }
            labels.push(values.split_off(d));
            features.push(values);
        }
        if features.len() != meta.count {
            return Err(Error::Schema(format!(
                "sidecar announces {} rows but the file has {}",
                meta.count,
                features.len()
            )));
        }
        Self::new(meta, features, labels)
    }
}

/// `data.csv` -> `data.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

/// Uniform point of the closed unit ball in `R^m`.
fn unit_ball(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    let g = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = g.norm();
    if norm == 0.0 {
        return g;
    }
    let radius = rng.random::<f64>().powf(1.0 / m as f64);
    g * (radius / norm)
}

/// Draw from `[-1,1]^N x (unit ball)^N x [0,1]`.
fn draw(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Result<ScaledParams> {
    let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
    let mut b = DMatrix::zeros(n, m);
    for i in 0..n {
        b.set_row(i, &unit_ball(rng, m).transpose());
    }
    let r = rng.random_range(0.0..=1.0);
    ScaledParams::new(ConstraintParams::new(a, b)?, r)
}

fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

/// Flow label for `q`, cross-checked against Newton. `None` if the draw is
/// unusable (infeasible, degenerate or unconverged).
fn label(q: &ScaledParams, label_tol: f64) -> Result<Option<Vec<f64>>> {
    if find_interior_point(q.base(), DEFAULT_FEAS_BUDGET).is_err() {
        return Ok(None);
    }
    let newton = match solve_scaled(q, &SolverOptions::default(), None) {
        Ok(res) if res.status == SolveStatus::Converged => res,
        Ok(_) => return Ok(None),
        Err(err) if err.is_infeasible() => return Ok(None),
        Err(err) => return Err(err),
    };
    let flow = match solve_gradient_flow(Objective::scaled(q), label_tol, None) {
        Ok(flow) => flow,
        Err(err) if err.is_infeasible() => return Ok(None),
        Err(err) => return Err(err),
    };
    if flow.status != SolveStatus::Converged {
        return Ok(None);
    }
    // |grad| <= tol puts the flow within about tol / lambda_min of the minimizer
    let lambda_min = Objective::scaled(q).hessian(&newton.k_star)?.symmetric_eigenvalues().min();
    let allowed = LABEL_SLACK * label_tol / lambda_min + 1e-9;
    let gap = (&flow.k_star - &newton.k_star).norm();
    if !(gap <= allowed) {
        return Err(Error::contract(format!(
            "gradient-flow label is {gap:e} from the Newton minimizer, more than the {allowed:e} its tolerance allows"
        )));
    }
    Ok(Some(flow.k_star.as_slice().to_vec()))
}

/// Rejection-samples `count` labelled rows from the training box.
///
/// Row `i` uses its own stream `(seed, i)`, so the result does not depend on
/// the thread count. Labels come from the gradient flow at `label_tol`.
pub fn sample_dataset(n: usize, m: usize, count: usize, seed: u64, label_tol: f64) -> Result<Dataset> {
    if count == 0 || n == 0 || m == 0 {
        return Err(Error::contract("count, N and m must all be positive"));
    }
    if !(label_tol > 0.0) {
        return Err(Error::contract(format!("label tolerance must be positive, got {label_tol}")));
    }
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut feasible = 0;
    for _ in 0..PROBE_DRAWS {
        let q = draw(&mut probe, n, m)?;
        if find_interior_point(q.base(), DEFAULT_FEAS_BUDGET).is_ok() {
            feasible += 1;
        }
    }
    if (feasible as f64) < MIN_ACCEPTANCE * PROBE_DRAWS as f64 {
        return Err(Error::contract(format!(
            "only {feasible} of {PROBE_DRAWS} probe draws are strictly feasible for N = {n}, m = {m}"
        )));
    }

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = row_rng(seed, i);
            for _ in 0..MAX_DRAWS_PER_ROW {
                let q = draw(&mut rng, n, m)?;
                if let Some(k) = label(&q, label_tol)? {
                    return Ok((q.to_flat(), k));
                }
            }
            Err(Error::contract(format!("row {i}: no usable draw in {MAX_DRAWS_PER_ROW} attempts")))
        })
        .collect::<Result<_>>()?;
    let (features, labels) = rows.into_iter().unzip();
    Dataset::new(
        DatasetMeta {
            n_constraints: n,
            m,
            seed,
            count,
            label_tol,
        },
        features,
        labels,
    )
}

/// Rows built from states of a control problem: states uniform in
/// `[-half_width, half_width]^n` with every barrier positive, features
/// `q(p(x))`, labels the minimizer.
pub fn sample_state_dataset(
    problem: &ControlProblem,
    half_width: f64,
    count: usize,
    seed: u64,
    label_tol: f64,
) -> Result<Dataset> {
    if count == 0 || !(half_width > 0.0) {
        return Err(Error::contract("count and half width must be positive"));
    }
    let n = problem.system.state_dim();
    let probe = problem.constraints(&DVector::from_element(n, half_width))?;
    let (n_constraints, m) = (probe.n_constraints(), probe.input_dim());
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = row_rng(seed, i);
            for _ in 0..MAX_DRAWS_PER_ROW {
                let x = DVector::from_fn(n, |_, _| rng.random_range(-half_width..=half_width));
                if !(problem.min_barrier(&x) > 0.0) {
                    continue;
                }
                let (q, _) = scale_params(&problem.constraints(&x)?);
                if let Some(k) = label(&q, label_tol)? {
                    return Ok((q.to_flat(), k));
                }
            }
            Err(Error::contract(format!("row {i}: no usable state in {MAX_DRAWS_PER_ROW} attempts")))
        })
        .collect::<Result<_>>()?;
    let (features, labels) = rows.into_iter().unzip();
    Dataset::new(
        DatasetMeta {
            n_constraints,
            m,
            seed,
            count,
            label_tol,
        },
        features,
        labels,
    )
}

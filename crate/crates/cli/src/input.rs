//! Parsing of inline numbers, problem files and file paths.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use unisafe::ConstraintParams;

use crate::error::{CliError, CliResult, EXIT_MISSING};

/// Comma-separated reals, e.g. `-1,2.5`.
pub fn parse_list(flag: &str, text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|item| {
            let item = item.trim();
            item.parse::<f64>()
                .map_err(|_| CliError::usage(format!("{flag}: '{item}' is not a number")))
        })
        .collect()
}

/// Rows separated by `;`, entries by `,`, e.g. `1,0;0,-1`.
pub fn parse_rows(flag: &str, text: &str) -> CliResult<Vec<Vec<f64>>> {
    text.split(';').map(|row| parse_list(flag, row)).collect()
}

#[derive(Deserialize)]
struct ProblemFile {
    #[serde(rename = "A")]
    a: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
}

/// Constraint tuple from `--A`/`--B` or from `--problem`, which is either
/// inline JSON `{"A": [...], "B": [[...], ...]}` or a path to such a file.
pub fn constraint_params(a: Option<&str>, b: Option<&str>, problem: Option<&str>) -> CliResult<ConstraintParams> {
    let (a, b) = match (a, b, problem) {
        (Some(a), Some(b), None) => (parse_list("--A", a)?, parse_rows("--B", b)?),
        (None, None, Some(problem)) => {
            let text = if problem.trim_start().starts_with('{') {
                problem.to_string()
            } else {
                std::fs::read_to_string(existing(problem)?)?
            };
            let file: ProblemFile = serde_json::from_str(&text).map_err(|e| CliError {
                code: crate::error::EXIT_DATA,
                message: format!("problem JSON: {e}"),
            })?;
            (file.a, file.b)
        }
        _ => return Err(CliError::usage("give either both --A and --B, or --problem")),
    };
    if a.len() != b.len() {
        return Err(CliError::usage(format!("--A has {} entries but --B has {} rows", a.len(), b.len())));
    }
    let m = b.first().map_or(0, Vec::len);
    if m == 0 || b.iter().any(|row| row.len() != m) {
        return Err(CliError::usage("--B rows must be nonempty and of equal length"));
    }
    let b = DMatrix::from_fn(a.len(), m, |i, j| b[i][j]);
    ConstraintParams::new(DVector::from_vec(a), b).map_err(|e| CliError::usage(e.to_string()))
}

/// The path, or exit code 66 if nothing is there.
pub fn existing(path: impl AsRef<Path>) -> CliResult<PathBuf> {
    let path = path.as_ref();
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError {
            code: EXIT_MISSING,
            message: format!("no such file: {}", path.display()),
        })
    }
}

/// `dir/name.csv` -> `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

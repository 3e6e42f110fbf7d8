//! Constraint tuples `p = (A_1..A_N, B_1..B_N)`, strict-feasibility search and
//! the scaling map `q(p) = (p / M, 1 / M^2)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default tolerance separating "strictly feasible" from "ambiguous".
pub const DEFAULT_FEAS_TOL: f64 = 1e-9;
/// Default per-stage iteration cap of the feasibility search.
pub const DEFAULT_FEAS_BUDGET: usize = 500;

const SMOOTHING_SCHEDULE: [f64; 3] = [1.0, 10.0, 100.0];
const SCALE_SLACK: f64 = 1e-12;

/// Affine input constraints `A_i + B_i^T u < 0`.
///
/// The normals are stored as the rows of an `N x m` matrix so that all
/// margins are a single matrix-vector product.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintParams {
    a: DVector<f64>,
    b: DMatrix<f64>,
}

impl ConstraintParams {
    pub fn new(a: DVector<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.is_empty() || b.ncols() == 0 {
            return Err(Error::contract("need at least one constraint and one input"));
        }
        if b.nrows() != a.len() {
            return Err(Error::contract(format!(
                "{} offsets but {} normal rows",
                a.len(),
                b.nrows()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("constraint parameters".into()));
        }
        Ok(Self { a, b })
    }

    /// Builds from per-constraint rows: `a[i]` and `b[i]` (length m each).
    pub fn from_rows(a: &[f64], b: &[Vec<f64>]) -> Result<Self> {
        let m = b.first().map_or(0, Vec::len);
        if b.iter().any(|row| row.len() != m) {
            return Err(Error::contract("normals have inconsistent lengths"));
        }
        let flat: Vec<f64> = b.iter().flatten().copied().collect();
        Self::new(
            DVector::from_column_slice(a),
            DMatrix::from_row_slice(b.len(), m, &flat),
        )
    }

    pub fn n_constraints(&self) -> usize {
        self.a.len()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Offsets `A_1..A_N`.
    pub fn offsets(&self) -> &DVector<f64> {
        &self.a
    }

    /// Normals as rows, `B_i^T` is row i.
    pub fn normals(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn normal(&self, i: usize) -> DVector<f64> {
        self.b.row(i).transpose()
    }

    /// `max(|A_i|, |B_i|, 1)`.
    pub fn scale_factor(&self) -> f64 {
        let a_max = self.a.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        self.b
            .row_iter()
            .fold(a_max, |acc, row| acc.max(row.norm()))
    }

    /// Margins `A_i + B_i^T u`.
    pub fn margins(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(u)?;
        Ok(&self.a + &self.b * u)
    }

    pub fn max_margin(&self, u: &DVector<f64>) -> Result<f64> {
        Ok(self.margins(u)?.max())
    }

    pub(crate) fn check_input(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "input has length {} but constraints act on R^{}",
                u.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Parameters divided componentwise by `factor`.
    pub fn divided_by(&self, factor: f64) -> Self {
        Self {
            a: &self.a / factor,
            b: &self.b / factor,
        }
    }
}

/// A point on the bounded training box: normalized constraints plus `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledParams {
    base: ConstraintParams,
    r: f64,
}

impl ScaledParams {
    pub fn new(base: ConstraintParams, r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::contract(format!("r = {r} is outside [0, 1]")));
        }
        let too_big = base.a.iter().any(|v| v.abs() > 1.0 + SCALE_SLACK)
            || base.b.row_iter().any(|row| row.norm() > 1.0 + SCALE_SLACK);
        if too_big {
            return Err(Error::contract("scaled parameters must lie in the unit box"));
        }
        Ok(Self { base, r })
    }

    pub fn base(&self) -> &ConstraintParams {
        &self.base
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// Width of the flattened representation, `N (m + 1) + 1`.
    pub fn flat_dim(n_constraints: usize, input_dim: usize) -> usize {
        n_constraints * (input_dim + 1) + 1
    }

    /// Flattened as `(A_1..A_N, B_1..B_N, r)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let n = self.base.n_constraints();
        let mut out = Vec::with_capacity(Self::flat_dim(n, self.base.input_dim()));
        out.extend(self.base.a.iter());
        for row in self.base.b.row_iter() {
            out.extend(row.iter());
        }
        out.push(self.r);
        out
    }

    pub fn from_flat(n_constraints: usize, input_dim: usize, flat: &[f64]) -> Result<Self> {
        let d = Self::flat_dim(n_constraints, input_dim);
        if flat.len() != d {
            return Err(Error::contract(format!(
                "flat parameter vector has length {}, expected {d}",
                flat.len()
            )));
        }
        let a = DVector::from_column_slice(&flat[..n_constraints]);
        let b = DMatrix::from_row_slice(n_constraints, input_dim, &flat[n_constraints..d - 1]);
        Self::new(ConstraintParams::new(a, b)?, flat[d - 1])
    }
}

/// Witness that the open polytope is nonempty.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityCertificate {
    pub interior_point: DVector<f64>,
    /// `max_i (A_i + B_i^T u_0)`, always negative.
    pub margin: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FeasibilityOptions {
    /// Iteration cap per smoothing stage.
    pub budget: usize,
    pub feas_tol: f64,
}

impl Default for FeasibilityOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_FEAS_BUDGET,
            feas_tol: DEFAULT_FEAS_TOL,
        }
    }
}

/// Searches for `u` with all margins below `-feas_tol`.
pub fn find_interior_point(p: &ConstraintParams, budget: usize) -> Result<FeasibilityCertificate> {
    find_interior_point_with(
        p,
        &FeasibilityOptions {
            budget,
            ..FeasibilityOptions::default()
        },
    )
}

/// Feasibility search by descent on the log-sum-exp surrogate
/// `phi_beta(u) = log(sum_i exp(beta (A_i + B_i^T u))) / beta` with `beta`
/// running over 1, 10, 100.
///
/// Every candidate is checked against the exact max-margin, so a returned
/// certificate is always valid. The search starts at `-sum_i B_i` and then at
/// the origin.
pub fn find_interior_point_with(
    p: &ConstraintParams,
    opts: &FeasibilityOptions,
) -> Result<FeasibilityCertificate> {
    let tol = opts.feas_tol;
    // Zero normals do not depend on u.
    for (i, a) in p.a.iter().enumerate() {
        if p.b.row(i).iter().all(|v| *v == 0.0) && *a >= -tol {
            return Err(if *a > tol {
                Error::Infeasible { max_margin: *a }
            } else {
                Error::Indeterminate { max_margin: *a }
            });
        }
    }

    let m = p.input_dim();
    let heuristic = -p.b.row_sum().transpose();
    let normalized = row_normalized(p);
    let mut best = f64::INFINITY;
    for start in [heuristic, DVector::zeros(m)] {
        match descend(p, &normalized, start, opts) {
            Ok(cert) => return Ok(cert),
            Err(max_margin) => best = best.min(max_margin),
        }
    }
    if best > tol {
        Err(Error::Infeasible { max_margin: best })
    } else {
        Err(Error::Indeterminate { max_margin: best })
    }
}

/// Each row divided by `|(A_i, B_i)|`, so that rows of very different size
/// count equally. Margin signs are unchanged.
pub fn row_normalized(p: &ConstraintParams) -> ConstraintParams {
    let mut q = p.clone();
    for i in 0..p.n_constraints() {
        let size = (p.a[i] * p.a[i] + p.b.row(i).norm_squared()).sqrt();
        if size > 0.0 {
            q.a[i] /= size;
            q.b.row_mut(i).unscale_mut(size);
        }
    }
    q
}

/// Descends the surrogate of `normalized` while checking the exact margins of
/// `p`. Returns the certificate, or the best exact max-margin seen.
fn descend(
    p: &ConstraintParams,
    normalized: &ConstraintParams,
    mut u: DVector<f64>,
    opts: &FeasibilityOptions,
) -> std::result::Result<FeasibilityCertificate, f64> {
    let tol = opts.feas_tol;
    let exact = |u: &DVector<f64>| (&p.a + &p.b * u).max();
    let mut best = exact(&u);
    if best < -tol {
        return Ok(FeasibilityCertificate {
            interior_point: u,
            margin: best,
        });
    }
    let q = normalized;
    let mut margins = &q.a + &q.b * &u;
    for beta in SMOOTHING_SCHEDULE {
        let mut step = 1.0;
        let (mut phi, mut weights) = smoothed_max(&margins, beta);
        for _ in 0..opts.budget {
            let grad = q.b.tr_mul(&weights);
            let g2 = grad.norm_squared();
            if !(g2 > 1e-28) {
                break;
            }
            let mut accepted = false;
            while step > 1e-30 {
                let trial = &u - &grad * step;
                let trial_margins = &q.a + &q.b * &trial;
                let (trial_phi, trial_weights) = smoothed_max(&trial_margins, beta);
                if trial_phi.is_finite() && trial_phi <= phi - 1e-4 * step * g2 {
                    u = trial;
                    margins = trial_margins;
                    phi = trial_phi;
                    weights = trial_weights;
                    step *= 2.0;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            let current = exact(&u);
            best = best.min(current);
            if current < -tol {
                return Ok(FeasibilityCertificate {
                    interior_point: u,
                    margin: current,
                });
            }
        }
    }
    Err(best)
}

/// Log-sum-exp value and its softmax weights.
fn smoothed_max(margins: &DVector<f64>, beta: f64) -> (f64, DVector<f64>) {
    let top = margins.max();
    let mut weights = margins.map(|s| (beta * (s - top)).exp());
    let total = weights.sum();
    weights /= total;
    (top + total.ln() / beta, weights)
}

/// Maps `p` onto the training box: returns `(q, M)` with `q = (p / M, 1 / M^2)`
/// and `M = max(|A_i|, |B_i|, 1)`.
pub fn scale_params(p: &ConstraintParams) -> (ScaledParams, f64) {
    let m = p.scale_factor();
    let base = if m == 1.0 { p.clone() } else { p.divided_by(m) };
    (ScaledParams { base, r: 1.0 / (m * m) }, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(a: &[f64], b: &[&[f64]]) -> ConstraintParams {
        let rows: Vec<Vec<f64>> = b.iter().map(|r| r.to_vec()).collect();
        ConstraintParams::from_rows(a, &rows).unwrap()
    }

    #[test]
    fn margins_examples() {
        let p = params(&[-1.0], &[&[0.0]]);
        assert_eq!(p.margins(&DVector::from_vec(vec![5.0])).unwrap()[0], -1.0);

        let p = params(&[-1.0, -1.0], &[&[1.0], &[-1.0]]);
        let s = p.margins(&DVector::zeros(1)).unwrap();
        assert_eq!(s.as_slice(), &[-1.0, -1.0]);

        let p = params(&[0.0], &[&[1.0, 0.0]]);
        let s = p.margins(&DVector::from_vec(vec![-2.0, 7.0])).unwrap();
        assert_eq!(s[0], -2.0);
    }

    #[test]
    fn margins_reject_wrong_length() {
        let p = params(&[0.0], &[&[1.0, 0.0]]);
        assert!(matches!(
            p.margins(&DVector::zeros(3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(ConstraintParams::from_rows(&[f64::NAN], &[vec![1.0]]).is_err());
        assert!(ConstraintParams::from_rows(&[1.0, 2.0], &[vec![1.0]]).is_err());
        assert!(ConstraintParams::from_rows(&[], &[]).is_err());
    }

    #[test]
    fn interior_point_examples() {
        let p = params(&[-1.0, -1.0], &[&[1.0], &[-1.0]]);
        let cert = find_interior_point(&p, 100).unwrap();
        assert!(cert.margin < 0.0);

        let p = params(&[1.0, 1.0], &[&[1.0], &[-1.0]]);
        assert!(matches!(
            find_interior_point(&p, 100),
            Err(Error::Infeasible { .. })
        ));

        let p = params(&[0.0], &[&[1.0, 0.0]]);
        let cert = find_interior_point(&p, 100).unwrap();
        let exact = p.max_margin(&cert.interior_point).unwrap();
        assert_eq!(exact, cert.margin);
        assert!(exact < 0.0);
    }

    #[test]
    fn zero_normal_rows_decide_directly() {
        let p = params(&[2.0, -1.0], &[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            find_interior_point(&p, 100),
            Err(Error::Infeasible { .. })
        ));
        let p = params(&[0.0, -1.0], &[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            find_interior_point(&p, 100),
            Err(Error::Indeterminate { .. })
        ));
    }

    #[test]
    fn thin_slab_is_found() {
        // -1e-3 < u < 0 in the first coordinate
        let p = params(&[0.0, -1e-3], &[&[1.0, 0.0], &[-1.0, 0.0]]);
        let cert = find_interior_point(&p, 500).unwrap();
        assert!(cert.margin < -DEFAULT_FEAS_TOL);
    }

    #[test]
    fn boundary_system_is_indeterminate() {
        // u <= 0 and u >= 0: only the boundary point
        let p = params(&[0.0, 0.0], &[&[1.0], &[-1.0]]);
        assert!(matches!(
            find_interior_point(&p, 200),
            Err(Error::Indeterminate { .. })
        ));
    }

    #[test]
    fn scaling_examples() {
        let p = params(&[-0.5, 0.25], &[&[0.6, 0.8], &[0.0, -0.1]]);
        let (q, m) = scale_params(&p);
        assert_eq!(m, 1.0);
        assert_eq!(q.r(), 1.0);
        assert_eq!(q.base(), &p);

        let p = params(&[-4.0], &[&[2.0]]);
        let (q, m) = scale_params(&p);
        assert_eq!(m, 4.0);
        assert_eq!(q.base().offsets()[0], -1.0);
        assert_eq!(q.base().normals()[(0, 0)], 0.5);
        assert_eq!(q.r(), 1.0 / 16.0);
    }

    #[test]
    fn flat_layout_round_trips() {
        let p = params(&[-0.5, 0.25], &[&[0.6, 0.8], &[0.0, -0.1]]);
        let q = ScaledParams::new(p, 0.3).unwrap();
        let flat = q.to_flat();
        assert_eq!(flat, vec![-0.5, 0.25, 0.6, 0.8, 0.0, -0.1, 0.3]);
        assert_eq!(ScaledParams::from_flat(2, 2, &flat).unwrap(), q);
        assert!(ScaledParams::from_flat(2, 2, &flat[..6]).is_err());
    }

    #[test]
    fn scaled_params_validate_box() {
        let p = params(&[-2.0], &[&[0.5]]);
        assert!(ScaledParams::new(p.clone(), 0.5).is_err());
        let p = params(&[-1.0], &[&[0.5]]);
        assert!(ScaledParams::new(p.clone(), 1.5).is_err());
        assert!(ScaledParams::new(p, 0.0).is_ok());
    }

    fn arb_params(max_n: usize, max_m: usize) -> impl Strategy<Value = ConstraintParams> {
        (1..=max_n, 1..=max_m).prop_flat_map(|(n, m)| {
            (
                prop::collection::vec(-20.0..20.0f64, n),
                prop::collection::vec(-20.0..20.0f64, n * m),
            )
                .prop_map(move |(a, b)| {
                    ConstraintParams::new(
                        DVector::from_vec(a),
                        DMatrix::from_row_slice(n, m, &b),
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn certificates_are_strictly_interior(p in arb_params(6, 4)) {
            if let Ok(cert) = find_interior_point(&p, 300) {
                let s = p.margins(&cert.interior_point).unwrap();
                prop_assert!(s.iter().all(|v| *v < 0.0));
            }
        }

        #[test]
        fn single_nondegenerate_halfspace_is_feasible(
            a in -1e3..1e3f64,
            b in prop::collection::vec(-10.0..10.0f64, 1..5),
        ) {
            prop_assume!(b.iter().any(|v| v.abs() > 1e-6));
            let p = ConstraintParams::from_rows(&[a], &[b]).unwrap();
            prop_assert!(find_interior_point(&p, DEFAULT_FEAS_BUDGET).is_ok());
        }

        #[test]
        fn scaling_is_idempotent_and_sign_preserving(
            p in arb_params(5, 3),
            u in prop::collection::vec(-5.0..5.0f64, 3),
        ) {
            let (q, m) = scale_params(&p);
            prop_assert!(m >= 1.0);
            prop_assert!(q.r() > 0.0 && q.r() <= 1.0);
            prop_assert!(ScaledParams::new(q.base().clone(), q.r()).is_ok());
            let (_, m2) = scale_params(q.base());
            prop_assert!((m2 - 1.0).abs() < 1e-12);

            let u = DVector::from_column_slice(&u[..p.input_dim()]);
            let s = p.margins(&u).unwrap();
            let st = q.base().margins(&u).unwrap();
            for (x, y) in s.iter().zip(st.iter()) {
                prop_assert_eq!(x.partial_cmp(&0.0), y.partial_cmp(&0.0));
            }
        }
    }
}

//! The strictly convex objective `J_p`, its weighted variant `J_p^w` and the
//! scaled form `J~_q`, with analytic derivatives.
//!
//! All three are instances of
//!
//! ```text
//!     J(k) = - sum_i w_i (|B_i|^2 + r |k|^2) / (2 s_i),   s_i = A_i + B_i^T k
//! ```
//!
//! with `r = 1` and `w = 1` for the plain objective. Per term, with
//! `c_i = |B_i|^2 + r |k|^2`,
//!
//! ```text
//!     grad = sum_i w_i ( -r k / s_i + c_i B_i / (2 s_i^2) )
//!     hess = sum_i -w_i Gamma_i / s_i^3
//!     Gamma_i = r s_i^2 I - r s_i (k B_i^T + B_i k^T) + c_i B_i B_i^T
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::params::{ConstraintParams, ScaledParams};

/// Margins at or above this value count as the boundary.
pub const BOUNDARY_MARGIN: f64 = -1e-14;

/// Positive per-constraint weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(DVector<f64>);

impl WeightVector {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::contract("weights must be positive and finite"));
        }
        Ok(Self(w))
    }

    pub fn ones(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Value, gradient and (optionally) Hessian computed from one margin pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
    pub margins: DVector<f64>,
}

/// A view of `J` for fixed parameters.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    params: &'a ConstraintParams,
    r: f64,
    weights: Option<&'a WeightVector>,
}

impl<'a> Objective<'a> {
    /// `J_p`.
    pub fn unscaled(params: &'a ConstraintParams) -> Self {
        Self {
            params,
            r: 1.0,
            weights: None,
        }
    }

    /// `J~_q` on the training box.
    pub fn scaled(q: &'a ScaledParams) -> Self {
        Self {
            params: q.base(),
            r: q.r(),
            weights: None,
        }
    }

    pub fn with_weights(self, weights: &'a WeightVector) -> Result<Self> {
        if weights.0.len() != self.params.n_constraints() {
            return Err(Error::contract(format!(
                "{} weights for {} constraints",
                weights.0.len(),
                self.params.n_constraints()
            )));
        }
        Ok(Self {
            weights: Some(weights),
            ..self
        })
    }

    pub fn params(&self) -> &'a ConstraintParams {
        self.params
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w.0[i])
    }

    /// Margins at `k`, failing if any is on or past the boundary.
    pub fn interior_margins(&self, k: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self.params.margins(k)?;
        if let Some((index, margin)) = s
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v < BOUNDARY_MARGIN))
        {
            return Err(Error::OutsideDomain {
                index,
                margin: *margin,
            });
        }
        Ok(s)
    }

    pub fn value(&self, k: &DVector<f64>) -> Result<f64> {
        let s = self.interior_margins(k)?;
        Ok(self.value_from_margins(k, &s))
    }

    fn value_from_margins(&self, k: &DVector<f64>, s: &DVector<f64>) -> f64 {
        let rk2 = self.r * k.norm_squared();
        let b = self.params.normals();
        s.iter()
            .enumerate()
            .map(|(i, si)| {
                let c = b.row(i).norm_squared() + rk2;
                -self.weight(i) * c / (2.0 * si)
            })
            .sum()
    }

    pub fn gradient(&self, k: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(k, false)?.gradient)
    }

    pub fn hessian(&self, k: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self
            .evaluate(k, true)?
            .hessian
            .expect("hessian requested"))
    }

    /// Fused evaluation sharing one margin computation.
    pub fn evaluate(&self, k: &DVector<f64>, with_hessian: bool) -> Result<Evaluation> {
        let s = self.interior_margins(k)?;
        let m = k.len();
        let r = self.r;
        let k2 = k.norm_squared();
        let b = self.params.normals();

        let mut value = 0.0;
        let mut gradient = DVector::zeros(m);
        let mut hessian = with_hessian.then(|| DMatrix::zeros(m, m));
        for (i, &si) in s.iter().enumerate() {
            let w = self.weight(i);
            let bi = b.row(i).transpose();
            let c = bi.norm_squared() + r * k2;
            value -= w * c / (2.0 * si);
            gradient.axpy(-w * r / si, k, 1.0);
            gradient.axpy(w * c / (2.0 * si * si), &bi, 1.0);
            if let Some(h) = hessian.as_mut() {
                // -w Gamma / s^3, expanded term by term
                let s3 = si * si * si;
                for d in 0..m {
                    h[(d, d)] -= w * r / si;
                }
                h.ger(w * r / (si * si), k, &bi, 1.0);
                h.ger(w * r / (si * si), &bi, k, 1.0);
                h.ger(-w * c / s3, &bi, &bi, 1.0);
            }
        }
        Ok(Evaluation {
            value,
            gradient,
            hessian,
            margins: s,
        })
    }
}

/// `J_p(k)`.
pub fn eval_j(p: &ConstraintParams, k: &DVector<f64>) -> Result<f64> {
    Objective::unscaled(p).value(k)
}

/// `J~_q(k)`.
pub fn eval_j_scaled(q: &ScaledParams, k: &DVector<f64>) -> Result<f64> {
    Objective::scaled(q).value(k)
}

/// `J_p^w(k)`.
pub fn eval_j_weighted(p: &ConstraintParams, w: &WeightVector, k: &DVector<f64>) -> Result<f64> {
    Objective::unscaled(p).with_weights(w)?.value(k)
}

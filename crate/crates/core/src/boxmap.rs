//! Smooth invertible maps between bounded physical parameters and an
//! unbounded search space, so that an unconstrained solver can respect
//! box constraints.
//!
//! | kind      | forward `theta = F(beta)`                     |
//! |-----------|-----------------------------------------------|
//! | two-sided | `(hi - lo)/2 * sin(pi beta / 2) + (hi + lo)/2` |
//! | lower     | `lo - 1 + sqrt(beta^2 + 1)`                   |
//! | upper     | `hi + 1 - sqrt(beta^2 + 1)`                   |
//!
//! Fixed entries carry no search variable: every function here walks the
//! spec list and skips them, so `beta` and `theta` only hold free entries.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundSpec {
    Fixed {
        value: f64,
    },
    /// `lo <= theta <= hi`
    TypeI {
        lo: f64,
        hi: f64,
    },
    /// `theta >= lo`
    TypeII {
        lo: f64,
    },
    /// `theta <= hi`
    TypeIII {
        hi: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("free parameter {index} = {value} lies outside its bound {spec:?}")]
    OutOfBounds { index: usize, value: f64, spec: BoundSpec },
    #[error("bound {index} is malformed: {spec:?}")]
    BadBounds { index: usize, spec: BoundSpec },
}

impl BoundSpec {
    pub fn is_fixed(&self) -> bool {
        matches!(self, BoundSpec::Fixed { .. })
    }

    pub fn is_well_formed(&self) -> bool {
        match *self {
            BoundSpec::Fixed { value } => value.is_finite(),
            BoundSpec::TypeI { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            BoundSpec::TypeII { lo } => lo.is_finite(),
            BoundSpec::TypeIII { hi } => hi.is_finite(),
        }
    }

    pub fn contains(&self, theta: f64) -> bool {
        match *self {
            BoundSpec::Fixed { value } => theta == value,
            BoundSpec::TypeI { lo, hi } => lo <= theta && theta <= hi,
            BoundSpec::TypeII { lo } => theta >= lo,
            BoundSpec::TypeIII { hi } => theta <= hi,
        }
    }

    pub fn lower(&self) -> f64 {
        match *self {
            BoundSpec::Fixed { value } => value,
            BoundSpec::TypeI { lo, .. } | BoundSpec::TypeII { lo } => lo,
            BoundSpec::TypeIII { .. } => f64::NEG_INFINITY,
        }
    }

    pub fn upper(&self) -> f64 {
        match *self {
            BoundSpec::Fixed { value } => value,
            BoundSpec::TypeI { hi, .. } | BoundSpec::TypeIII { hi } => hi,
            BoundSpec::TypeII { .. } => f64::INFINITY,
        }
    }

    fn forward_one(&self, beta: f64) -> f64 {
        match *self {
            BoundSpec::Fixed { value } => value,
            BoundSpec::TypeI { lo, hi } => {
                let theta = 0.5 * (hi - lo) * (FRAC_PI_2 * beta).sin() + 0.5 * (hi + lo);
                // Rounding in the affine map can step a hair outside.
                theta.clamp(lo, hi)
            }
            // sqrt(beta^2 + 1) - 1 written without the cancellation.
            BoundSpec::TypeII { lo } => lo + beta * beta / (beta.hypot(1.0) + 1.0),
            BoundSpec::TypeIII { hi } => hi - beta * beta / (beta.hypot(1.0) + 1.0),
        }
    }

    fn inverse_one(&self, theta: f64) -> Option<f64> {
        match *self {
            BoundSpec::Fixed { .. } => None,
            BoundSpec::TypeI { lo, hi } => {
                let s = (2.0 * theta - (hi + lo)) / (hi - lo);
                Some(s.clamp(-1.0, 1.0).asin() / FRAC_PI_2)
            }
            BoundSpec::TypeII { lo } => {
                let d = theta - lo;
                Some((d * (d + 2.0)).max(0.0).sqrt())
            }
            BoundSpec::TypeIII { hi } => {
                let d = hi - theta;
                Some((d * (d + 2.0)).max(0.0).sqrt())
            }
        }
    }

    fn derivative_one(&self, beta: f64) -> f64 {
        match *self {
            BoundSpec::Fixed { .. } => 0.0,
            BoundSpec::TypeI { lo, hi } => 0.5 * (hi - lo) * FRAC_PI_2 * (FRAC_PI_2 * beta).cos(),
            BoundSpec::TypeII { .. } => beta / beta.hypot(1.0),
            BoundSpec::TypeIII { .. } => -beta / beta.hypot(1.0),
        }
    }
}

fn free(specs: &[BoundSpec]) -> impl Iterator<Item = &BoundSpec> {
    specs.iter().filter(|s| !s.is_fixed())
}

pub fn free_count(specs: &[BoundSpec]) -> usize {
    free(specs).count()
}

pub fn check_specs(specs: &[BoundSpec]) -> Result<(), BoxError> {
    for (index, spec) in specs.iter().enumerate() {
        if !spec.is_well_formed() {
            return Err(BoxError::BadBounds { index, spec: *spec });
        }
    }
    Ok(())
}

/// Maps search variables to bounded parameters.
pub fn forward(beta: &[f64], specs: &[BoundSpec]) -> Vec<f64> {
    assert_eq!(beta.len(), free_count(specs), "beta length mismatch");
    free(specs).zip(beta).map(|(s, &b)| s.forward_one(b)).collect()
}

/// Maps bounded parameters to search variables on the principal branch
/// (two-sided entries land in `[-1, 1]`, one-sided in `[0, inf)`).
pub fn inverse(theta: &[f64], specs: &[BoundSpec]) -> Result<Vec<f64>, BoxError> {
    assert_eq!(theta.len(), free_count(specs), "theta length mismatch");
    free(specs)
        .zip(theta)
        .enumerate()
        .map(|(index, (spec, &value))| {
            if !value.is_finite() || !spec.contains(value) {
                return Err(BoxError::OutOfBounds {
                    index,
                    value,
                    spec: *spec,
                });
            }
            Ok(spec.inverse_one(value).expect("fixed entries are filtered"))
        })
        .collect()
}

/// Diagonal of `dF/dbeta`, analytic.
pub fn mapping_jacobian(beta: &[f64], specs: &[BoundSpec]) -> Vec<f64> {
    assert_eq!(beta.len(), free_count(specs), "beta length mismatch");
    free(specs).zip(beta).map(|(s, &b)| s.derivative_one(b)).collect()
}

/// Chain rule `dy/dbeta = dy/dtheta * diag(dF/dbeta)`: scales column `j` by
/// `j_map[j]`.
pub fn beta_sensitivity(s_theta: &DMatrix<f64>, j_map: &[f64]) -> DMatrix<f64> {
    assert_eq!(s_theta.ncols(), j_map.len(), "dimension mismatch");
    let mut out = s_theta.clone();
    for (j, &d) in j_map.iter().enumerate() {
        out.column_mut(j).scale_mut(d);
    }
    out
}

/// Moves search variables off the points where the map's derivative
/// vanishes (two-sided: odd integers; one-sided: zero), so the next
/// Jacobian keeps a usable direction. Returns indices that were moved.
pub fn nudge_stationary(beta: &mut [f64], specs: &[BoundSpec]) -> Vec<usize> {
    const WINDOW: f64 = 1e-9;
    const NUDGE: f64 = 1e-6;
    let mut moved = Vec::new();
    for (j, (b, spec)) in beta.iter_mut().zip(free(specs)).enumerate() {
        match spec {
            BoundSpec::TypeI { .. } => {
                let nearest_odd = 2.0 * ((*b - 1.0) / 2.0).round() + 1.0;
                if (*b - nearest_odd).abs() < WINDOW {
                    *b = nearest_odd - NUDGE * nearest_odd.signum();
                    moved.push(j);
                }
            }
            BoundSpec::TypeII { .. } | BoundSpec::TypeIII { .. } => {
                if b.abs() < WINDOW {
                    *b = NUDGE;
                    moved.push(j);
                }
            }
            BoundSpec::Fixed { .. } => {}
        }
    }
    moved
}

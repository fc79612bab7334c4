//! Geometry of the open Poincaré ball.
//!
//! All functions here are pure. Points are stored as plain coordinate
//! vectors; [`BallPoint`] only guarantees that its Euclidean norm is below 1.

use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};

/// Default retraction margin: updated points keep norm `<= 1 - EPS_BALL`.
pub const EPS_BALL: f64 = 1e-5;

/// Lower clamp for the `(1 - |x|^2)` factors.
const DENOM_FLOOR: f64 = 1e-12;

/// Points closer than this have no defined distance gradient.
const COINCIDENT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        let norm = norm(&coords);
        if !(norm < 1.0) {
            return Err(GowebError::OutsideBall { norm });
        }
        Ok(BallPoint(coords))
    }

    pub fn origin(dim: usize) -> Self {
        BallPoint(vec![0.0; dim])
    }

    pub(crate) fn from_vec_unchecked(coords: Vec<f64>) -> Self {
        debug_assert!(norm(&coords) < 1.0);
        BallPoint(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    pub dim: usize,
    pub eps_ball: f64,
    pub lr_rsgd: f64,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig { dim: 64, eps_ball: EPS_BALL, lr_rsgd: 0.3 }
    }
}

impl ManifoldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(GowebError::Config(format!("goal dimension must be >= 2, got {}", self.dim)));
        }
        if !(self.eps_ball > 0.0 && self.eps_ball < 0.01) {
            return Err(GowebError::Config(format!("eps_ball must lie in (0, 0.01), got {}", self.eps_ball)));
        }
        if !(self.lr_rsgd > 0.0) {
            return Err(GowebError::Config(format!("lr_rsgd must be positive, got {}", self.lr_rsgd)));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(u: &BallPoint, v: &BallPoint) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(GowebError::DimMismatch { expected: u.dim(), got: v.dim() });
    }
    Ok(())
}

/// Returns `(gamma - 1, alpha, beta)` where `gamma` is the arcosh argument.
fn distance_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let sq_u = dot(u, u);
    let sq_v = dot(v, v);
    let sq_diff: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    let alpha = (1.0 - sq_u).max(DENOM_FLOOR);
    let beta = (1.0 - sq_v).max(DENOM_FLOOR);
    (2.0 * sq_diff / (alpha * beta), alpha, beta)
}

/// Hyperbolic distance on raw coordinates; no invariant checks.
pub(crate) fn distance_raw(u: &[f64], v: &[f64]) -> f64 {
    let (gm1, _, _) = distance_parts(u, v);
    (1.0 + gm1).acosh()
}

/// Euclidean gradient of `d(u, v)` with respect to `u`, or `None` when the
/// points coincide.
pub(crate) fn distance_grad_raw(u: &[f64], v: &[f64]) -> Option<Vec<f64>> {
    let diff: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if diff < COINCIDENT_TOL {
        return None;
    }
    let (gm1, alpha, beta) = distance_parts(u, v);
    // sqrt(gamma^2 - 1) = sqrt((gamma - 1)(gamma + 1))
    let root = (gm1 * (gm1 + 2.0)).sqrt();
    let scale = 4.0 / (beta * root);
    let uv = dot(u, v);
    let sq_v = dot(v, v);
    let cu = (sq_v - 2.0 * uv + 1.0) / (alpha * alpha);
    let cv = 1.0 / alpha;
    Some(u.iter().zip(v).map(|(a, b)| scale * (cu * a - cv * b)).collect())
}

/// `d(u,v) = arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2)))`.
pub fn poincare_distance(u: &BallPoint, v: &BallPoint) -> Result<f64> {
    check_dims(u, v)?;
    for p in [u, v] {
        let n = p.norm();
        if !(n < 1.0) {
            return Err(GowebError::OutsideBall { norm: n });
        }
    }
    Ok(distance_raw(&u.0, &v.0))
}

/// Euclidean partial gradient of the distance with respect to `u`.
pub fn distance_gradient(u: &BallPoint, v: &BallPoint) -> Result<Vec<f64>> {
    check_dims(u, v)?;
    distance_grad_raw(&u.0, &v.0).ok_or(GowebError::CoincidentPoints)
}

/// Inverse-metric rescaling: `((1 - |x|^2)^2 / 4) * grad`.
pub fn riemannian_rescale(x: &BallPoint, euclid_grad: &[f64]) -> Result<Vec<f64>> {
    if x.dim() != euclid_grad.len() {
        return Err(GowebError::DimMismatch { expected: x.dim(), got: euclid_grad.len() });
    }
    Ok(rescale_raw(&x.0, euclid_grad))
}

pub(crate) fn rescale_raw(x: &[f64], grad: &[f64]) -> Vec<f64> {
    let factor = rescale_factor(norm(x));
    grad.iter().map(|g| factor * g).collect()
}

pub fn rescale_factor(radius: f64) -> f64 {
    let s = 1.0 - radius * radius;
    s * s / 4.0
}

/// Renormalizing retraction onto the closed ball of radius `1 - eps_ball`.
pub fn project_to_ball(x: &[f64], eps_ball: f64) -> BallPoint {
    BallPoint(project_raw(x.to_vec(), eps_ball))
}

pub(crate) fn project_raw(mut x: Vec<f64>, eps_ball: f64) -> Vec<f64> {
    let max_norm = 1.0 - eps_ball;
    let n = norm(&x);
    if n > max_norm {
        let s = max_norm / n;
        x.iter_mut().for_each(|v| *v *= s);
    }
    x
}

/// One Riemannian SGD update followed by projection.
pub fn rsgd_step(x: &BallPoint, euclid_grad: &[f64], lr: f64, eps_ball: f64) -> Result<BallPoint> {
    let step = riemannian_rescale(x, euclid_grad)?;
    let moved: Vec<f64> = x.0.iter().zip(&step).map(|(a, s)| a - lr * s).collect();
    Ok(BallPoint(project_raw(moved, eps_ball)))
}

//! Differentiable objectives in `f64`, and finite-difference routes used to
//! cross-check analytic gradients and Hessian-vector products.

use super::{engine, Architecture, Batch, ParamVector};
use crate::error::{Error, Result};
use crate::mask::PruneMask;

pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, theta: &[f64]) -> Result<f64>;

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;

    fn hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

/// Mean loss of a masked MLP on a fixed batch, as a function of its flat parameters.
pub struct MaskedLoss<'a> {
    arch: &'a Architecture,
    mask: &'a PruneMask,
    batch: &'a Batch,
}

impl<'a> MaskedLoss<'a> {
    pub fn new(arch: &'a Architecture, mask: &'a PruneMask, batch: &'a Batch) -> Self {
        Self { arch, mask, batch }
    }

    fn params(&self, theta: &[f64]) -> Result<ParamVector<f64>> {
        ParamVector::from_values(self.arch, theta.to_vec())
    }
}

impl Objective for MaskedLoss<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        engine::loss(&self.params(theta)?, self.mask, self.batch)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        engine::backward(&self.params(theta)?, self.mask, self.batch).map(ParamVector::into_values)
    }

    fn hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        engine::hvp(&self.params(theta)?, self.mask, self.batch, v)
    }
}

/// `L(θ) = ½ Σ aᵢ θᵢ²`, a separable quadratic with diagonal Hessian `diag(a)`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub diagonal: Vec<f64>,
}

impl Quadratic {
    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.diagonal.len() {
            return Err(Error::Shape(format!("expected {} entries, got {}", self.diagonal.len(), x.len())));
        }
        Ok(())
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.diagonal.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        Ok(0.5 * self.diagonal.iter().zip(theta).map(|(a, t)| a * t * t).sum::<f64>())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        Ok(self.diagonal.iter().zip(theta).map(|(a, t)| a * t).collect())
    }

    fn hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        self.check(v)?;
        Ok(self.diagonal.iter().zip(v).map(|(a, x)| a * x).collect())
    }
}

/// Central differences of the objective value, one coordinate at a time.
pub fn finite_difference_gradient(obj: &dyn Objective, theta: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let plus = obj.value(&probe)?;
        probe[i] = theta[i] - step;
        let minus = obj.value(&probe)?;
        probe[i] = theta[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// `(∇L(θ + εv) − ∇L(θ − εv)) / 2ε`.
pub fn finite_difference_hvp(obj: &dyn Objective, theta: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.len() != theta.len() {
        return Err(Error::Shape(format!("direction has {} entries, parameters {}", v.len(), theta.len())));
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = obj.gradient(&plus)?;
    let gm = obj.gradient(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// `max |a − b|` relative to `max |b|`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

//! Linear predictors, per-sample losses and their analytic derivatives.
//!
//! Every loss here is a function of the scalar prediction `u = θᵀx + b`, so
//! the derivatives with respect to `θ`, `x` and the mixed `∂(∇_θ ℓ)/∂x` all
//! follow from the first and second derivative of the loss in `u`:
//!
//! ```text
//! ∇_θ ℓ = ℓ'(u) x        ∇_x ℓ = ℓ'(u) θ
//! ∂(∇_θ ℓ)_a / ∂x_k = ℓ''(u) x_a θ_k + ℓ'(u) δ_ak
//! ```
//!
//! The intercept, when present, is part of the prediction but never part of
//! `x`, so it is neither perturbed nor weighted downstream.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Squared,
    Absolute,
    Logistic,
}

impl LossKind {
    /// Loss as a function of the prediction `u`.
    #[inline]
    pub fn value(self, u: f64, y: f64) -> f64 {
        match self {
            LossKind::Squared => (y - u) * (y - u),
            LossKind::Absolute => (y - u).abs(),
            // log(1 + e^u) - y u, written to stay finite for large |u|.
            LossKind::Logistic => softplus(u) - y * u,
        }
    }

    /// First derivative in `u`. The absolute loss uses the zero subgradient at
    /// an exactly zero residual.
    #[inline]
    pub fn d1(self, u: f64, y: f64) -> f64 {
        match self {
            LossKind::Squared => -2.0 * (y - u),
            LossKind::Absolute => {
                let r = y - u;
                if r > 0.0 {
                    -1.0
                } else if r < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LossKind::Logistic => sigmoid(u) - y,
        }
    }

    /// Second derivative in `u` (zero almost everywhere for the absolute loss).
    #[inline]
    pub fn d2(self, u: f64, _y: f64) -> f64 {
        match self {
            LossKind::Squared => 2.0,
            LossKind::Absolute => 0.0,
            LossKind::Logistic => {
                let s = sigmoid(u);
                s * (1.0 - s)
            }
        }
    }

    pub fn check_target(self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(SalError::NonFinite(format!("target {y}")));
        }
        if self == LossKind::Logistic && y != 0.0 && y != 1.0 {
            return Err(SalError::InvalidLabel(y));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Parameters of a linear predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub intercept: Option<f64>,
}

impl ModelParams {
    pub fn zeros(dim: usize, fit_intercept: bool) -> Self {
        Self {
            theta: vec![0.0; dim],
            intercept: fit_intercept.then_some(0.0),
        }
    }

    pub fn new(theta: Vec<f64>, intercept: Option<f64>) -> Result<Self> {
        let p = Self { theta, intercept };
        p.check_finite()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.theta.iter().all(|v| v.is_finite()) && self.intercept.is_none_or(f64::is_finite) {
            Ok(())
        } else {
            Err(SalError::NonFinite("model parameters".into()))
        }
    }

    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        dot(&self.theta, x) + self.intercept.unwrap_or(0.0)
    }

    fn check(&self, x: &[f64], y: f64, kind: LossKind) -> Result<()> {
        if x.len() != self.theta.len() {
            return Err(SalError::DimensionMismatch {
                expected: self.theta.len(),
                got: x.len(),
            });
        }
        kind.check_target(y)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub fn loss(params: &ModelParams, kind: LossKind, x: &[f64], y: f64) -> Result<f64> {
    params.check(x, y, kind)?;
    Ok(kind.value(params.predict(x), y))
}

/// Gradient of the per-sample loss with respect to `theta` (intercept excluded).
pub fn grad_theta(params: &ModelParams, kind: LossKind, x: &[f64], y: f64) -> Result<Vec<f64>> {
    params.check(x, y, kind)?;
    let d = kind.d1(params.predict(x), y);
    Ok(x.iter().map(|xi| d * xi).collect())
}

pub fn grad_x(params: &ModelParams, kind: LossKind, x: &[f64], y: f64) -> Result<Vec<f64>> {
    params.check(x, y, kind)?;
    let d = kind.d1(params.predict(x), y);
    Ok(params.theta.iter().map(|t| d * t).collect())
}

/// Jacobian of `grad_theta` with respect to `x`: row `a`, column `k` holds
/// `∂(∇_θ ℓ)_a / ∂x_k`.
pub fn mixed_grad(params: &ModelParams, kind: LossKind, x: &[f64], y: f64) -> Result<Array2<f64>> {
    params.check(x, y, kind)?;
    let m = x.len();
    let u = params.predict(x);
    let mut out = Array2::zeros((m, m));
    add_mixed_grad(out.view_mut(), 1.0, &params.theta, kind, u, x, y);
    Ok(out)
}

/// Adds `scale · ∂(∇_θ ℓ)/∂x` into `out` without allocating.
#[inline]
pub(crate) fn add_mixed_grad(
    mut out: ndarray::ArrayViewMut2<'_, f64>,
    scale: f64,
    theta: &[f64],
    kind: LossKind,
    u: f64,
    x: &[f64],
    y: f64,
) {
    let d1 = kind.d1(u, y) * scale;
    let d2 = kind.d2(u, y) * scale;
    for (a, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let xa = d2 * x[a];
        for (k, v) in row.iter_mut().enumerate() {
            *v += xa * theta[k];
        }
        row[a] += d1;
    }
}

/// One environment's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvDataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub env_id: i64,
}

impl EnvDataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, env_id: i64) -> Result<Self> {
        let d = Self { x, y, env_id };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() == 0 {
            return Err(SalError::InvalidInput(format!(
                "environment {} has no samples",
                self.env_id
            )));
        }
        if self.x.nrows() != self.y.len() {
            return Err(SalError::DimensionMismatch {
                expected: self.x.nrows(),
                got: self.y.len(),
            });
        }
        if !self.x.iter().chain(self.y.iter()).all(|v| v.is_finite()) {
            return Err(SalError::NonFinite(format!(
                "data of environment {}",
                self.env_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    /// Keeps the rows with the given indices, in order.
    pub fn select(&self, rows: &[usize]) -> EnvDataset {
        EnvDataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            env_id: self.env_id,
        }
    }

    /// Mean loss of `params` over the environment.
    pub fn mean_loss(&self, params: &ModelParams, kind: LossKind) -> f64 {
        let total: f64 = self
            .x
            .rows()
            .into_iter()
            .zip(self.y.iter())
            .map(|(row, &y)| kind.value(params.predict(row.as_slice().expect("row-major")), y))
            .sum();
        total / self.len() as f64
    }

    /// Gradient of the mean loss with respect to `(theta, intercept)`.
    pub fn mean_grad(&self, params: &ModelParams, kind: LossKind) -> (Vec<f64>, f64) {
        let mut g = vec![0.0; self.dim()];
        let mut gb = 0.0;
        for (row, &y) in self.x.rows().into_iter().zip(self.y.iter()) {
            let x = row.as_slice().expect("row-major");
            let d = kind.d1(params.predict(x), y);
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += d * xi;
            }
            gb += d;
        }
        let n = self.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        (g, gb / n)
    }
}

/// Checks that a collection of environments is usable together.
pub fn check_envs(envs: &[EnvDataset]) -> Result<usize> {
    let first = envs
        .first()
        .ok_or_else(|| SalError::InvalidInput("no environments given".into()))?;
    let m = first.dim();
    for e in envs {
        e.validate()?;
        if e.dim() != m {
            return Err(SalError::DimensionMismatch {
                expected: m,
                got: e.dim(),
            });
        }
    }
    Ok(m)
}

/// Concatenates environments into one dataset (env id of the first).
pub fn pool(envs: &[EnvDataset]) -> Result<EnvDataset> {
    let m = check_envs(envs)?;
    let n: usize = envs.iter().map(EnvDataset::len).sum();
    let mut x = Array2::zeros((n, m));
    let mut y = Array1::zeros(n);
    let mut offset = 0;
    for e in envs {
        let k = e.len();
        x.slice_mut(ndarray::s![offset..offset + k, ..]).assign(&e.x);
        y.slice_mut(ndarray::s![offset..offset + k]).assign(&e.y);
        offset += k;
    }
    Ok(EnvDataset {
        x,
        y,
        env_id: envs[0].env_id,
    })
}

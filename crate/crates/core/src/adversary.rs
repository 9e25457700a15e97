//! Inner maximisation of the Lagrangian-relaxed robust loss.
//!
//! For each sample the adversary runs fixed-step ascent on
//! `φ(x̂) = ℓ(θ; x̂, y) − λ·c_w(x̂, x)` starting from `x̂ = x`:
//!
//! ```text
//! x̂ ← x + (x̂ − x + ε_x ∇ₓℓ) / (1 + 2 ε_x λ w²)
//! ```
//!
//! i.e. an explicit step on the loss and an implicit one on the quadratic
//! cost. Fixed points are the stationary points of `φ`, and for small
//! `ε_x λ w²` it agrees with the plain gradient step to first order; unlike
//! the plain step it cannot blow up along heavily weighted coordinates. A
//! step that would lower `φ` is rejected, which ends the ascent for that
//! sample (the next step would be identical). Along the way it accumulates
//! `−2 ε_x λ Σ_t (x̂_t − x)`, the first-order sensitivity of the perturbed
//! point to the weight of each coordinate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cost::CovariateWeights;
use crate::error::{Result, SalError};
use crate::model::{EnvDataset, LossKind, ModelParams};

/// Perturbations larger than this multiple of the data scale are treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub lambda: f64,
    pub eps_x: f64,
    pub ascent_steps: usize,
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SalError::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps_x > 0.0 && self.eps_x.is_finite()) {
            return Err(SalError::InvalidInput(format!("eps_x must be > 0, got {}", self.eps_x)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialState {
    /// Perturbed inputs, same shape as the source design matrix.
    pub x_a: Array2<f64>,
    /// Per-sample, per-coordinate `−2 ε_x λ Σ_t (x̂_t − x)`.
    pub trace_dxa_dw: Array2<f64>,
    pub steps_taken: usize,
    /// Number of samples whose ascent stopped on a rejected step.
    pub rejected: usize,
}

#[inline]
fn penalized(kind: LossKind, params: &ModelParams, w2: &[f64], lambda: f64, xhat: &[f64], x: &[f64], y: f64) -> f64 {
    let mut pen = 0.0;
    for j in 0..x.len() {
        let d = xhat[j] - x[j];
        pen += w2[j] * d * d;
    }
    kind.value(params.predict(xhat), y) - lambda * pen
}

/// Ascends one sample in place. Returns whether a step was rejected.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ascend_sample(
    params: &ModelParams,
    kind: LossKind,
    w2: &[f64],
    cfg: &AdvConfig,
    x: &[f64],
    y: f64,
    limit: f64,
    sample: usize,
    xhat: &mut [f64],
    trace: &mut [f64],
    cand: &mut [f64],
) -> Result<bool> {
    let m = x.len();
    xhat.copy_from_slice(x);
    trace.iter_mut().for_each(|t| *t = 0.0);
    if cfg.ascent_steps == 0 {
        return Ok(false);
    }
    let lam = cfg.lambda;
    let eps = cfg.eps_x;
    let b = params.intercept.unwrap_or(0.0);
    let theta = &params.theta;
    let mut u = params.predict(xhat);
    let mut phi = kind.value(u, y);
    for _ in 0..cfg.ascent_steps {
        let d1 = kind.d1(u, y);
        // One pass builds the candidate, its prediction and its penalty.
        let (mut norm2, mut pen, mut dot) = (0.0, 0.0, 0.0);
        for j in 0..m {
            // Loss term explicit, cost term implicit: stable for any weight.
            let dj = (xhat[j] - x[j] + eps * d1 * theta[j]) / (1.0 + 2.0 * eps * lam * w2[j]);
            let c = x[j] + dj;
            cand[j] = c;
            norm2 += dj * dj;
            pen += w2[j] * dj * dj;
            dot += theta[j] * c;
        }
        if !norm2.is_finite() {
            return Err(SalError::Divergence {
                sample,
                reason: "non-finite ascent step".into(),
            });
        }
        if norm2.sqrt() > limit {
            return Err(SalError::Divergence {
                sample,
                reason: format!(
                    "perturbation norm {:.3e} exceeds {:.3e}; lambda is too small for the loss curvature",
                    norm2.sqrt(),
                    limit
                ),
            });
        }
        let u_cand = dot + b;
        let phi_cand = kind.value(u_cand, y) - lam * pen;
        if phi_cand < phi {
            return Ok(true);
        }
        for j in 0..m {
            trace[j] += -2.0 * eps * lam * (xhat[j] - x[j]);
        }
        xhat.copy_from_slice(cand);
        u = u_cand;
        phi = phi_cand;
    }
    Ok(false)
}

/// Magnitude used to decide divergence: `max(1, rms(X))`.
pub(crate) fn data_scale(data: &EnvDataset) -> f64 {
    let n = data.x.len().max(1) as f64;
    let rms = (data.x.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    rms.max(1.0)
}

fn check_inputs(params: &ModelParams, kind: LossKind, w: &CovariateWeights, data: &EnvDataset, cfg: &AdvConfig) -> Result<()> {
    cfg.validate()?;
    if params.dim() != data.dim() {
        return Err(SalError::DimensionMismatch {
            expected: params.dim(),
            got: data.dim(),
        });
    }
    if w.len() != data.dim() {
        return Err(SalError::DimensionMismatch {
            expected: data.dim(),
            got: w.len(),
        });
    }
    for &y in data.y.iter() {
        kind.check_target(y)?;
    }
    Ok(())
}

/// Runs `cfg.ascent_steps` ascent steps on every sample of `data`.
pub fn ascend(
    params: &ModelParams,
    kind: LossKind,
    w: &CovariateWeights,
    data: &EnvDataset,
    cfg: &AdvConfig,
) -> Result<AdversarialState> {
    check_inputs(params, kind, w, data, cfg)?;
    ascend_unchecked(params, kind, &w.squared(), data, cfg, data_scale(data))
}

pub(crate) fn ascend_unchecked(
    params: &ModelParams,
    kind: LossKind,
    w2: &[f64],
    data: &EnvDataset,
    cfg: &AdvConfig,
    scale: f64,
) -> Result<AdversarialState> {
    let (n, m) = data.x.dim();
    let mut x_a = Array2::zeros((n, m));
    let mut trace = Array2::zeros((n, m));
    let mut cand = vec![0.0; m];
    let mut rejected = 0;
    let limit = DIVERGENCE_FACTOR * scale;
    for i in 0..n {
        let x = data.x.row(i);
        let x = x.as_slice().expect("row-major");
        let mut xhat_row = x_a.row_mut(i);
        let xhat = xhat_row.as_slice_mut().expect("row-major");
        let mut trace_row = trace.row_mut(i);
        let tr = trace_row.as_slice_mut().expect("row-major");
        if ascend_sample(params, kind, w2, cfg, x, data.y[i], limit, i, xhat, tr, &mut cand)? {
            rejected += 1;
        }
    }
    Ok(AdversarialState {
        x_a,
        trace_dxa_dw: trace,
        steps_taken: cfg.ascent_steps,
        rejected,
    })
}

/// Mean loss at the ascended inputs, the quantity the model is trained on.
pub fn surrogate_loss(
    params: &ModelParams,
    kind: LossKind,
    w: &CovariateWeights,
    data: &EnvDataset,
    cfg: &AdvConfig,
) -> Result<f64> {
    let state = ascend(params, kind, w, data, cfg)?;
    let total: f64 = state
        .x_a
        .rows()
        .into_iter()
        .zip(data.y.iter())
        .map(|(row, &y)| kind.value(params.predict(row.as_slice().expect("row-major")), y))
        .sum();
    Ok(total / data.len() as f64)
}

/// Approximate `s_λ(θ; (x, y)) = sup_ξ ℓ(θ; ξ) − λ c_w(ξ, (x, y))` for one sample.
pub fn s_lambda(
    params: &ModelParams,
    kind: LossKind,
    w: &CovariateWeights,
    x: &[f64],
    y: f64,
    cfg: &AdvConfig,
) -> Result<f64> {
    cfg.validate()?;
    if x.len() != params.dim() || w.len() != params.dim() {
        return Err(SalError::DimensionMismatch {
            expected: params.dim(),
            got: x.len().min(w.len()),
        });
    }
    kind.check_target(y)?;
    let w2 = w.squared();
    let m = x.len();
    let scale = (x.iter().map(|v| v * v).sum::<f64>() / m as f64).sqrt().max(1.0);
    let (mut xhat, mut trace, mut cand) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    ascend_sample(params, kind, &w2, cfg, x, y, DIVERGENCE_FACTOR * scale, 0, &mut xhat, &mut trace, &mut cand)?;
    Ok(penalized(kind, params, &w2, cfg.lambda, &xhat, x, y))
}

/// Mean of `s_λ` over a dataset.
pub fn mean_s_lambda(
    params: &ModelParams,
    kind: LossKind,
    w: &CovariateWeights,
    data: &EnvDataset,
    cfg: &AdvConfig,
) -> Result<f64> {
    let state = ascend(params, kind, w, data, cfg)?;
    let w2 = w.squared();
    let mut total = 0.0;
    for (i, (row, &y)) in state.x_a.rows().into_iter().zip(data.y.iter()).enumerate() {
        let x = data.x.row(i);
        total += penalized(
            kind,
            params,
            &w2,
            cfg.lambda,
            row.as_slice().expect("row-major"),
            x.as_slice().expect("row-major"),
            y,
        );
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_d() -> (ModelParams, EnvDataset) {
        (
            ModelParams::new(vec![1.0], None).unwrap(),
            EnvDataset::new(array![[0.0]], array![1.0], 0).unwrap(),
        )
    }

    #[test]
    fn zero_steps_is_identity() {
        let (p, d) = one_d();
        let cfg = AdvConfig { lambda: 2.0, eps_x: 0.1, ascent_steps: 0 };
        let s = ascend(&p, LossKind::Squared, &CovariateWeights::ones(1), &d, &cfg).unwrap();
        assert_eq!(s.x_a, d.x);
        assert!(s.trace_dxa_dw.iter().all(|v| *v == 0.0));
        assert_eq!(s.steps_taken, 0);
    }

    #[test]
    fn converges_to_closed_form_maximiser() {
        // φ(x̂) = (1 − x̂)² − 2x̂² is maximised at x̂* = (θy − λx)/(θ² − λ) = −1.
        let (p, d) = one_d();
        let cfg = AdvConfig { lambda: 2.0, eps_x: 0.05, ascent_steps: 2000 };
        let w = CovariateWeights::ones(1);
        let s = ascend(&p, LossKind::Squared, &w, &d, &cfg).unwrap();
        // Near the optimum φ is flat to rounding, so acceptance stops within ~√ε_mach.
        assert!((s.x_a[[0, 0]] + 1.0).abs() < 1e-6, "{} after {} steps", s.x_a[[0, 0]], s.steps_taken);
        let sur = surrogate_loss(&p, LossKind::Squared, &w, &d, &cfg).unwrap();
        assert!((sur - 4.0).abs() < 1e-5);
        let sl = s_lambda(&p, LossKind::Squared, &w, &[0.0], 1.0, &cfg).unwrap();
        assert!((sl - 2.0).abs() < 1e-8);
    }

    #[test]
    fn zero_steps_surrogate_is_plain_loss() {
        let (p, d) = one_d();
        let cfg = AdvConfig { lambda: 2.0, eps_x: 0.05, ascent_steps: 0 };
        let w = CovariateWeights::ones(1);
        assert_eq!(surrogate_loss(&p, LossKind::Squared, &w, &d, &cfg).unwrap(), 1.0);
        assert_eq!(s_lambda(&p, LossKind::Squared, &w, &[0.0], 1.0, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn huge_lambda_pins_inputs() {
        let p = ModelParams::new(vec![1.5, -2.0], None).unwrap();
        let d = EnvDataset::new(array![[0.3, 1.0], [-1.0, 2.0]], array![1.0, -3.0], 0).unwrap();
        let cfg = AdvConfig { lambda: 1e6, eps_x: 1e-7, ascent_steps: 50 };
        let w = CovariateWeights::ones(2);
        let s = ascend(&p, LossKind::Squared, &w, &d, &cfg).unwrap();
        let max = (&s.x_a - &d.x).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max < 1e-3);
        let erm = d.mean_loss(&p, LossKind::Squared);
        let sur = surrogate_loss(&p, LossKind::Squared, &w, &d, &cfg).unwrap();
        assert!((sur - erm).abs() < 1e-3);
    }

    #[test]
    fn tiny_lambda_diverges() {
        let (p, d) = one_d();
        let cfg = AdvConfig { lambda: 0.0, eps_x: 1.0, ascent_steps: 500 };
        let err = ascend(&p, LossKind::Squared, &CovariateWeights::ones(1), &d, &cfg).unwrap_err();
        assert!(matches!(err, SalError::Divergence { .. }));
    }

    #[test]
    fn rejects_bad_config() {
        let (p, d) = one_d();
        let cfg = AdvConfig { lambda: -1.0, eps_x: 0.1, ascent_steps: 1 };
        assert!(ascend(&p, LossKind::Squared, &CovariateWeights::ones(1), &d, &cfg).is_err());
        let cfg = AdvConfig { lambda: 1.0, eps_x: 0.0, ascent_steps: 1 };
        assert!(ascend(&p, LossKind::Squared, &CovariateWeights::ones(1), &d, &cfg).is_err());
    }

    #[test]
    fn y_is_never_perturbed() {
        let (p, d) = one_d();
        let cfg = AdvConfig { lambda: 2.0, eps_x: 0.05, ascent_steps: 10 };
        let before = d.y.clone();
        ascend(&p, LossKind::Squared, &CovariateWeights::ones(1), &d, &cfg).unwrap();
        assert_eq!(d.y, before);
    }

    #[test]
    fn heavy_weight_shields_its_coordinate() {
        let p = ModelParams::new(vec![1.0, -1.0, 2.0], None).unwrap();
        let d = EnvDataset::new(array![[0.2, 1.0, -0.5], [1.0, 0.0, 0.3]], array![0.5, -1.0], 0).unwrap();
        let cfg = AdvConfig { lambda: 5.0, eps_x: 0.05, ascent_steps: 30 };
        let w = CovariateWeights::new(vec![1.0, 1e6, 1.0]).unwrap();
        let s = ascend(&p, LossKind::Squared, &w, &d, &cfg).unwrap();
        let moved = &s.x_a - &d.x;
        let unit_mean = moved.column(0).iter().chain(moved.column(2).iter()).map(|v| v.abs()).sum::<f64>() / 4.0;
        assert!(unit_mean > 1e-3);
        let heavy = moved.column(1).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(heavy < 1e-6 * unit_mean, "{heavy} vs {unit_mean}");
    }

    fn phi(p: &ModelParams, kind: LossKind, w: &CovariateWeights, lam: f64, xhat: &[f64], x: &[f64], y: f64) -> f64 {
        penalized(kind, p, &w.squared(), lam, xhat, x, y)
    }

    proptest::proptest! {
        #[test]
        fn ascent_never_lowers_the_penalised_loss(
            theta in proptest::collection::vec(-2.0f64..2.0, 3),
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            w in proptest::collection::vec(1.0f64..10.0, 3),
            y in -2.0f64..2.0,
            lambda in 0.5f64..10.0,
            eps in 0.001f64..0.2,
            steps in 0usize..40,
            logistic in proptest::bool::ANY,
        ) {
            let (kind, y) = if logistic { (LossKind::Logistic, f64::from(y > 0.0)) } else { (LossKind::Squared, y) };
            let p = ModelParams::new(theta, None).unwrap();
            let w = crate::cost::project(&w).unwrap();
            let cfg = AdvConfig { lambda, eps_x: eps, ascent_steps: steps };
            let mut prev = phi(&p, kind, &w, lambda, &x, &x, y);
            // Ascents of increasing length share a prefix, so φ along the path is non-decreasing.
            for t in 1..=steps {
                let c = AdvConfig { ascent_steps: t, ..cfg };
                let d = EnvDataset::new(ndarray::Array2::from_shape_vec((1, 3), x.clone()).unwrap(), ndarray::Array1::from(vec![y]), 0).unwrap();
                match ascend(&p, kind, &w, &d, &c) {
                    Ok(s) => {
                        let xa = s.x_a.row(0).to_vec();
                        let now = phi(&p, kind, &w, lambda, &xa, &x, y);
                        // φ is recomputed here in a different summation order than inside the ascent.
                        proptest::prop_assert!(now >= prev - 1e-12 * (1.0 + prev.abs()), "step {}: {} < {}", t, now, prev);
                        prev = now;
                    }
                    Err(SalError::Divergence { .. }) => break,
                    Err(e) => return Err(proptest::test_runner::TestCaseError::fail(e.to_string())),
                }
            }
        }

        #[test]
        fn trace_is_the_scaled_sum_of_accepted_iterates(
            theta in proptest::collection::vec(-1.5f64..1.5, 2),
            x in proptest::collection::vec(-2.0f64..2.0, 2),
            w in proptest::collection::vec(1.0f64..5.0, 2),
            y in -2.0f64..2.0,
            lambda in 1.0f64..10.0,
            eps in 0.01f64..0.1,
            steps in 1usize..20,
        ) {
            let p = ModelParams::new(theta, None).unwrap();
            let w = crate::cost::project(&w).unwrap();
            let d = EnvDataset::new(ndarray::Array2::from_shape_vec((1, 2), x.clone()).unwrap(), ndarray::Array1::from(vec![y]), 0).unwrap();
            let mut expect = [0.0; 2];
            let mut last = x.clone();
            for t in 1..=steps {
                let c = AdvConfig { lambda, eps_x: eps, ascent_steps: t };
                let s = ascend(&p, LossKind::Squared, &w, &d, &c).unwrap();
                let xa = s.x_a.row(0).to_vec();
                if xa == last && t > 1 {
                    break;
                }
                // Each accepted step adds −2ε_xλ(x̂_{t−1} − x).
                for j in 0..2 {
                    expect[j] += -2.0 * eps * lambda * (last[j] - x[j]);
                }
                let tr = s.trace_dxa_dw.row(0).to_vec();
                for j in 0..2 {
                    proptest::prop_assert!((tr[j] - expect[j]).abs() <= 1e-12 * (1.0 + expect[j].abs()));
                }
                last = xa;
            }
        }

        #[test]
        fn s_lambda_dominates_the_clean_loss(
            theta in proptest::collection::vec(-2.0f64..2.0, 2),
            x in proptest::collection::vec(-2.0f64..2.0, 2),
            y in -2.0f64..2.0,
            lambda in 0.5f64..10.0,
        ) {
            let p = ModelParams::new(theta, None).unwrap();
            let w = CovariateWeights::ones(2);
            let cfg = AdvConfig { lambda, eps_x: 0.05, ascent_steps: 20 };
            if let Ok(s) = s_lambda(&p, LossKind::Squared, &w, &x, y, &cfg) {
                proptest::prop_assert!(s >= LossKind::Squared.value(p.predict(&x), y));
            }
        }
    }
}

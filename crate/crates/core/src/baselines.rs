//! Reference learners: ERM, LASSO, ridge, isotropic Wasserstein DRO and the
//! linear IRM penalty. All of them are full-batch gradient methods from a
//! zero start so they are deterministic given their configuration.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::adversary;
use crate::cost::CovariateWeights;
use crate::error::{Result, SalError};
use crate::model::{self, EnvDataset, LossKind, ModelParams};
use crate::sal::{self, SalConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Erm,
    Lasso,
    Ridge,
    Wdrl,
    Irm,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Erm => "erm",
            BaselineMethod::Lasso => "lasso",
            BaselineMethod::Ridge => "ridge",
            BaselineMethod::Wdrl => "wdrl",
            BaselineMethod::Irm => "irm",
        }
    }
}

fn default_iters() -> usize {
    1000
}
fn default_step() -> f64 {
    0.05
}
fn default_eps_x() -> f64 {
    0.05
}
fn default_ascent() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit_intercept: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            iters: default_iters(),
            step: default_step(),
            seed: 0,
            fit_intercept: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// LASSO/ridge strength, IRM penalty weight, or the WDRL multiplier.
    #[serde(default)]
    pub reg_lambda: f64,
    /// WDRL radius; when set, the multiplier is chosen by the dual search.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default = "default_eps_x")]
    pub eps_x: f64,
    #[serde(default = "default_ascent")]
    pub ascent_steps: usize,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod) -> Self {
        Self {
            method,
            reg_lambda: 0.0,
            radius: None,
            sgd: SgdConfig::default(),
            eps_x: default_eps_x(),
            ascent_steps: default_ascent(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return Err(SalError::InvalidInput(format!("reg_lambda must be >= 0, got {}", self.reg_lambda)));
        }
        if !(self.sgd.step > 0.0 && self.sgd.step.is_finite()) {
            return Err(SalError::InvalidInput(format!("step must be > 0, got {}", self.sgd.step)));
        }
        if let Some(r) = self.radius {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(SalError::InvalidInput(format!("radius must be >= 0, got {r}")));
            }
        }
        Ok(())
    }

    /// The SAL configuration that reproduces this WDRL fit with `w` frozen at 1.
    pub fn as_frozen_sal(&self, lambda: f64) -> SalConfig {
        SalConfig {
            outer_iters: 1,
            theta_iters: self.sgd.iters,
            w_iters: 0,
            ascent_steps: self.ascent_steps,
            eps_x: self.eps_x,
            eps_theta: self.sgd.step,
            eps_w: 0.0,
            lambda,
            alpha: 0.0,
            seed: self.sgd.seed,
            fit_intercept: self.sgd.fit_intercept,
        }
    }
}

/// Full-batch descent on an objective given by its gradient, with an
/// optional proximal map applied to theta after every step.
fn descend(
    dim: usize,
    cfg: &SgdConfig,
    mut grad: impl FnMut(&ModelParams) -> (Vec<f64>, f64),
    prox: impl Fn(&mut [f64]),
) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(dim, cfg.fit_intercept);
    for it in 0..cfg.iters {
        let (g, gb) = grad(&p);
        for (t, gi) in p.theta.iter_mut().zip(&g) {
            *t -= cfg.step * gi;
        }
        prox(&mut p.theta);
        if let Some(b) = p.intercept.as_mut() {
            *b -= cfg.step * gb;
        }
        if p.check_finite().is_err() {
            return Err(SalError::NonFinite(format!(
                "descent diverged at iteration {it}; step {} is too large",
                cfg.step
            )));
        }
    }
    Ok(p)
}

fn check_targets(envs: &[EnvDataset], kind: LossKind) -> Result<()> {
    envs.iter().flat_map(|e| e.y.iter()).try_for_each(|&y| kind.check_target(y))
}

pub fn fit_erm(envs: &[EnvDataset], kind: LossKind, cfg: &BaselineConfig) -> Result<ModelParams> {
    cfg.validate()?;
    check_targets(envs, kind)?;
    let pooled = model::pool(envs)?;
    descend(pooled.dim(), &cfg.sgd, |p| pooled.mean_grad(p, kind), |_| {})
}

/// ERM plus `reg_lambda · ‖θ‖²`; the intercept is not penalised.
pub fn fit_ridge(envs: &[EnvDataset], kind: LossKind, cfg: &BaselineConfig) -> Result<ModelParams> {
    cfg.validate()?;
    check_targets(envs, kind)?;
    let pooled = model::pool(envs)?;
    let lam = cfg.reg_lambda;
    descend(
        pooled.dim(),
        &cfg.sgd,
        |p| {
            let (mut g, gb) = pooled.mean_grad(p, kind);
            for (gi, t) in g.iter_mut().zip(&p.theta) {
                *gi += 2.0 * lam * t;
            }
            (g, gb)
        },
        |_| {},
    )
}

/// ERM plus `reg_lambda · ‖θ‖₁` by proximal gradient (soft thresholding).
pub fn fit_lasso(envs: &[EnvDataset], kind: LossKind, cfg: &BaselineConfig) -> Result<ModelParams> {
    cfg.validate()?;
    check_targets(envs, kind)?;
    let pooled = model::pool(envs)?;
    let thresh = cfg.sgd.step * cfg.reg_lambda;
    descend(
        pooled.dim(),
        &cfg.sgd,
        |p| pooled.mean_grad(p, kind),
        |theta| {
            if thresh > 0.0 {
                for t in theta.iter_mut() {
                    *t = t.signum() * (t.abs() - thresh).max(0.0);
                }
            }
        },
    )
}

/// `∂/∂s L^e(s·θ)` at `s = 1` for one environment, i.e. `mean ℓ'(u) u`.
pub fn irm_scalar_grad(params: &ModelParams, kind: LossKind, env: &EnvDataset) -> f64 {
    let total: f64 = env
        .x
        .rows()
        .into_iter()
        .zip(env.y.iter())
        .map(|(row, &y)| {
            let u = params.predict(row.as_slice().expect("row-major"));
            kind.d1(u, y) * u
        })
        .sum();
    total / env.len() as f64
}

/// `Σ_e (∂/∂s L^e(s·θ)|_{s=1})²`.
pub fn irm_penalty(params: &ModelParams, kind: LossKind, envs: &[EnvDataset]) -> f64 {
    envs.iter().map(|e| irm_scalar_grad(params, kind, e).powi(2)).sum()
}

/// Gradient of `Σ_e L^e + lam · Σ_e (∂/∂s L^e(s·θ)|_{s=1})²` in (θ, b).
pub fn irm_objective_grad(params: &ModelParams, kind: LossKind, envs: &[EnvDataset], lam: f64) -> (Vec<f64>, f64) {
    let m = params.dim();
    let mut g = vec![0.0; m];
    let mut gb = 0.0;
    for e in envs {
        let (le, lb) = e.mean_grad(params, kind);
        g.iter_mut().zip(&le).for_each(|(a, b)| *a += b);
        gb += lb;
        if lam > 0.0 {
            // ∂g_e/∂θ = mean (ℓ''(u) u + ℓ'(u)) x
            let mut dg = vec![0.0; m];
            let mut dgb = 0.0;
            let mut ge = 0.0;
            for (row, &y) in e.x.rows().into_iter().zip(e.y.iter()) {
                let x = row.as_slice().expect("row-major");
                let u = params.predict(x);
                let d1 = kind.d1(u, y);
                let c = kind.d2(u, y) * u + d1;
                ge += d1 * u;
                dg.iter_mut().zip(x).for_each(|(a, xi)| *a += c * xi);
                dgb += c;
            }
            let n = e.len() as f64;
            let ge = ge / n;
            g.iter_mut().zip(&dg).for_each(|(a, d)| *a += 2.0 * lam * ge * d / n);
            gb += 2.0 * lam * ge * dgb / n;
        }
    }
    (g, gb)
}

/// `Σ_e L^e + reg_lambda · Σ_e (∂/∂s L^e(s·θ)|_{s=1})²`.
pub fn fit_irm(envs: &[EnvDataset], kind: LossKind, cfg: &BaselineConfig) -> Result<ModelParams> {
    cfg.validate()?;
    check_targets(envs, kind)?;
    let m = model::check_envs(envs)?;
    if envs.len() < 2 && cfg.reg_lambda > 0.0 {
        return Err(SalError::InvalidInput("IRM needs at least two environments".into()));
    }
    descend(m, &cfg.sgd, |p| irm_objective_grad(p, kind, envs, cfg.reg_lambda), |_| {})
}

/// Result of the radius-constrained WDRL search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusFit {
    pub params: ModelParams,
    pub lambda: f64,
    pub dual_value: f64,
    /// False when the dual objective showed more than one local minimum on the grid.
    pub unimodal: bool,
}

/// Lagrangian WDRL: SAL with `w` frozen at all-ones and multiplier `lambda`.
pub fn fit_wdrl_lagrangian(envs: &[EnvDataset], kind: LossKind, cfg: &BaselineConfig, lambda: f64) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut m = sal::train(envs, kind, &cfg.as_frozen_sal(lambda))?;
    m.method = "wdrl".into();
    Ok(m)
}

const RADIUS_GRID: usize = 31;
const GOLDEN_ITERS: usize = 12;

/// Radius-constrained WDRL: minimises `λρ + E[s_λ(θ_λ)]` over a log grid of
/// multipliers in `[1e-3, 1e3]`, refined by golden-section search.
pub fn fit_wdrl_radius(envs: &[EnvDataset], kind: LossKind, cfg: &BaselineConfig, rho: f64) -> Result<RadiusFit> {
    fit_wdrl_radii(envs, kind, cfg, &[rho])?.pop().expect("one radius")
}

/// [`fit_wdrl_radius`] for several radii at once. `θ_λ` does not depend on
/// `ρ`, so fits are memoised by multiplier and shared across radii; each
/// result equals the corresponding single-radius call. The outer error
/// covers invalid inputs, the inner ones per-radius search failures.
pub fn fit_wdrl_radii(
    envs: &[EnvDataset],
    kind: LossKind,
    cfg: &BaselineConfig,
    rhos: &[f64],
) -> Result<Vec<Result<RadiusFit>>> {
    cfg.validate()?;
    if let Some(r) = rhos.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(SalError::InvalidInput(format!("radius must be >= 0, got {r}")));
    }
    let pooled = model::pool(envs)?;
    let ones = CovariateWeights::ones(pooled.dim());
    let mut cache: HashMap<u64, Option<(f64, ModelParams)>> = HashMap::new();
    // E[s_λ(θ_λ)] and θ_λ, or None when the fit or the ascent diverges.
    let mut path = |log_lam: f64| -> Option<(f64, ModelParams)> {
        cache
            .entry(log_lam.to_bits())
            .or_insert_with(|| {
                let lam = 10f64.powf(log_lam);
                let fit = fit_wdrl_lagrangian(envs, kind, cfg, lam).ok()?;
                let adv = cfg.as_frozen_sal(lam).adv();
                let s = adversary::mean_s_lambda(&fit.params, kind, &ones, &pooled, &adv).ok()?;
                s.is_finite().then_some((s, fit.params))
            })
            .clone()
    };
    Ok(rhos
        .iter()
        .map(|&rho| {
            if rho == 0.0 {
                // The ball collapses to the training distribution.
                let params = fit_erm(envs, kind, cfg)?;
                let dual = pooled.mean_loss(&params, kind);
                return Ok(RadiusFit {
                    params,
                    lambda: f64::INFINITY,
                    dual_value: dual,
                    unimodal: true,
                });
            }
            radius_search(rho, &mut path)
        })
        .collect())
}

fn radius_search(rho: f64, path: &mut impl FnMut(f64) -> Option<(f64, ModelParams)>) -> Result<RadiusFit> {
    let mut dual = |log_lam: f64| path(log_lam).map(|(s, p)| (10f64.powf(log_lam) * rho + s, p));
    let grid: Vec<f64> = (0..RADIUS_GRID).map(|k| -3.0 + 0.2 * k as f64).collect();
    let values: Vec<Option<(f64, ModelParams)>> = grid.iter().map(|&g| dual(g)).collect();
    let finite: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.as_ref().map(|(d, _)| (i, *d)))
        .collect();
    if finite.is_empty() {
        return Err(SalError::RadiusSearch(format!(
            "dual objective infinite on the whole multiplier grid for rho = {rho}"
        )));
    }
    let local_minima = finite
        .windows(3)
        .filter(|w| w[1].1 < w[0].1 && w[1].1 < w[2].1)
        .count();
    let (best, _) = finite
        .iter()
        .copied()
        .fold((finite[0].0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });

    let mut best_val = values[best].clone().expect("finite");
    let mut best_log = grid[best];
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(RADIUS_GRID - 1)];
    if hi > lo {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (lo, hi);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let mut fc = dual(c);
        let mut fd = dual(d);
        for _ in 0..GOLDEN_ITERS {
            let vc = fc.as_ref().map_or(f64::INFINITY, |v| v.0);
            let vd = fd.as_ref().map_or(f64::INFINITY, |v| v.0);
            if vc <= vd {
                if vc < best_val.0 {
                    best_val = fc.clone().expect("finite");
                    best_log = c;
                }
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = dual(c);
            } else {
                if vd < best_val.0 {
                    best_val = fd.clone().expect("finite");
                    best_log = d;
                }
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = dual(d);
            }
        }
    }
    Ok(RadiusFit {
        params: best_val.1,
        lambda: 10f64.powf(best_log),
        dual_value: best_val.0,
        unimodal: local_minima <= 1,
    })
}

/// WDRL in whichever mode the configuration selects.
pub fn fit_wdrl(envs: &[EnvDataset], kind: LossKind, cfg: &BaselineConfig) -> Result<ModelParams> {
    match cfg.radius {
        Some(rho) => Ok(fit_wdrl_radius(envs, kind, cfg, rho)?.params),
        None => Ok(fit_wdrl_lagrangian(envs, kind, cfg, cfg.reg_lambda)?.params),
    }
}

/// Dispatches on `cfg.method` and wraps the result with all-ones weights.
pub fn fit(envs: &[EnvDataset], kind: LossKind, cfg: &BaselineConfig) -> Result<TrainedModel> {
    let m = model::check_envs(envs)?;
    let params = match cfg.method {
        BaselineMethod::Erm => fit_erm(envs, kind, cfg)?,
        BaselineMethod::Lasso => fit_lasso(envs, kind, cfg)?,
        BaselineMethod::Ridge => fit_ridge(envs, kind, cfg)?,
        BaselineMethod::Wdrl => fit_wdrl(envs, kind, cfg)?,
        BaselineMethod::Irm => fit_irm(envs, kind, cfg)?,
    };
    Ok(TrainedModel {
        method: cfg.method.name().into(),
        params,
        weights: CovariateWeights::ones(m),
        loss: kind,
        config: serde_json::to_value(cfg)?,
        history: Vec::new(),
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};

    fn cfg(method: BaselineMethod, iters: usize, step: f64) -> BaselineConfig {
        BaselineConfig {
            sgd: SgdConfig { iters, step, ..SgdConfig::default() },
            ..BaselineConfig::new(method)
        }
    }

    #[test]
    fn erm_recovers_noiseless_slope() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 / 10.0 - 1.0);
        let y = x.column(0).mapv(|v| 2.0 * v);
        let env = EnvDataset::new(x, y, 0).unwrap();
        let p = fit_erm(&[env], LossKind::Squared, &cfg(BaselineMethod::Erm, 3000, 0.2)).unwrap();
        assert!((p.theta[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn erm_single_sample_reaches_zero_residual() {
        let env = EnvDataset::new(array![[1.0, 2.0]], array![3.0], 0).unwrap();
        let p = fit_erm(&[env.clone()], LossKind::Squared, &cfg(BaselineMethod::Erm, 500, 0.05)).unwrap();
        assert!(env.mean_loss(&p, LossKind::Squared) < 1e-12);
    }

    #[test]
    fn erm_diverging_step_is_an_error() {
        let env = EnvDataset::new(array![[10.0], [-10.0]], array![1.0, 2.0], 0).unwrap();
        let err = fit_erm(&[env], LossKind::Squared, &cfg(BaselineMethod::Erm, 2000, 10.0)).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn ridge_on_repeated_point_matches_closed_form() {
        // mean (1 − θ)² + λθ²  ⇒  θ = 1 / (1 + λ)
        let n = 7;
        let env = EnvDataset::new(Array2::ones((n, 1)), Array1::ones(n), 0).unwrap();
        let mut c = cfg(BaselineMethod::Ridge, 4000, 0.1);
        c.reg_lambda = 0.5;
        let p = fit_ridge(&[env], LossKind::Squared, &c).unwrap();
        assert!((p.theta[0] - 1.0 / 1.5).abs() < 1e-9);
    }

    #[test]
    fn lasso_huge_penalty_zeroes_everything() {
        let env = EnvDataset::new(array![[1.0, 0.5], [0.2, -1.0]], array![3.0, -2.0], 0).unwrap();
        let mut c = cfg(BaselineMethod::Lasso, 200, 0.05);
        c.reg_lambda = 1e4;
        let p = fit_lasso(&[env], LossKind::Squared, &c).unwrap();
        assert!(p.theta.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn irm_penalty_examples() {
        let zero = EnvDataset::new(array![[1.0]], array![1.0], 0).unwrap();
        let p = ModelParams::new(vec![1.0], None).unwrap();
        assert_eq!(irm_penalty(&p, LossKind::Squared, &[zero]), 0.0);
        let off = EnvDataset::new(array![[1.0]], array![2.0], 0).unwrap();
        assert_eq!(irm_scalar_grad(&p, LossKind::Squared, &off), -2.0);
        assert_eq!(irm_penalty(&p, LossKind::Squared, &[off]), 4.0);
    }

    #[test]
    fn irm_needs_two_envs() {
        let env = EnvDataset::new(array![[1.0]], array![2.0], 0).unwrap();
        let mut c = cfg(BaselineMethod::Irm, 10, 0.01);
        c.reg_lambda = 1.0;
        assert!(fit_irm(&[env], LossKind::Squared, &c).is_err());
    }

    #[test]
    fn irm_objective_gradient_matches_finite_differences() {
        let envs = vec![
            EnvDataset::new(array![[1.0, 0.5], [0.2, -1.0], [0.3, 0.3]], array![1.0, -0.3, 0.2], 0).unwrap(),
            EnvDataset::new(array![[-0.4, 1.0], [1.2, 0.1]], array![0.5, 1.0], 1).unwrap(),
        ];
        let lam = 3.0;
        for kind in [LossKind::Squared, LossKind::Logistic] {
            let envs: Vec<EnvDataset> = envs
                .iter()
                .map(|e| {
                    let y = if kind == LossKind::Logistic { e.y.mapv(|v| (v > 0.4) as u8 as f64) } else { e.y.clone() };
                    EnvDataset::new(e.x.clone(), y, e.env_id).unwrap()
                })
                .collect();
            let objective = |t: &[f64], b: f64| {
                let p = ModelParams::new(t.to_vec(), Some(b)).unwrap();
                envs.iter().map(|e| e.mean_loss(&p, kind)).sum::<f64>() + lam * irm_penalty(&p, kind, &envs)
            };
            let at = [0.7, -0.4];
            let b0 = 0.2;
            let h = 1e-6;
            let (g, gb) = irm_objective_grad(&ModelParams::new(at.to_vec(), Some(b0)).unwrap(), kind, &envs, lam);
            for k in 0..2 {
                let mut a = at;
                let mut b = at;
                a[k] += h;
                b[k] -= h;
                let fd = (objective(&a, b0) - objective(&b, b0)) / (2.0 * h);
                assert!((g[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{kind:?} {k}: {} vs {fd}", g[k]);
            }
            let fdb = (objective(&at, b0 + h) - objective(&at, b0 - h)) / (2.0 * h);
            assert!((gb - fdb).abs() < 1e-6 * (1.0 + fdb.abs()));
        }
    }
}

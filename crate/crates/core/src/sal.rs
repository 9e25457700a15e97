//! The alternating trainer: robust θ steps under the current cost, then
//! weight steps along an approximate hypergradient of the stability objective
//!
//! ```text
//! R(θ(w)) = mean_e L^e(θ(w)) + α · (max_e L^e − min_e L^e)
//! ∂R/∂w  ≈ (∂R/∂θ) · (∂θ/∂X_A) · (∂X_A/∂w)
//! ```
//!
//! `∂θ/∂X_A` is the running sum `−ε_θ Σ_t ∂(∇_θ L̂(θ_t; X_A))/∂X_A` collected
//! while θ descends, and `∂X_A/∂w` is the per-coordinate trace collected by the
//! adversary, averaged over the θ steps of the phase.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{self, AdvConfig};
use crate::cost::{project, CovariateWeights};
use crate::error::{Result, SalError};
use crate::model::{self, EnvDataset, LossKind, ModelParams};
use crate::rng::{unit_direction, SalRng};

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalConfig {
    pub outer_iters: usize,
    pub theta_iters: usize,
    #[serde(default = "default_one")]
    pub w_iters: usize,
    pub ascent_steps: usize,
    pub eps_x: f64,
    pub eps_theta: f64,
    pub eps_w: f64,
    pub lambda: f64,
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit_intercept: bool,
}

impl Default for SalConfig {
    fn default() -> Self {
        Self {
            outer_iters: 20,
            theta_iters: 50,
            w_iters: 1,
            ascent_steps: 10,
            eps_x: 0.05,
            eps_theta: 0.05,
            eps_w: 1.0,
            lambda: 5.0,
            alpha: 1.0,
            seed: 0,
            fit_intercept: false,
        }
    }
}

impl SalConfig {
    pub fn adv(&self) -> AdvConfig {
        AdvConfig {
            lambda: self.lambda,
            eps_x: self.eps_x,
            ascent_steps: self.ascent_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adv().validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SalError::InvalidInput(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("eps_theta", self.eps_theta)?;
        if !(self.eps_w >= 0.0 && self.eps_w.is_finite()) {
            return Err(SalError::InvalidInput(format!("eps_w must be >= 0, got {}", self.eps_w)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(SalError::InvalidInput(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    fn learns_weights(&self) -> bool {
        self.eps_w > 0.0 && self.w_iters > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub outer_iter: usize,
    pub r_value: f64,
    pub env_losses: Vec<f64>,
    pub w: Vec<f64>,
    pub theta: Vec<f64>,
    pub intercept: Option<f64>,
}

/// A fitted model plus how it was obtained. Serialises to the documented
/// `{"theta", "intercept", "w", "config", "history"}` schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub method: String,
    #[serde(flatten)]
    pub params: ModelParams,
    #[serde(rename = "w")]
    pub weights: CovariateWeights,
    pub loss: LossKind,
    pub config: serde_json::Value,
    #[serde(default)]
    pub history: Vec<HistoryEntry>,
    /// Tool version, config hash and seed of the run that wrote the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TrainedModel = serde_json::from_str(s)?;
        m.params.check_finite()?;
        if m.weights.len() != m.params.dim() {
            return Err(SalError::DimensionMismatch {
                expected: m.params.dim(),
                got: m.weights.len(),
            });
        }
        Ok(m)
    }
}

/// Mean environment loss plus `alpha` times the largest pairwise gap.
pub fn r_objective(per_env_losses: &[f64], alpha: f64) -> Result<f64> {
    if per_env_losses.is_empty() {
        return Err(SalError::InvalidInput("R needs at least one environment".into()));
    }
    let n = per_env_losses.len() as f64;
    let mean = per_env_losses.iter().sum::<f64>() / n;
    let (lo, hi) = extremes(per_env_losses);
    Ok(mean + alpha * (per_env_losses[hi] - per_env_losses[lo]))
}

/// Indices of the min and max entries; earliest index wins ties.
fn extremes(v: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[lo] {
            lo = i;
        }
        if x > v[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Number of parameters: theta plus an optional intercept.
fn n_params(params: &ModelParams) -> usize {
    params.dim() + usize::from(params.intercept.is_some())
}

/// Output of one θ phase.
#[derive(Debug, Clone)]
pub struct ThetaPhase {
    pub params: ModelParams,
    /// `∂θ/∂X_A` per sample: shape `(n, p, m)`, `p` counting the intercept last.
    pub dtheta_dxa: Array3<f64>,
    /// `∂X_A/∂w` per sample and coordinate, averaged over the phase's θ steps.
    pub dxa_dw: Array2<f64>,
}

/// Runs `cfg.theta_iters` gradient steps on the adversarial surrogate, each
/// preceded by a fresh ascent from the clean pooled data.
pub fn train_theta(
    params: &ModelParams,
    kind: LossKind,
    w: &CovariateWeights,
    envs: &[EnvDataset],
    cfg: &SalConfig,
) -> Result<ThetaPhase> {
    let pooled = model::pool(envs)?;
    theta_phase(params, kind, w, &pooled, cfg, true)
}

pub(crate) fn theta_phase(
    params: &ModelParams,
    kind: LossKind,
    w: &CovariateWeights,
    pooled: &EnvDataset,
    cfg: &SalConfig,
    track: bool,
) -> Result<ThetaPhase> {
    cfg.validate()?;
    let (n, m) = pooled.x.dim();
    if params.dim() != m || w.len() != m {
        return Err(SalError::DimensionMismatch {
            expected: m,
            got: if params.dim() != m { params.dim() } else { w.len() },
        });
    }
    for &y in pooled.y.iter() {
        kind.check_target(y)?;
    }
    let p = n_params(params);
    let adv = cfg.adv();
    let w2 = w.squared();
    let scale = adversary::data_scale(pooled);
    let inv_n = 1.0 / n as f64;

    let mut theta = params.clone();
    let mut mixed_sum = if track { Array3::zeros((n, p, m)) } else { Array3::zeros((0, p, m)) };
    let mut trace_sum = if track { Array2::zeros((n, m)) } else { Array2::zeros((0, m)) };
    let mut grad = vec![0.0; m];

    for _ in 0..cfg.theta_iters {
        let state = adversary::ascend_unchecked(&theta, kind, &w2, pooled, &adv, scale)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for i in 0..n {
            let xa = state.x_a.row(i);
            let xa = xa.as_slice().expect("row-major");
            let y = pooled.y[i];
            let u = theta.predict(xa);
            let d1 = kind.d1(u, y);
            for (g, x) in grad.iter_mut().zip(xa) {
                *g += d1 * x;
            }
            grad_b += d1;
            if track {
                let mut dst = mixed_sum.index_axis_mut(Axis(0), i);
                model::add_mixed_grad(dst.slice_mut(ndarray::s![..m, ..]), inv_n, &theta.theta, kind, u, xa, y);
                if theta.intercept.is_some() {
                    let d2 = kind.d2(u, y) * inv_n;
                    for k in 0..m {
                        dst[[m, k]] += d2 * theta.theta[k];
                    }
                }
            }
        }
        if track {
            trace_sum.scaled_add(1.0, &state.trace_dxa_dw);
        }
        for (t, g) in theta.theta.iter_mut().zip(&grad) {
            *t -= cfg.eps_theta * g * inv_n;
        }
        if let Some(b) = theta.intercept.as_mut() {
            *b -= cfg.eps_theta * grad_b * inv_n;
        }
        if theta.check_finite().is_err() {
            return Err(SalError::NonFinite("theta diverged; eps_theta too large".into()));
        }
    }
    if track {
        mixed_sum.mapv_inplace(|v| -cfg.eps_theta * v);
        if cfg.theta_iters > 0 {
            trace_sum.mapv_inplace(|v| v / cfg.theta_iters as f64);
        }
    }
    Ok(ThetaPhase {
        params: theta,
        dtheta_dxa: mixed_sum,
        dxa_dw: trace_sum,
    })
}

/// Chains `(∂R/∂θ) · (∂θ/∂X_A) · (∂X_A/∂w)` into an m-vector.
pub fn grad_w(dtheta_dxa: &Array3<f64>, dxa_dw: &Array2<f64>, dr_dtheta: &[f64]) -> Result<Vec<f64>> {
    let (n, p, m) = dtheta_dxa.dim();
    if dxa_dw.dim() != (n, m) {
        return Err(SalError::DimensionMismatch {
            expected: n * m,
            got: dxa_dw.len(),
        });
    }
    if dr_dtheta.len() != p {
        return Err(SalError::DimensionMismatch {
            expected: p,
            got: dr_dtheta.len(),
        });
    }
    let mut g = vec![0.0; m];
    for i in 0..n {
        let block = dtheta_dxa.index_axis(Axis(0), i);
        for (j, gj) in g.iter_mut().enumerate() {
            let t = dxa_dw[[i, j]];
            if t == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for a in 0..p {
                s += dr_dtheta[a] * block[[a, j]];
            }
            *gj += s * t;
        }
    }
    Ok(g)
}

/// Clean per-environment mean losses.
pub fn env_losses(params: &ModelParams, kind: LossKind, envs: &[EnvDataset]) -> Vec<f64> {
    envs.iter().map(|e| e.mean_loss(params, kind)).collect()
}

/// `∂R/∂θ` on the clean training environments (intercept last, if any).
pub fn dr_dtheta(params: &ModelParams, kind: LossKind, envs: &[EnvDataset], alpha: f64) -> Vec<f64> {
    let grads: Vec<Vec<f64>> = envs
        .iter()
        .map(|e| {
            let (mut g, gb) = e.mean_grad(params, kind);
            if params.intercept.is_some() {
                g.push(gb);
            }
            g
        })
        .collect();
    let losses = env_losses(params, kind, envs);
    let (lo, hi) = extremes(&losses);
    let k = envs.len() as f64;
    let p = grads[0].len();
    (0..p)
        .map(|a| grads.iter().map(|g| g[a]).sum::<f64>() / k + alpha * (grads[hi][a] - grads[lo][a]))
        .collect()
}

/// State right after a θ phase, sufficient to replay the phase with other weights.
#[derive(Debug, Clone)]
pub struct TrainingSnapshot {
    pub outer_iter: usize,
    /// θ at the start of the phase.
    pub theta_start: ModelParams,
    pub weights: CovariateWeights,
    pub r_value: f64,
    pub grad_w: Vec<f64>,
}

/// Full alternating optimisation starting from `w = 1`, `θ = 0`.
pub fn train(envs: &[EnvDataset], kind: LossKind, cfg: &SalConfig) -> Result<TrainedModel> {
    train_observed(envs, kind, cfg, |_| {})
}

/// As [`train`], calling `observe` after every θ phase.
pub fn train_observed(
    envs: &[EnvDataset],
    kind: LossKind,
    cfg: &SalConfig,
    mut observe: impl FnMut(&TrainingSnapshot),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let m = model::check_envs(envs)?;
    let pooled = model::pool(envs)?;
    let mut w = CovariateWeights::ones(m);
    let mut params = ModelParams::zeros(m, cfg.fit_intercept);
    let mut history = Vec::with_capacity(cfg.outer_iters);
    let track = cfg.learns_weights();

    for it in 0..cfg.outer_iters {
        let start = params.clone();
        let phase = theta_phase(&params, kind, &w, &pooled, cfg, track)?;
        params = phase.params;
        let losses = env_losses(&params, kind, envs);
        let r = r_objective(&losses, cfg.alpha)?;
        if !r.is_finite() {
            return Err(SalError::NonFinite(format!("R at outer iteration {it}")));
        }
        let g = if track {
            grad_w(&phase.dtheta_dxa, &phase.dxa_dw, &dr_dtheta(&params, kind, envs, cfg.alpha))?
        } else {
            vec![0.0; m]
        };
        observe(&TrainingSnapshot {
            outer_iter: it,
            theta_start: start,
            weights: w.clone(),
            r_value: r,
            grad_w: g.clone(),
        });
        if track {
            for _ in 0..cfg.w_iters {
                let raw: Vec<f64> = w
                    .as_slice()
                    .iter()
                    .zip(&g)
                    .map(|(wi, gi)| wi - cfg.eps_w * gi)
                    .collect();
                w = project(&raw)?;
            }
        }
        history.push(HistoryEntry {
            outer_iter: it,
            r_value: r,
            env_losses: losses,
            w: w.as_slice().to_vec(),
            theta: params.theta.clone(),
            intercept: params.intercept,
        });
    }

    Ok(TrainedModel {
        method: "sal".into(),
        params,
        weights: w,
        loss: kind,
        config: serde_json::to_value(cfg)?,
        history,
        provenance: None,
    })
}

/// How an approximate weight step compares with random steps of equal length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    /// Share of random directions beaten (ties count one half).
    pub fraction: f64,
    pub wins: usize,
    pub ties: usize,
    pub n_random: usize,
    pub step: f64,
    pub approx_delta_r: f64,
    pub random_delta_r: Vec<f64>,
}

/// `R` after replaying the snapshot's θ phase with weights `w`.
fn replay_r(
    snap: &TrainingSnapshot,
    w: &CovariateWeights,
    envs: &[EnvDataset],
    pooled: &EnvDataset,
    kind: LossKind,
    cfg: &SalConfig,
) -> Result<f64> {
    let phase = theta_phase(&snap.theta_start, kind, w, pooled, cfg, false)?;
    r_objective(&env_losses(&phase.params, kind, envs), cfg.alpha)
}

/// Compares `ΔR` along `−grad_w` with `ΔR` along each of `directions`, all
/// scaled to length `step` and projected back onto `W`.
pub fn compare_directions(
    snap: &TrainingSnapshot,
    envs: &[EnvDataset],
    kind: LossKind,
    cfg: &SalConfig,
    directions: &[Vec<f64>],
    step: f64,
) -> Result<AccuracyReport> {
    let pooled = model::pool(envs)?;
    let m = snap.weights.len();
    let moved = |dir: &[f64]| -> Result<CovariateWeights> {
        let raw: Vec<f64> = snap
            .weights
            .as_slice()
            .iter()
            .zip(dir)
            .map(|(w, d)| w + step * d)
            .collect();
        project(&raw)
    };
    let base = replay_r(snap, &snap.weights, envs, &pooled, kind, cfg)?;
    let norm = snap.grad_w.iter().map(|g| g * g).sum::<f64>().sqrt();
    let approx_dir: Vec<f64> = if norm > 0.0 {
        snap.grad_w.iter().map(|g| -g / norm).collect()
    } else {
        vec![0.0; m]
    };
    let approx = replay_r(snap, &moved(&approx_dir)?, envs, &pooled, kind, cfg)? - base;
    let random: Vec<f64> = directions
        .par_iter()
        .map(|d| Ok(replay_r(snap, &moved(d)?, envs, &pooled, kind, cfg)? - base))
        .collect::<Result<_>>()?;
    let tol = 1e-14 * (1.0 + base.abs());
    let mut wins = 0;
    let mut ties = 0;
    for &r in &random {
        if (approx - r).abs() <= tol {
            ties += 1;
        } else if approx < r {
            wins += 1;
        }
    }
    let n = random.len().max(1) as f64;
    Ok(AccuracyReport {
        fraction: (wins as f64 + 0.5 * ties as f64) / n,
        wins,
        ties,
        n_random: random.len(),
        step,
        approx_delta_r: approx,
        random_delta_r: random,
    })
}

/// Gradient-accuracy diagnostic over `n_random` uniformly random unit directions.
pub fn gradient_accuracy_check(
    snap: &TrainingSnapshot,
    envs: &[EnvDataset],
    kind: LossKind,
    cfg: &SalConfig,
    n_random: usize,
    step: f64,
    seed: u64,
) -> Result<AccuracyReport> {
    if n_random == 0 {
        return Err(SalError::InvalidInput("n_random must be >= 1".into()));
    }
    let mut rng = SalRng::new(seed);
    let dirs: Vec<Vec<f64>> = (0..n_random)
        .map(|_| unit_direction(&mut rng, snap.weights.len()))
        .collect();
    compare_directions(snap, envs, kind, cfg, &dirs, step)
}

/// Trains until `outer_iter` and returns the snapshot taken there.
pub fn snapshot_at(
    envs: &[EnvDataset],
    kind: LossKind,
    cfg: &SalConfig,
    outer_iter: usize,
) -> Result<TrainingSnapshot> {
    if outer_iter >= cfg.outer_iters {
        return Err(SalError::InvalidInput(format!(
            "snapshot iteration {outer_iter} beyond outer_iters {}",
            cfg.outer_iters
        )));
    }
    let mut short = cfg.clone();
    short.outer_iters = outer_iter + 1;
    let mut snap = None;
    train_observed(envs, kind, &short, |s| {
        if s.outer_iter == outer_iter {
            snap = Some(s.clone());
        }
    })?;
    snap.ok_or_else(|| SalError::InvalidInput("snapshot not reached".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn r_objective_examples() {
        assert!((r_objective(&[0.4, 0.6], 2.0).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(r_objective(&[0.5, 0.5], 7.0).unwrap(), 0.5);
        assert_eq!(r_objective(&[0.3], 10.0).unwrap(), 0.3);
        assert!(r_objective(&[], 1.0).is_err());
    }

    fn small_envs() -> Vec<EnvDataset> {
        vec![
            EnvDataset::new(array![[1.0, 0.5], [0.2, -1.0], [-0.7, 0.3]], array![1.0, 0.0, -0.5], 0).unwrap(),
            EnvDataset::new(array![[0.4, 1.0], [-1.0, -0.2]], array![0.6, -1.0], 1).unwrap(),
        ]
    }

    #[test]
    fn zero_theta_iters_leave_params() {
        let cfg = SalConfig { theta_iters: 0, ..SalConfig::default() };
        let start = ModelParams::new(vec![0.3, -0.1], None).unwrap();
        let ph = train_theta(&start, LossKind::Squared, &CovariateWeights::ones(2), &small_envs(), &cfg).unwrap();
        assert_eq!(ph.params, start);
        assert!(ph.dtheta_dxa.iter().all(|v| *v == 0.0));
        assert!(ph.dxa_dw.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_one_step_matches_hand_update() {
        let env = EnvDataset::new(array![[0.0]], array![1.0], 0).unwrap();
        let cfg = SalConfig {
            theta_iters: 1,
            ascent_steps: 3,
            eps_x: 0.1,
            eps_theta: 0.2,
            lambda: 2.0,
            ..SalConfig::default()
        };
        let start = ModelParams::new(vec![1.0], None).unwrap();
        // Hand ascent on φ(x̂) = (1 − x̂)² − 2x̂² from x = 0:
        // x̂ ← (x̂ + 0.1·(−2)(1 − x̂)) / (1 + 0.1·2·2).
        let mut xhat: f64 = 0.0;
        for _ in 0..3 {
            xhat = (xhat - 0.2 * (1.0 - xhat)) / 1.4;
        }
        let g = -2.0 * (1.0 - xhat) * xhat;
        let ph = train_theta(&start, LossKind::Squared, &CovariateWeights::ones(1), &[env], &cfg).unwrap();
        assert!((ph.params.theta[0] - (1.0 - 0.2 * g)).abs() < 1e-15);
    }

    #[test]
    fn grad_w_zero_factors() {
        let d = Array3::from_elem((3, 2, 2), 0.7);
        let t = Array2::from_elem((3, 2), -0.2);
        assert_eq!(grad_w(&d, &t, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(grad_w(&d, &Array2::zeros((3, 2)), &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(grad_w(&d, &t, &[1.0]).is_err());
        assert!(grad_w(&d, &Array2::zeros((2, 2)), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn grad_w_scalar_chain() {
        // 1-D, one sample (x = 0.5, y = 1), θ = 1, λ = 2, two ascent steps,
        // one θ step. Each factor is worked out by hand from the update rules.
        let (x, y, th, lam, ex, et) = (0.5_f64, 1.0_f64, 1.0_f64, 2.0_f64, 0.1_f64, 0.2_f64);
        let step = |xh: f64| x + (xh - x + ex * (-2.0 * (y - th * xh) * th)) / (1.0 + 2.0 * ex * lam);
        let x1 = step(x);
        let x2 = step(x1);
        let dxa_dw = -2.0 * ex * lam * ((x - x) + (x1 - x));
        let mixed = 2.0 * x2 * th - 2.0 * (y - th * x2);
        let dtheta_dxa = -et * mixed;
        let th_new = th - et * (-2.0 * (y - th * x2) * x2);
        let dr = -2.0 * (y - th_new * x) * x;

        let env = EnvDataset::new(array![[x]], array![y], 0).unwrap();
        let cfg = SalConfig {
            theta_iters: 1,
            ascent_steps: 2,
            eps_x: ex,
            eps_theta: et,
            lambda: lam,
            alpha: 0.0,
            ..SalConfig::default()
        };
        let start = ModelParams::new(vec![th], None).unwrap();
        let ph = train_theta(&start, LossKind::Squared, &CovariateWeights::ones(1), &[env.clone()], &cfg).unwrap();
        assert!((ph.params.theta[0] - th_new).abs() < 1e-15);
        assert!((ph.dxa_dw[[0, 0]] - dxa_dw).abs() < 1e-15);
        assert!((ph.dtheta_dxa[[0, 0, 0]] - dtheta_dxa).abs() < 1e-15);
        let drt = dr_dtheta(&ph.params, LossKind::Squared, &[env], 0.0);
        assert!((drt[0] - dr).abs() < 1e-15);
        let g = grad_w(&ph.dtheta_dxa, &ph.dxa_dw, &drt).unwrap();
        assert!((g[0] - dr * dtheta_dxa * dxa_dw).abs() < 1e-15);
    }

    #[test]
    fn zero_outer_iters_returns_initial_state() {
        let cfg = SalConfig { outer_iters: 0, ..SalConfig::default() };
        let m = train(&small_envs(), LossKind::Squared, &cfg).unwrap();
        assert_eq!(m.weights, CovariateWeights::ones(2));
        assert_eq!(m.params, ModelParams::zeros(2, false));
        assert!(m.history.is_empty());
    }

    #[test]
    fn weights_stay_in_w_and_history_is_bounded() {
        let cfg = SalConfig {
            outer_iters: 6,
            theta_iters: 10,
            eps_w: 50.0,
            lambda: 3.0,
            ..SalConfig::default()
        };
        let m = train(&small_envs(), LossKind::Squared, &cfg).unwrap();
        assert!(m.history.len() <= cfg.outer_iters);
        for h in &m.history {
            assert!(CovariateWeights::new(h.w.clone()).is_ok());
        }
    }

    #[test]
    fn model_json_schema() {
        let cfg = SalConfig { outer_iters: 2, theta_iters: 3, ..SalConfig::default() };
        let m = train(&small_envs(), LossKind::Squared, &cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        for key in ["theta", "intercept", "w", "config", "history"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(TrainedModel::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn accuracy_ties_when_weights_are_inert() {
        let cfg = SalConfig {
            outer_iters: 3,
            theta_iters: 5,
            ascent_steps: 0,
            ..SalConfig::default()
        };
        let envs = small_envs();
        let snap = snapshot_at(&envs, LossKind::Squared, &cfg, 1).unwrap();
        let rep = gradient_accuracy_check(&snap, &envs, LossKind::Squared, &cfg, 20, 0.1, 3).unwrap();
        assert_eq!(rep.ties, 20);
        assert_eq!(rep.fraction, 0.5);
        let same = compare_directions(&snap, &envs, LossKind::Squared, &cfg, &[vec![0.0, 0.0]], 0.1).unwrap();
        assert!(same.fraction >= 0.0);
    }
}

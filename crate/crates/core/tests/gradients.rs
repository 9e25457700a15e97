//! Analytic derivatives against central finite differences on random probes.

use ndarray::{Array1, Array2};
use sal_core::baselines::{irm_objective_grad, irm_penalty};
use sal_core::cost::{cost, cost_grad_xhat, project};
use sal_core::model::{grad_theta, grad_x, loss, mixed_grad};
use sal_core::rng::SalRng;
use sal_core::sal::{dr_dtheta, env_losses, r_objective};
use sal_core::{EnvDataset, LossKind, ModelParams};

const PROBES: usize = 1000;
const H: f64 = 1e-5;
const KINDS: [LossKind; 3] = [LossKind::Squared, LossKind::Absolute, LossKind::Logistic];

fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    (f(at + H) - f(at - H)) / (2.0 * H)
}

/// Relative error with a unit floor, so near-zero derivatives are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn vec_in(rng: &mut SalRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

struct Probe {
    params: ModelParams,
    x: Vec<f64>,
    y: f64,
}

fn probe(rng: &mut SalRng, kind: LossKind) -> Probe {
    let m = 1 + rng.below(6);
    let intercept = (rng.uniform() < 0.5).then(|| rng.normal());
    let params = ModelParams::new(vec_in(rng, m, 1.0), intercept).unwrap();
    let x = vec_in(rng, m, 1.5);
    let y = match kind {
        LossKind::Logistic => f64::from(rng.uniform() < 0.5),
        _ => 2.0 * rng.normal(),
    };
    Probe { params, x, y }
}

/// True when a ±H stencil in any coordinate of `x` or `theta` could cross the absolute-loss kink.
fn near_kink(p: &Probe, kind: LossKind) -> bool {
    if kind != LossKind::Absolute {
        return false;
    }
    let reach: f64 = p.x.iter().chain(&p.params.theta).map(|v| v.abs()).fold(0.0, f64::max) + 1.0;
    (p.params.predict(&p.x) - p.y).abs() < 2.0 * H * reach
}

#[test]
pub fn loss_first_and_second_derivatives() {
    let mut rng = SalRng::new(1);
    for kind in KINDS {
        let mut checked = 0;
        for _ in 0..PROBES {
            let y = if kind == LossKind::Logistic { f64::from(rng.uniform() < 0.5) } else { 2.0 * rng.normal() };
            let u = 3.0 * rng.normal();
            if kind == LossKind::Absolute && (u - y).abs() < 2.0 * H {
                continue;
            }
            let d1 = central(|v| kind.value(v, y), u);
            assert!(rel_err(kind.d1(u, y), d1) < 1e-6, "{kind:?} d1 at u={u} y={y}: {} vs {d1}", kind.d1(u, y));
            let d2 = central(|v| kind.d1(v, y), u);
            assert!(rel_err(kind.d2(u, y), d2) < 1e-6, "{kind:?} d2 at u={u} y={y}: {} vs {d2}", kind.d2(u, y));
            checked += 1;
        }
        assert!(checked > PROBES * 9 / 10);
    }
}

#[test]
pub fn grad_theta_and_grad_x() {
    let mut rng = SalRng::new(2);
    for kind in KINDS {
        for _ in 0..PROBES {
            let p = probe(&mut rng, kind);
            if near_kink(&p, kind) {
                continue;
            }
            let gt = grad_theta(&p.params, kind, &p.x, p.y).unwrap();
            let gx = grad_x(&p.params, kind, &p.x, p.y).unwrap();
            for j in 0..p.x.len() {
                let fd_t = central(
                    |v| {
                        let mut q = p.params.clone();
                        q.theta[j] = v;
                        loss(&q, kind, &p.x, p.y).unwrap()
                    },
                    p.params.theta[j],
                );
                assert!(rel_err(gt[j], fd_t) < 1e-6, "{kind:?} dθ_{j}: {} vs {fd_t}", gt[j]);
                let fd_x = central(
                    |v| {
                        let mut x = p.x.clone();
                        x[j] = v;
                        loss(&p.params, kind, &x, p.y).unwrap()
                    },
                    p.x[j],
                );
                assert!(rel_err(gx[j], fd_x) < 1e-6, "{kind:?} dx_{j}: {} vs {fd_x}", gx[j]);
            }
        }
    }
}

#[test]
pub fn mixed_gradient_is_the_jacobian_of_grad_theta() {
    let mut rng = SalRng::new(3);
    for kind in KINDS {
        for _ in 0..PROBES {
            let p = probe(&mut rng, kind);
            if near_kink(&p, kind) {
                continue;
            }
            let j = mixed_grad(&p.params, kind, &p.x, p.y).unwrap();
            let m = p.x.len();
            for k in 0..m {
                let mut hi = p.x.clone();
                let mut lo = p.x.clone();
                hi[k] += H;
                lo[k] -= H;
                let gh = grad_theta(&p.params, kind, &hi, p.y).unwrap();
                let gl = grad_theta(&p.params, kind, &lo, p.y).unwrap();
                for a in 0..m {
                    let fd = (gh[a] - gl[a]) / (2.0 * H);
                    assert!((j[[a, k]] - fd).abs() < 1e-5, "{kind:?} J[{a},{k}]: {} vs {fd}", j[[a, k]]);
                }
            }
        }
    }
}

#[test]
pub fn transport_cost_gradient() {
    let mut rng = SalRng::new(4);
    for _ in 0..PROBES {
        let m = 1 + rng.below(6);
        let raw: Vec<f64> = (0..m).map(|_| 1.0 + 5.0 * rng.uniform()).collect();
        let w = project(&raw).unwrap();
        let x = vec_in(&mut rng, m, 1.0);
        let xhat = vec_in(&mut rng, m, 1.0);
        let g = cost_grad_xhat(&w, &xhat, &x).unwrap();
        for j in 0..m {
            let fd = central(
                |v| {
                    let mut z = xhat.clone();
                    z[j] = v;
                    cost(&w, &z, &x, 0.0, 0.0).unwrap()
                },
                xhat[j],
            );
            assert!(rel_err(g[j], fd) < 1e-6, "dc/dx̂_{j}: {} vs {fd}", g[j]);
        }
    }
}

fn random_envs(rng: &mut SalRng, m: usize, k: usize, n: usize) -> Vec<EnvDataset> {
    (0..k)
        .map(|e| {
            let shift = rng.normal();
            let x = Array2::from_shape_fn((n, m), |_| rng.normal() + shift);
            let y = Array1::from_shape_fn(n, |_| rng.normal() * (1.0 + e as f64));
            EnvDataset::new(x, y, e as i64).unwrap()
        })
        .collect()
}

/// Smallest gap between the extreme environment losses and their runners-up.
fn extreme_gap(l: &[f64]) -> f64 {
    let mut s = l.to_vec();
    s.sort_by(f64::total_cmp);
    (s[1] - s[0]).min(s[s.len() - 1] - s[s.len() - 2])
}

#[test]
pub fn stability_objective_gradient_in_theta() {
    let mut rng = SalRng::new(5);
    let mut checked = 0;
    for _ in 0..PROBES {
        let m = 1 + rng.below(4);
        let envs = random_envs(&mut rng, m, 3, 8);
        let intercept = (rng.uniform() < 0.5).then(|| rng.normal());
        let params = ModelParams::new(vec_in(&mut rng, m, 1.0), intercept).unwrap();
        let alpha = rng.uniform() * 2.0;
        let losses = env_losses(&params, LossKind::Squared, &envs);
        // The max/min terms are only differentiable away from ties.
        if extreme_gap(&losses) < 1e-3 {
            continue;
        }
        let g = dr_dtheta(&params, LossKind::Squared, &envs, alpha);
        let r_at = |q: &ModelParams| r_objective(&env_losses(q, LossKind::Squared, &envs), alpha).unwrap();
        for a in 0..g.len() {
            let fd = central(
                |v| {
                    let mut q = params.clone();
                    match q.theta.get_mut(a) {
                        Some(t) => *t = v,
                        None => q.intercept = Some(v),
                    }
                    r_at(&q)
                },
                params.theta.get(a).copied().or(params.intercept).unwrap(),
            );
            assert!(rel_err(g[a], fd) < 1e-6, "dR/dθ_{a}: {} vs {fd}", g[a]);
        }
        checked += 1;
    }
    assert!(checked > PROBES / 2);
}

#[test]
pub fn irm_objective_gradient() {
    let mut rng = SalRng::new(6);
    for _ in 0..PROBES {
        let m = 1 + rng.below(4);
        let k = 2 + rng.below(2);
        let envs = random_envs(&mut rng, m, k, 6);
        let intercept = (rng.uniform() < 0.5).then(|| rng.normal());
        let params = ModelParams::new(vec_in(&mut rng, m, 0.7), intercept).unwrap();
        let lam = 2.0 * rng.uniform();
        let kind = LossKind::Squared;
        let obj = |q: &ModelParams| {
            envs.iter().map(|e| e.mean_loss(q, kind)).sum::<f64>() + lam * irm_penalty(q, kind, &envs)
        };
        let (g, gb) = irm_objective_grad(&params, kind, &envs, lam);
        for a in 0..m {
            let fd = central(
                |v| {
                    let mut q = params.clone();
                    q.theta[a] = v;
                    obj(&q)
                },
                params.theta[a],
            );
            assert!(rel_err(g[a], fd) < 1e-6, "IRM dθ_{a}: {} vs {fd}", g[a]);
        }
        if let Some(b) = params.intercept {
            let fd = central(
                |v| {
                    let mut q = params.clone();
                    q.intercept = Some(v);
                    obj(&q)
                },
                b,
            );
            assert!(rel_err(gb, fd) < 1e-6, "IRM db: {gb} vs {fd}");
        }
    }
}

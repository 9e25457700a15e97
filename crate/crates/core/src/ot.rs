//! Exact optimal transport between small discrete distributions, and the
//! property checks built on it: ball membership, containment of the
//! weighted-cost ball in the plain one, and the penalty-form duality bound.
//!
//! Transport problems are solved as linear programs over the coupling
//! polytope, so results are exact up to simplex round-off.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rayon::prelude::*;
use serde::Serialize;

use crate::cost::CovariateWeights;
use crate::error::{Result, SalError};
use crate::rng::{derive_seed, SalRng};

/// Tolerance on `Σ probs = 1`.
pub const PROB_TOL: f64 = 1e-12;
/// Slack allowed by [`in_ball`].
pub const BALL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteDistribution {
    support: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(support: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(SalError::InvalidInput(format!(
                "{} support points with {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        let dim = support[0].len();
        if let Some(p) = support.iter().find(|p| p.len() != dim) {
            return Err(SalError::DimensionMismatch { expected: dim, got: p.len() });
        }
        if support.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SalError::NonFinite("support point".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(SalError::Infeasible(format!("negative probability in {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(SalError::Infeasible(format!("probabilities sum to {total}")));
        }
        for i in 0..support.len() {
            for j in 0..i {
                if support[i] == support[j] {
                    return Err(SalError::InvalidInput(format!("duplicate support point {:?}", support[i])));
                }
            }
        }
        Ok(Self { support, probs })
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        Self {
            support: vec![point],
            probs: vec![1.0],
        }
    }

    /// Uniform weights over distinct points.
    pub fn uniform(support: Vec<Vec<f64>>) -> Result<Self> {
        let n = support.len().max(1);
        Self::new(support, vec![1.0 / n as f64; n])
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.support.iter().zip(&self.probs).map(|(z, p)| p * f(z)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostKind {
    SqL2,
    L1,
    WeightedSqL2(CovariateWeights),
    WeightedL1(CovariateWeights),
}

impl CostKind {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let pairs = a.iter().zip(b);
        match self {
            CostKind::SqL2 => pairs.map(|(x, y)| (x - y) * (x - y)).sum(),
            CostKind::L1 => pairs.map(|(x, y)| (x - y).abs()).sum(),
            CostKind::WeightedSqL2(w) => crate::cost::weighted_sq_dist(w.as_slice(), a, b),
            CostKind::WeightedL1(w) => pairs.zip(w.as_slice()).map(|((x, y), wi)| wi * (x - y).abs()).sum(),
        }
    }

    /// The same cost with all weights reset to one.
    pub fn unweighted(&self) -> CostKind {
        match self {
            CostKind::SqL2 | CostKind::WeightedSqL2(_) => CostKind::SqL2,
            CostKind::L1 | CostKind::WeightedL1(_) => CostKind::L1,
        }
    }

    fn weight_len(&self) -> Option<usize> {
        match self {
            CostKind::WeightedSqL2(w) | CostKind::WeightedL1(w) => Some(w.len()),
            _ => None,
        }
    }
}

/// Optimal transport cost under an arbitrary pairwise cost. Pairs with an
/// infinite cost are excluded from the coupling; if the remaining pairs
/// cannot carry the marginals the problem is infeasible.
pub fn wasserstein_with(p: &DiscreteDistribution, q: &DiscreteDistribution, cost: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(SalError::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    let (n, m) = (p.len(), q.len());
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(n * m);
    for a in &p.support {
        for b in &q.support {
            let c = cost(a, b);
            if c.is_nan() || c < 0.0 {
                return Err(SalError::NonFinite(format!("transport cost {c}")));
            }
            vars.push(c.is_finite().then(|| (lp.add_var(c, (0.0, f64::INFINITY)), c)));
        }
    }
    for (i, pi) in p.probs.iter().enumerate() {
        let row: Vec<_> = (0..m).filter_map(|j| vars[i * m + j].map(|(v, _)| (v, 1.0))).collect();
        if row.is_empty() && *pi > 0.0 {
            return Err(SalError::Infeasible(format!("source atom {i} has no finite-cost target")));
        }
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, *pi);
    }
    // The last column constraint is implied by the others.
    for (j, qj) in q.probs.iter().enumerate().take(m - 1) {
        let col: Vec<_> = (0..n).filter_map(|i| vars[i * m + j].map(|(v, _)| (v, 1.0))).collect();
        if col.is_empty() && *qj > 0.0 {
            return Err(SalError::Infeasible(format!("target atom {j} has no finite-cost source")));
        }
        lp.add_constraint(col.as_slice(), ComparisonOp::Eq, *qj);
    }
    let sol = lp.solve().map_err(|e| SalError::Infeasible(e.to_string()))?;
    Ok(vars
        .iter()
        .flatten()
        .map(|(v, c)| c * sol[*v].max(0.0))
        .sum())
}

pub fn wasserstein(p: &DiscreteDistribution, q: &DiscreteDistribution, cost: &CostKind) -> Result<f64> {
    if let Some(k) = cost.weight_len() {
        if k != p.dim() {
            return Err(SalError::DimensionMismatch { expected: p.dim(), got: k });
        }
    }
    wasserstein_with(p, q, |a, b| cost.eval(a, b))
}

pub fn in_ball(q: &DiscreteDistribution, p0: &DiscreteDistribution, rho: f64, cost: &CostKind) -> Result<bool> {
    Ok(wasserstein(q, p0, cost)? <= rho + BALL_TOL)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ContainmentReport {
    pub trials: usize,
    /// Trials with `W_{c_w}(Q, P0) ≤ ρ`.
    pub in_weighted_ball: usize,
    /// Of those, trials with `W_c(Q, P0) ≤ ρ`.
    pub in_plain_ball: usize,
    /// Worst observed `W_c − ρ` among weighted-ball members.
    pub max_excess: f64,
    pub violations: Vec<ContainmentViolation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentViolation {
    pub trial: usize,
    pub weighted: f64,
    pub plain: f64,
}

impl ContainmentReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn merge(mut self, other: ContainmentReport) -> Self {
        self.trials += other.trials;
        self.in_weighted_ball += other.in_weighted_ball;
        self.in_plain_ball += other.in_plain_ball;
        self.max_excess = self.max_excess.max(other.max_excess);
        self.violations.extend(other.violations);
        self
    }
}

/// Random `Q` near `p0`: support jittered by Gaussian noise of scale
/// `shrink·√ρ` with `shrink ~ U(0, 1]`, probabilities from a flat Dirichlet.
pub fn jitter(p0: &DiscreteDistribution, rho: f64, rng: &mut SalRng) -> DiscreteDistribution {
    let shrink = 1.0 - rng.uniform();
    let scale = shrink * rho.sqrt();
    let support = p0
        .support
        .iter()
        .map(|z| z.iter().map(|v| v + scale * rng.normal()).collect())
        .collect();
    let probs = rng.dirichlet_flat(p0.len());
    DiscreteDistribution { support, probs }
}

/// Checks on random `Q` that `W_{c_w}(Q,P0) ≤ ρ` implies `W_c(Q,P0) ≤ ρ`,
/// where `c` is `cost` with unit weights. Trials run in parallel, each on its
/// own derived seed.
pub fn containment_check(p0: &DiscreteDistribution, rho: f64, cost: &CostKind, n_trials: usize, seed: u64) -> Result<ContainmentReport> {
    if cost.weight_len().is_none() {
        return Err(SalError::InvalidInput("containment needs a weighted cost".into()));
    }
    let plain = cost.unweighted();
    let per_trial: Vec<Result<ContainmentReport>> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = SalRng::new(derive_seed(seed, "containment", t, 0));
            let q = jitter(p0, rho, &mut rng);
            let wq = wasserstein(&q, p0, cost)?;
            let mut rep = ContainmentReport {
                trials: 1,
                ..Default::default()
            };
            if wq <= rho {
                rep.in_weighted_ball = 1;
                let pq = wasserstein(&q, p0, &plain)?;
                rep.max_excess = pq - rho;
                if pq <= rho + BALL_TOL {
                    rep.in_plain_ball = 1;
                } else {
                    rep.violations.push(ContainmentViolation {
                        trial: t,
                        weighted: wq,
                        plain: pq,
                    });
                }
            } else {
                rep.max_excess = f64::NEG_INFINITY;
            }
            Ok(rep)
        })
        .collect();
    let mut total = ContainmentReport {
        max_excess: f64::NEG_INFINITY,
        ..Default::default()
    };
    for r in per_trial {
        total = total.merge(r?);
    }
    Ok(total)
}

/// `P0` translated along the first unit-weight coordinate so that
/// `W_{c_w}(Q0, P0) = ρ`; other coordinates are untouched.
pub fn boundary_q0(p0: &DiscreteDistribution, rho: f64, cost: &CostKind) -> Result<DiscreteDistribution> {
    let w = match cost {
        CostKind::WeightedSqL2(w) | CostKind::WeightedL1(w) => w.as_slice().to_vec(),
        _ => vec![1.0; p0.dim()],
    };
    if w.len() != p0.dim() {
        return Err(SalError::DimensionMismatch { expected: p0.dim(), got: w.len() });
    }
    let k = w.iter().position(|v| *v == 1.0).ok_or_else(|| SalError::InvalidInput("no unit-weight coordinate".into()))?;
    let shift = match cost {
        CostKind::SqL2 | CostKind::WeightedSqL2(_) => rho.sqrt(),
        CostKind::L1 | CostKind::WeightedL1(_) => rho,
    };
    let support = p0
        .support
        .iter()
        .map(|z| {
            let mut z = z.clone();
            z[k] += shift;
            z
        })
        .collect();
    Ok(DiscreteDistribution {
        support,
        probs: p0.probs.clone(),
    })
}

/// A 1-D regression instance for the duality check: atoms `(x_i, y_i)` with
/// masses `p_i`, squared loss `(y − θx)²` and cost `(Δx)²`, labels fixed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityInstance {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub probs: Vec<f64>,
    pub theta: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub primal_sup: f64,
    pub dual_min: f64,
    pub best_lambda: f64,
    pub q_in_ball: usize,
    pub q_sampled: usize,
}

impl DualityReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.primal_sup <= self.dual_min + tol
    }
}

pub const XI_GRID: usize = 200;
pub const LAMBDA_GRID: usize = 50;

impl DualityInstance {
    pub fn random(rng: &mut SalRng) -> Self {
        let m = 1 + rng.below(5);
        let xs: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let ys = (0..m).map(|_| rng.normal()).collect();
        Self {
            xs,
            ys,
            probs: rng.dirichlet_flat(m),
            theta: rng.normal(),
            rho: 0.05 + 0.95 * rng.uniform(),
        }
    }

    fn loss(&self, xi: f64, y: f64) -> f64 {
        (y - self.theta * xi).powi(2)
    }

    /// `ξ` grid covering the data ± 5√ρ.
    pub fn xi_grid(&self) -> Vec<f64> {
        let pad = 5.0 * self.rho.sqrt();
        let lo = self.xs.iter().copied().fold(f64::INFINITY, f64::min) - pad;
        let hi = self.xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad;
        (0..XI_GRID).map(|k| lo + (hi - lo) * k as f64 / (XI_GRID - 1) as f64).collect()
    }

    /// `λρ + E_{P0}[max_{ξ∈grid} ℓ(ξ) − λ(ξ − x)²]`.
    pub fn dual(&self, lambda: f64, grid: &[f64]) -> f64 {
        let s: f64 = self
            .xs
            .iter()
            .zip(&self.ys)
            .zip(&self.probs)
            .map(|((&x, &y), p)| {
                p * grid
                    .iter()
                    .map(|&xi| self.loss(xi, y) - lambda * (xi - x).powi(2))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        lambda * self.rho + s
    }

    fn p0(&self) -> Result<DiscreteDistribution> {
        DiscreteDistribution::new(
            self.xs.iter().zip(&self.ys).map(|(x, y)| vec![*x, *y]).collect(),
            self.probs.clone(),
        )
    }

    /// Compares the largest `E_Q[ℓ]` over sampled in-ball `Q` (supported on
    /// the `ξ` grid) with the smallest dual value over a log λ grid.
    pub fn check(&self, n_q: usize, rng: &mut SalRng) -> Result<DualityReport> {
        let grid = self.xi_grid();
        let step = grid[1] - grid[0];
        let snap = |v: f64| {
            let k = ((v - grid[0]) / step).round().clamp(0.0, (XI_GRID - 1) as f64) as usize;
            grid[k]
        };
        let label_cost = |a: &[f64], b: &[f64]| {
            if a[1] == b[1] {
                (a[0] - b[0]).powi(2)
            } else {
                f64::INFINITY
            }
        };
        let p0 = self.p0()?;
        let mut primal_sup = f64::NEG_INFINITY;
        let mut q_in_ball = 0;
        for _ in 0..n_q {
            // Each atom splits into two grid atoms with the same label.
            let mut atoms: Vec<(f64, f64, f64)> = Vec::new();
            let scale = (1.0 - rng.uniform()) * 2.0 * self.rho.sqrt();
            for ((&x, &y), &p) in self.xs.iter().zip(&self.ys).zip(&self.probs) {
                let share = rng.uniform();
                for part in [share, 1.0 - share] {
                    let xi = snap(x + scale * rng.normal());
                    match atoms.iter_mut().find(|a| a.0 == xi && a.1 == y) {
                        Some(a) => a.2 += p * part,
                        None => atoms.push((xi, y, p * part)),
                    }
                }
            }
            let total: f64 = atoms.iter().map(|a| a.2).sum();
            let q = DiscreteDistribution {
                support: atoms.iter().map(|a| vec![a.0, a.1]).collect(),
                probs: atoms.iter().map(|a| a.2 / total).collect(),
            };
            if wasserstein_with(&q, &p0, label_cost)? <= self.rho {
                q_in_ball += 1;
                primal_sup = primal_sup.max(q.expect(|z| self.loss(z[0], z[1])));
            }
        }
        let (best_lambda, dual_min) = (0..LAMBDA_GRID)
            .map(|k| {
                let lam = 10f64.powf(-2.0 + 5.0 * k as f64 / (LAMBDA_GRID - 1) as f64);
                (lam, self.dual(lam, &grid))
            })
            .fold((f64::NAN, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
        Ok(DualityReport {
            primal_sup,
            dual_min,
            best_lambda,
            q_in_ball,
            q_sampled: n_q,
        })
    }
}

// ---------------------------------------------------------------------------
// Property suites

/// Outcome of [`verify_containment`] over random 2-D instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentSuite {
    pub instances: usize,
    /// Random `Q` checked per cost form.
    pub trials: usize,
    pub in_weighted_ball: usize,
    pub violations: usize,
    /// Largest `|W_{c_w}(Q0, P0) − ρ|` over the constructed boundary distributions.
    pub boundary_max_error: f64,
}

impl ContainmentSuite {
    pub fn passed(&self, boundary_tol: f64) -> bool {
        self.violations == 0 && self.boundary_max_error <= boundary_tol
    }
}

/// Random `Q` per instance and cost form.
pub const SUITE_Q_PER_COST: usize = 4;

/// Support moves of typical transport cost `10^{-u}·ρ`, `u ~ U(0, 2)`, each
/// coordinate scaled down by its weight so that most draws land in the
/// weighted ball with a share of them near its boundary. Probabilities are
/// a mixture of `P0`'s and a flat Dirichlet draw, with log-uniform weight.
fn scaled_jitter(p0: &DiscreteDistribution, rho: f64, cost: &CostKind, rng: &mut SalRng) -> DiscreteDistribution {
    let budget = rho * 10f64.powf(-2.0 * rng.uniform());
    let w = match cost {
        CostKind::WeightedSqL2(w) | CostKind::WeightedL1(w) => w.as_slice().to_vec(),
        _ => vec![1.0; p0.dim()],
    };
    let radius = match cost {
        CostKind::SqL2 | CostKind::WeightedSqL2(_) => budget.sqrt(),
        CostKind::L1 | CostKind::WeightedL1(_) => budget,
    };
    let scale = radius / (p0.dim() as f64).sqrt();
    let support = p0
        .support
        .iter()
        .map(|z| z.iter().zip(&w).map(|(v, wi)| v + scale / wi * rng.normal()).collect())
        .collect();
    let mix = 10f64.powf(-3.0 * rng.uniform());
    let fresh = rng.dirichlet_flat(p0.len());
    let probs = p0.probs.iter().zip(&fresh).map(|(a, b)| (1.0 - mix) * a + mix * b).collect();
    DiscreteDistribution { support, probs }
}

/// Weights used by the containment suite: one free and one expensive coordinate.
pub const SUITE_WEIGHTS: [f64; 2] = [1.0, 5.0];

fn random_p0(rng: &mut SalRng, max_atoms: usize) -> Result<DiscreteDistribution> {
    let k = 1 + rng.below(max_atoms);
    let support = (0..k).map(|_| vec![rng.normal(), rng.normal()]).collect();
    DiscreteDistribution::new(support, rng.dirichlet_flat(k))
}

/// For `n` random instances (2-D, at most 10 atoms, `w = [1, 5]`) and both
/// the squared and the absolute cost: [`SUITE_Q_PER_COST`] random `Q` tested for
/// containment, plus a translated boundary `Q0` whose weighted distance must
/// equal `ρ`.
pub fn verify_containment(n: usize, seed: u64) -> Result<ContainmentSuite> {
    let w = CovariateWeights::new(SUITE_WEIGHTS.to_vec())?;
    let costs = [CostKind::WeightedSqL2(w.clone()), CostKind::WeightedL1(w)];
    let per: Vec<Result<(usize, usize, usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = SalRng::new(derive_seed(seed, "containment-instance", i, 0));
            let p0 = random_p0(&mut rng, 10)?;
            let rho = 0.01 + rng.uniform();
            let (mut trials, mut inside, mut bad, mut berr) = (0, 0, 0, 0.0f64);
            for cost in &costs {
                for _ in 0..SUITE_Q_PER_COST {
                    let q = scaled_jitter(&p0, rho, cost, &mut rng);
                    trials += 1;
                    if wasserstein(&q, &p0, cost)? <= rho {
                        inside += 1;
                        if wasserstein(&q, &p0, &cost.unweighted())? > rho + BALL_TOL {
                            bad += 1;
                        }
                    }
                }
                let q0 = boundary_q0(&p0, rho, cost)?;
                berr = berr.max((wasserstein(&q0, &p0, cost)? - rho).abs());
            }
            Ok((trials, inside, bad, berr))
        })
        .collect();
    let mut suite = ContainmentSuite {
        instances: n,
        trials: 0,
        in_weighted_ball: 0,
        violations: 0,
        boundary_max_error: 0.0,
    };
    for r in per {
        let (t, i, b, e) = r?;
        suite.trials += t;
        suite.in_weighted_ball += i;
        suite.violations += b;
        suite.boundary_max_error = suite.boundary_max_error.max(e);
    }
    Ok(suite)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualitySuite {
    pub instances: usize,
    pub failures: usize,
    /// Largest `sup_Q E_Q[ℓ] − min_λ dual` observed (negative when the bound has slack).
    pub max_gap: f64,
    pub q_in_ball: usize,
}

/// Runs [`DualityInstance::check`] on `n` random 1-D instances with `n_q`
/// candidate distributions each.
pub fn verify_duality(n: usize, n_q: usize, tol: f64, seed: u64) -> Result<DualitySuite> {
    let per: Vec<Result<DualityReport>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = SalRng::new(derive_seed(seed, "duality-instance", i, 0));
            DualityInstance::random(&mut rng).check(n_q, &mut rng)
        })
        .collect();
    let mut suite = DualitySuite {
        instances: n,
        failures: 0,
        max_gap: f64::NEG_INFINITY,
        q_in_ball: 0,
    };
    for r in per {
        let r = r?;
        if !r.holds(tol) {
            suite.failures += 1;
        }
        suite.q_in_ball += r.q_in_ball;
        if r.q_in_ball > 0 {
            suite.max_gap = suite.max_gap.max(r.primal_sup - r.dual_min);
        }
    }
    Ok(suite)
}

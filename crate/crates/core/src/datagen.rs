//! Seeded synthetic generators for three distribution-shift regimes: a 2-D
//! toy problem, selection bias on unstable covariates, and anti-causal
//! unstable covariates.
//!
//! Covariates are laid out as `[S, V]`: stable dimensions first. All noise
//! parameters are standard deviations.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SalError};
use crate::model::EnvDataset;
use crate::rng::SalRng;

/// Draw budget per accepted point in rejection sampling.
pub const SAMPLING_BUDGET_FACTOR: usize = 10_000;

/// Env ids: training environments count up from 1, test environments from 101.
pub const TEST_ENV_BASE: i64 = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub stable_dims: Vec<usize>,
    pub unstable_dims: Vec<usize>,
    pub f_star: String,
}

impl GroundTruth {
    fn split(n_s: usize, n_v: usize, f_star: String) -> Self {
        Self {
            stable_dims: (0..n_s).collect(),
            unstable_dims: (n_s..n_s + n_v).collect(),
            f_star,
        }
    }
}

fn one() -> f64 {
    1.0
}

// ---------------------------------------------------------------------------
// Toy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    /// (alpha, n) per training environment.
    #[serde(default = "ToyParams::default_train")]
    pub train: Vec<(f64, usize)>,
    #[serde(default = "ToyParams::default_test_alphas")]
    pub test_alphas: Vec<f64>,
    #[serde(default = "ToyParams::default_test_n")]
    pub test_n: usize,
    /// Multiplies both ε terms; 0 gives the noiseless equations.
    #[serde(default = "one")]
    pub noise_scale: f64,
}

impl ToyParams {
    fn default_train() -> Vec<(f64, usize)> {
        vec![(1.0, 180), (-0.1, 20)]
    }
    fn default_test_alphas() -> Vec<f64> {
        (-20..=20).map(|k| k as f64 / 10.0).collect()
    }
    fn default_test_n() -> usize {
        1000
    }
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            train: Self::default_train(),
            test_alphas: Self::default_test_alphas(),
            test_n: Self::default_test_n(),
            noise_scale: 1.0,
        }
    }
}

pub const TOY_S_STD: f64 = 0.5;
pub const TOY_EPS1_STD: f64 = 0.1;
pub const TOY_EPS2_STD: f64 = 1.0;

/// `(y, v)` for one toy point: `y = 5s + s² + ε₁`, `v = αy + ε₂`.
pub fn toy_point(s: f64, alpha: f64, eps1: f64, eps2: f64) -> (f64, f64) {
    let y = 5.0 * s + s * s + eps1;
    (y, alpha * y + eps2)
}

pub fn toy_truth() -> GroundTruth {
    GroundTruth::split(1, 1, "y = 5*s + s^2".into())
}

fn gen_toy_rng(alpha: f64, n: usize, noise_scale: f64, env_id: i64, rng: &mut SalRng) -> Result<EnvDataset> {
    let mut x = Array2::zeros((n, 2));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let s = rng.gaussian(0.0, TOY_S_STD);
        let e1 = noise_scale * rng.gaussian(0.0, TOY_EPS1_STD);
        let e2 = noise_scale * rng.gaussian(0.0, TOY_EPS2_STD);
        let (yi, v) = toy_point(s, alpha, e1, e2);
        x[[i, 0]] = s;
        x[[i, 1]] = v;
        y[i] = yi;
    }
    EnvDataset::new(x, y, env_id)
}

/// One toy environment with `n` points.
pub fn gen_toy(alpha: f64, n: usize, seed: u64) -> Result<(EnvDataset, GroundTruth)> {
    if n == 0 {
        return Err(SalError::InvalidInput("n must be >= 1".into()));
    }
    let mut rng = SalRng::new(seed);
    Ok((gen_toy_rng(alpha, n, 1.0, 1, &mut rng)?, toy_truth()))
}

// ---------------------------------------------------------------------------
// Selection bias

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionBiasParams {
    /// Bias rate of the first training environment; length 1 biases `V₁`,
    /// longer vectors bias the last `len` unstable dimensions.
    #[serde(default = "SelectionBiasParams::default_r")]
    pub r: Vec<f64>,
    #[serde(default = "SelectionBiasParams::default_kappa")]
    pub kappa: f64,
    #[serde(default = "SelectionBiasParams::default_n")]
    pub n: usize,
    #[serde(default = "SelectionBiasParams::default_five")]
    pub n_s: usize,
    #[serde(default = "SelectionBiasParams::default_five")]
    pub n_v: usize,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "SelectionBiasParams::default_noise")]
    pub noise_std: f64,
    /// Rates of the test environments; entries are full rate vectors.
    #[serde(default = "SelectionBiasParams::default_test_r")]
    pub test_r: Vec<Vec<f64>>,
    #[serde(default = "SelectionBiasParams::default_test_n")]
    pub test_n: usize,
}

impl SelectionBiasParams {
    fn default_r() -> Vec<f64> {
        vec![1.7]
    }
    fn default_kappa() -> f64 {
        0.95
    }
    fn default_n() -> usize {
        2000
    }
    fn default_five() -> usize {
        5
    }
    fn default_noise() -> f64 {
        0.3
    }
    pub fn default_test_r() -> Vec<Vec<f64>> {
        [-3.0, -2.0, -1.7, -1.5, -1.3, 1.3, 1.5, 1.7, 2.0, 3.0].iter().map(|r| vec![*r]).collect()
    }
    fn default_test_n() -> usize {
        1000
    }

    /// The multi-dimensional variant: three biased dimensions, training rate
    /// `[2, 1.7, 1.5]`, test rates `[r₁, 0.9r₁, 0.8r₁]`.
    pub fn multi_dim() -> Self {
        Self {
            r: vec![2.0, 1.7, 1.5],
            test_r: [-3.0, -2.5, -2.0, -1.7, -1.5, 1.5, 1.7, 2.0, 2.5, 3.0]
                .iter()
                .map(|r| vec![*r, 0.9 * r, 0.8 * r])
                .collect(),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_s < 3 || self.n_v == 0 {
            return Err(SalError::InvalidInput("selection bias needs n_s >= 3 and n_v >= 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(SalError::InvalidInput(format!("kappa must be in (0, 1), got {}", self.kappa)));
        }
        let (n1, n2) = self.train_sizes();
        if n1 == 0 || n2 == 0 {
            return Err(SalError::InvalidInput(format!(
                "kappa = {} with n = {} leaves an empty training environment",
                self.kappa, self.n
            )));
        }
        for r in std::iter::once(&self.r).chain(&self.test_r) {
            check_rate(r, self.n_v)?;
        }
        Ok(())
    }

    pub fn train_sizes(&self) -> (usize, usize) {
        let n1 = (self.kappa * self.n as f64).round() as usize;
        (n1, self.n.saturating_sub(n1))
    }
}

impl Default for SelectionBiasParams {
    fn default() -> Self {
        Self {
            r: Self::default_r(),
            kappa: Self::default_kappa(),
            n: Self::default_n(),
            n_s: 5,
            n_v: 5,
            beta: 1.0,
            noise_std: Self::default_noise(),
            test_r: Self::default_test_r(),
            test_n: Self::default_test_n(),
        }
    }
}

fn check_rate(r: &[f64], n_v: usize) -> Result<()> {
    if r.is_empty() || r.len() > n_v {
        return Err(SalError::InvalidInput(format!("rate vector length {} not in 1..={n_v}", r.len())));
    }
    if let Some(bad) = r.iter().find(|v| !(v.abs() > 1.0 && v.is_finite())) {
        return Err(SalError::InvalidInput(format!("selection rate {bad} must satisfy |r| > 1")));
    }
    Ok(())
}

const THETA_S_PATTERN: [f64; 6] = [1.0 / 3.0, -2.0 / 3.0, 1.0, -1.0 / 3.0, 2.0 / 3.0, -1.0];

/// The stable coefficient pattern repeated cyclically to `n_s` entries.
pub fn selection_theta_s(n_s: usize) -> Vec<f64> {
    (0..n_s).map(|i| THETA_S_PATTERN[i % THETA_S_PATTERN.len()]).collect()
}

/// `f(s) = θ_s·s + β·s₁s₂s₃`.
pub fn selection_f(theta_s: &[f64], beta: f64, s: &[f64]) -> f64 {
    theta_s.iter().zip(s).map(|(t, v)| t * v).sum::<f64>() + beta * s[0] * s[1] * s[2]
}

/// `Π_i |r_i|^(−5·|f(s) − sign(r_i)·v_i|)`.
pub fn selection_probability(r: &[f64], fs: f64, v: &[f64]) -> f64 {
    let expo: f64 = r
        .iter()
        .zip(v)
        .map(|(ri, vi)| ri.abs().ln() * -5.0 * (fs - ri.signum() * vi).abs())
        .sum();
    expo.exp()
}

/// The unstable dimensions (within `V`) that a rate vector of length `len` biases.
pub fn biased_dims(len: usize, n_v: usize) -> std::ops::Range<usize> {
    if len == 1 {
        0..1
    } else {
        n_v - len..n_v
    }
}

fn selection_env(p: &SelectionBiasParams, r: &[f64], n: usize, env_id: i64, rng: &mut SalRng) -> Result<EnvDataset> {
    let theta_s = selection_theta_s(p.n_s);
    let dims = biased_dims(r.len(), p.n_v);
    let m = p.n_s + p.n_v;
    let mut x = Array2::zeros((n, m));
    let mut y = Array1::zeros(n);
    let budget = SAMPLING_BUDGET_FACTOR.saturating_mul(n);
    let mut z = vec![0.0; p.n_s + 1];
    let mut row = vec![0.0; m];
    let mut accepted = 0;
    let mut draws = 0;
    while accepted < n {
        if draws == budget {
            return Err(SalError::SamplingBudget { budget, accepted, target: n });
        }
        draws += 1;
        z.iter_mut().for_each(|v| *v = rng.normal());
        for i in 0..p.n_s {
            row[i] = 0.8 * z[i] + 0.2 * z[i + 1];
        }
        for j in 0..p.n_v {
            row[p.n_s + j] = rng.normal();
        }
        let fs = selection_f(&theta_s, p.beta, &row[..p.n_s]);
        let yi = fs + p.noise_std * rng.normal();
        let prob = selection_probability(r, fs, &row[p.n_s + dims.start..p.n_s + dims.end]);
        if rng.uniform() <= prob {
            x.row_mut(accepted).iter_mut().zip(&row).for_each(|(a, b)| *a = *b);
            y[accepted] = yi;
            accepted += 1;
        }
    }
    EnvDataset::new(x, y, env_id)
}

pub fn selection_truth(p: &SelectionBiasParams) -> GroundTruth {
    GroundTruth::split(
        p.n_s,
        p.n_v,
        format!("y = {:?} . s + {} * s1*s2*s3", selection_theta_s(p.n_s), p.beta),
    )
}

/// Training environments: env 1 with rate `r` (`κn` points) and env 2 with
/// rate `−1.1` in every biased dimension (`(1−κ)n` points).
pub fn gen_selection_bias(p: &SelectionBiasParams, seed: u64) -> Result<(Vec<EnvDataset>, GroundTruth)> {
    p.validate()?;
    let mut rng = SalRng::new(seed);
    let (n1, n2) = p.train_sizes();
    let r2 = vec![-1.1; p.r.len()];
    let envs = vec![
        selection_env(p, &p.r, n1, 1, &mut rng)?,
        selection_env(p, &r2, n2, 2, &mut rng)?,
    ];
    Ok((envs, selection_truth(p)))
}

/// Test environments, one per entry of `p.test_r`.
pub fn gen_selection_bias_test(p: &SelectionBiasParams, seed: u64) -> Result<Vec<EnvDataset>> {
    p.validate()?;
    let mut rng = SalRng::new(seed);
    p.test_r
        .iter()
        .enumerate()
        .map(|(k, r)| selection_env(p, r, p.test_n, TEST_ENV_BASE + k as i64, &mut rng))
        .collect()
}

// ---------------------------------------------------------------------------
// Anti-causal

pub const ANTI_CAUSAL_SIGMAS: [f64; 10] = [0.2, 0.5, 1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntiCausalParams {
    #[serde(default = "AntiCausalParams::default_n_s")]
    pub n_s: usize,
    #[serde(default = "AntiCausalParams::default_n_v")]
    pub n_v: usize,
    #[serde(default = "AntiCausalParams::default_beta")]
    pub beta: f64,
    #[serde(default = "SelectionBiasParams::default_noise")]
    pub noise_std: f64,
    /// Sizes of the training environments, one-hot on components 1, 2, ...
    #[serde(default = "AntiCausalParams::default_train_sizes")]
    pub train_sizes: Vec<usize>,
    /// Test environments are one-hot on the remaining components.
    #[serde(default = "AntiCausalParams::default_test_n")]
    pub test_n: usize,
    /// Multiplies the Y noise and the V noise; 0 gives the noiseless equations.
    #[serde(default = "one")]
    pub noise_scale: f64,
}

impl AntiCausalParams {
    fn default_n_s() -> usize {
        5
    }
    fn default_n_v() -> usize {
        5
    }
    fn default_beta() -> f64 {
        0.1
    }
    fn default_train_sizes() -> Vec<usize> {
        vec![1000, 100, 100]
    }
    fn default_test_n() -> usize {
        1000
    }

    /// Nine stable covariates and one unstable one.
    pub fn scenario2() -> Self {
        Self {
            n_s: 9,
            n_v: 1,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_s < 3 || self.n_v == 0 {
            return Err(SalError::InvalidInput("anti-causal needs n_s >= 3 and n_v >= 1".into()));
        }
        if self.train_sizes.len() >= ANTI_CAUSAL_SIGMAS.len() {
            return Err(SalError::InvalidInput("too many training environments".into()));
        }
        Ok(())
    }
}

impl Default for AntiCausalParams {
    fn default() -> Self {
        Self {
            n_s: 5,
            n_v: 5,
            beta: 0.1,
            noise_std: 0.3,
            train_sizes: Self::default_train_sizes(),
            test_n: Self::default_test_n(),
            noise_scale: 1.0,
        }
    }
}

/// Component mean: zeros except the last two entries, which are
/// `(1,1), (1,−1), (−1,1), (−1,−1), (−1,−1), ...` for components 0, 1, 2, 3, ...
pub fn anti_causal_mean(component: usize, n_s: usize) -> Vec<f64> {
    let (a, b) = match component {
        0 => (1.0, 1.0),
        1 => (1.0, -1.0),
        2 => (-1.0, 1.0),
        _ => (-1.0, -1.0),
    };
    let mut mu = vec![0.0; n_s];
    mu[n_s - 2] = a;
    mu[n_s - 1] = b;
    mu
}

/// One draw of the anti-causal coefficients; training and test environments
/// of a run share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntiCausalModel {
    pub params: AntiCausalParams,
    pub theta_s: Vec<f64>,
    pub theta_v: Vec<f64>,
}

impl AntiCausalModel {
    /// `θ_s ~ N(1, I)`, `θ_v ~ N(0, 0.1·I)`.
    pub fn sample(params: &AntiCausalParams, rng: &mut SalRng) -> Result<Self> {
        params.validate()?;
        let theta_s = (0..params.n_s).map(|_| rng.gaussian(1.0, 1.0)).collect();
        let theta_v = (0..params.n_v).map(|_| rng.gaussian(0.0, 0.1f64.sqrt())).collect();
        Ok(Self {
            params: params.clone(),
            theta_s,
            theta_v,
        })
    }

    pub fn truth(&self) -> GroundTruth {
        GroundTruth::split(
            self.params.n_s,
            self.params.n_v,
            format!("y = {:?} . s + {} * s1*s2*s3", self.theta_s, self.params.beta),
        )
    }

    /// `n` points from the mixture with weights `z` over the ten components.
    pub fn sample_env(&self, z: &[f64], n: usize, env_id: i64, rng: &mut SalRng) -> Result<EnvDataset> {
        let k = ANTI_CAUSAL_SIGMAS.len();
        if z.len() != k {
            return Err(SalError::DimensionMismatch { expected: k, got: z.len() });
        }
        let total: f64 = z.iter().sum();
        if z.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(SalError::InvalidInput(format!("mixture weights {z:?} are not on the simplex")));
        }
        let p = &self.params;
        let m = p.n_s + p.n_v;
        let means: Vec<Vec<f64>> = (0..k).map(|c| anti_causal_mean(c, p.n_s)).collect();
        let mut x = Array2::zeros((n, m));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut comp = k - 1;
            for (c, zc) in z.iter().enumerate() {
                acc += zc;
                if u < acc {
                    comp = c;
                    break;
                }
            }
            while z[comp] == 0.0 {
                comp -= 1;
            }
            let mut row = x.row_mut(i);
            for j in 0..p.n_s {
                row[j] = means[comp][j] + rng.normal();
            }
            let s = row.as_slice().expect("row-major");
            let yi = selection_f(&self.theta_s, p.beta, &s[..p.n_s]) + p.noise_scale * p.noise_std * rng.normal();
            for j in 0..p.n_v {
                row[p.n_s + j] = self.theta_v[j] * yi + p.noise_scale * ANTI_CAUSAL_SIGMAS[comp] * rng.normal();
            }
            y[i] = yi;
        }
        EnvDataset::new(x, y, env_id)
    }
}

pub fn one_hot(k: usize, c: usize) -> Vec<f64> {
    let mut z = vec![0.0; k];
    z[c] = 1.0;
    z
}

/// One environment with mixture weights `z` and freshly sampled coefficients.
pub fn gen_anti_causal(z: &[f64], n: usize, params: &AntiCausalParams, seed: u64) -> Result<(EnvDataset, GroundTruth)> {
    let mut rng = SalRng::new(seed);
    let model = AntiCausalModel::sample(params, &mut rng)?;
    Ok((model.sample_env(z, n, 1, &mut rng)?, model.truth()))
}

/// Training environments one-hot on the first components and test
/// environments one-hot on the rest, all sharing one coefficient draw.
pub fn gen_anti_causal_split(params: &AntiCausalParams, seed: u64) -> Result<(Vec<EnvDataset>, Vec<EnvDataset>, GroundTruth)> {
    let mut rng = SalRng::new(seed);
    let model = AntiCausalModel::sample(params, &mut rng)?;
    let k = ANTI_CAUSAL_SIGMAS.len();
    let n_train = params.train_sizes.len();
    let train = params
        .train_sizes
        .iter()
        .enumerate()
        .map(|(c, &n)| model.sample_env(&one_hot(k, c), n, c as i64 + 1, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let test = (n_train..k)
        .map(|c| model.sample_env(&one_hot(k, c), params.test_n, TEST_ENV_BASE + (c - n_train) as i64, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test, model.truth()))
}

// ---------------------------------------------------------------------------
// Specs and files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    Toy(ToyParams),
    SelectionBias(SelectionBiasParams),
    AntiCausal(AntiCausalParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    #[serde(flatten)]
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub train: Vec<EnvDataset>,
    pub test: Vec<EnvDataset>,
    pub truth: GroundTruth,
}

/// Generates training and test environments; training uses one stream and
/// test another, both derived from `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<Generated> {
    let train_seed = crate::rng::derive_seed(spec.seed, "train", 0, 0);
    let test_seed = crate::rng::derive_seed(spec.seed, "test", 0, 0);
    match &spec.regime {
        Regime::Toy(p) => {
            if p.train.iter().any(|(_, n)| *n == 0) || p.test_n == 0 {
                return Err(SalError::InvalidInput("toy environments need n >= 1".into()));
            }
            let mut rng = SalRng::new(train_seed);
            let train = p
                .train
                .iter()
                .enumerate()
                .map(|(k, (a, n))| gen_toy_rng(*a, *n, p.noise_scale, k as i64 + 1, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = SalRng::new(test_seed);
            let test = p
                .test_alphas
                .iter()
                .enumerate()
                .map(|(k, a)| gen_toy_rng(*a, p.test_n, p.noise_scale, TEST_ENV_BASE + k as i64, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(Generated { train, test, truth: toy_truth() })
        }
        Regime::SelectionBias(p) => {
            let (train, truth) = gen_selection_bias(p, train_seed)?;
            let test = gen_selection_bias_test(p, test_seed)?;
            Ok(Generated { train, test, truth })
        }
        Regime::AntiCausal(p) => {
            // Both splits must share the coefficient draw, so a single seed is used.
            let (train, test, truth) = gen_anti_causal_split(p, train_seed)?;
            Ok(Generated { train, test, truth })
        }
    }
}

/// Writes `env,y,x1,…,xm` rows after a `# `-prefixed provenance line.
/// Floats use the shortest representation that parses back to the same value.
pub fn write_csv(path: &Path, envs: &[EnvDataset], provenance: &str) -> Result<()> {
    let m = crate::model::check_envs(envs)?;
    let mut out = Vec::new();
    writeln!(out, "# {provenance}").expect("write to Vec");
    let mut wtr = csv::Writer::from_writer(&mut out);
    let mut header = vec!["env".to_string(), "y".to_string()];
    header.extend((1..=m).map(|j| format!("x{j}")));
    wtr.write_record(&header).map_err(|e| csv_err(path, e))?;
    for e in envs {
        for (row, &y) in e.x.rows().into_iter().zip(e.y.iter()) {
            let mut rec = vec![e.env_id.to_string(), y.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec).map_err(|er| csv_err(path, er))?;
        }
    }
    drop(wtr);
    std::fs::write(path, out).map_err(|e| SalError::io(path.display().to_string(), e))
}

fn csv_err(path: &Path, e: csv::Error) -> SalError {
    SalError::Csv {
        path: path.display().to_string(),
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    spec: &'a GenSpec,
    ground_truth: &'a GroundTruth,
}

/// Writes `train.csv`, `test.csv` and `ground_truth.json` into `dir`.
pub fn write_generated(dir: &Path, spec: &GenSpec, data: &Generated, provenance: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SalError::io(dir.display().to_string(), e))?;
    write_csv(&dir.join("train.csv"), &data.train, provenance)?;
    write_csv(&dir.join("test.csv"), &data.test, provenance)?;
    let side = serde_json::to_string_pretty(&Sidecar {
        spec,
        ground_truth: &data.truth,
    })?;
    let path = dir.join("ground_truth.json");
    std::fs::write(&path, side + "\n").map_err(|e| SalError::io(path.display().to_string(), e))
}

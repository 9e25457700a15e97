//! Evaluation harness: metrics, CSV ingestion, validation splits and the
//! seeded hyperparameter sweep that backs the benchmark tables.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{self, BaselineConfig, BaselineMethod};
use crate::cost::CovariateWeights;
use crate::datagen::{self, GenSpec, Regime, SelectionBiasParams, ToyParams};
use crate::error::{Result, SalError};
use crate::model::{self, EnvDataset, LossKind, ModelParams};
use crate::rng::{content_hash, derive_seed, SalRng};
use crate::sal::{self, SalConfig, TrainedModel};

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MetricKind {
    #[default]
    #[serde(rename = "rmse")]
    Rmse,
    #[serde(rename = "mean_loss", alias = "loss")]
    MeanLoss,
    #[serde(rename = "misclassification_rate", alias = "misclass")]
    Misclassification,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::MeanLoss => "mean_loss",
            MetricKind::Misclassification => "misclassification_rate",
        }
    }

    /// Parses the short command-line spellings as well as the canonical names.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(MetricKind::Rmse),
            "loss" | "mean_loss" => Ok(MetricKind::MeanLoss),
            "misclass" | "misclassification_rate" => Ok(MetricKind::Misclassification),
            _ => Err(SalError::InvalidInput(format!("unknown metric '{s}'"))),
        }
    }

    /// The metric of `params` on one environment.
    pub fn env_value(self, params: &ModelParams, loss: LossKind, env: &EnvDataset) -> Result<f64> {
        if params.dim() != env.dim() {
            return Err(SalError::DimensionMismatch {
                expected: params.dim(),
                got: env.dim(),
            });
        }
        let preds = env.x.rows().into_iter().map(|r| params.predict(r.as_slice().expect("row-major")));
        let n = env.len() as f64;
        Ok(match self {
            MetricKind::Rmse => {
                let sse: f64 = preds.zip(env.y.iter()).map(|(p, y)| (y - p) * (y - p)).sum();
                (sse / n).sqrt()
            }
            MetricKind::MeanLoss => env.mean_loss(params, loss),
            MetricKind::Misclassification => {
                // Logistic scores are log-odds; other losses predict the label directly.
                let cut = if loss == LossKind::Logistic { 0.0 } else { 0.5 };
                let mut wrong = 0usize;
                for (p, &y) in preds.zip(env.y.iter()) {
                    LossKind::Logistic.check_target(y)?;
                    if (p >= cut) != (y == 1.0) {
                        wrong += 1;
                    }
                }
                wrong as f64 / n
            }
        })
    }
}

/// Per-environment metric values with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_env_loss: BTreeMap<i64, f64>,
    pub mean_error: f64,
    /// `None` for a single environment, where the spread is undefined.
    pub std_error: Option<f64>,
    pub metric_kind: MetricKind,
}

/// Mean and `(n − 1)`-denominator standard deviation.
pub fn summarize(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(SalError::InvalidInput("no values to summarise".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok((mean, std))
}

impl EvalReport {
    pub fn from_values(per_env_loss: BTreeMap<i64, f64>, metric_kind: MetricKind) -> Result<Self> {
        let vals: Vec<f64> = per_env_loss.values().copied().collect();
        let (mean_error, std_error) = summarize(&vals)?;
        Ok(Self {
            per_env_loss,
            mean_error,
            std_error,
            metric_kind,
        })
    }

    /// The standard deviation, or an error when fewer than two environments were scored.
    pub fn require_std(&self) -> Result<f64> {
        self.std_error.ok_or_else(|| {
            SalError::InvalidInput("Std_Error needs at least two test environments".into())
        })
    }

    /// True when the summary fields recompute exactly from `per_env_loss`.
    pub fn is_consistent(&self) -> bool {
        let vals: Vec<f64> = self.per_env_loss.values().copied().collect();
        match summarize(&vals) {
            Ok((m, s)) => m.to_bits() == self.mean_error.to_bits() && s.map(f64::to_bits) == self.std_error.map(f64::to_bits),
            Err(_) => false,
        }
    }
}

/// Scores `params` on every test environment.
pub fn evaluate_params(params: &ModelParams, loss: LossKind, envs: &[EnvDataset], metric: MetricKind) -> Result<EvalReport> {
    model::check_envs(envs)?;
    let mut per_env = BTreeMap::new();
    for e in envs {
        let v = metric.env_value(params, loss, e)?;
        if per_env.insert(e.env_id, v).is_some() {
            return Err(SalError::InvalidInput(format!("duplicate environment id {}", e.env_id)));
        }
    }
    EvalReport::from_values(per_env, metric)
}

pub fn evaluate(model: &TrainedModel, envs: &[EnvDataset], metric: MetricKind) -> Result<EvalReport> {
    evaluate_params(&model.params, model.loss, envs, metric)
}

// ---------------------------------------------------------------------------
// CSV ingestion

const SIGMA_FLOOR: f64 = 1e-12;

/// Per-covariate z-scoring statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(envs: &[EnvDataset]) -> Result<Self> {
        let pooled = model::pool(envs)?;
        let n = pooled.len() as f64;
        let mean: Vec<f64> = pooled.x.columns().into_iter().map(|c| c.sum() / n).collect();
        let std = pooled
            .x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, envs: &mut [EnvDataset]) -> Result<()> {
        for e in envs.iter_mut() {
            if e.dim() != self.mean.len() {
                return Err(SalError::DimensionMismatch {
                    expected: self.mean.len(),
                    got: e.dim(),
                });
            }
            for mut row in e.x.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - self.mean[j]) / self.std[j].max(SIGMA_FLOOR);
                }
            }
        }
        Ok(())
    }
}

/// Reads an `env,y,x1,…,xm` file. Lines starting with `#` are ignored.
/// Environments are returned in order of first appearance.
pub fn read_csv(path: &Path) -> Result<Vec<EnvDataset>> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| SalError::io(&shown, e))?;
    parse_csv(&text, &shown)
}

fn parse_csv(text: &str, shown: &str) -> Result<Vec<EnvDataset>> {
    let err = |line: u64, msg: String| SalError::Csv {
        path: shown.to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?,
        None => return Err(err(1, "missing header".into())),
    };
    let hline = header.position().map_or(1, |p| p.line());
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "env" || cols[1] != "y" {
        return Err(err(hline, format!("header must be env,y,x1,...,xm; got '{}'", cols.join(","))));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{}", j + 1) {
            return Err(err(hline, format!("expected column x{} but found '{c}'", j + 1)));
        }
    }
    let m = cols.len() - 2;
    let mut order: Vec<i64> = Vec::new();
    let mut groups: HashMap<i64, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for rec in records {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(err(line, format!("expected {} columns, found {}", cols.len(), rec.len())));
        }
        let env: i64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("environment id '{}' is not an integer", &rec[0])))?;
        let num = |k: usize| -> Result<f64> {
            let cell = rec[k].trim();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(line, format!("column {} value '{cell}' is not a finite number", cols[k]))),
            }
        };
        let y = num(1)?;
        let entry = groups.entry(env).or_insert_with(|| {
            order.push(env);
            (Vec::new(), Vec::new())
        });
        for k in 2..cols.len() {
            entry.0.push(num(k)?);
        }
        entry.1.push(y);
    }
    if order.is_empty() {
        return Err(err(hline, "no data rows".into()));
    }
    order
        .into_iter()
        .map(|id| {
            let (xs, ys) = groups.remove(&id).expect("grouped");
            let n = ys.len();
            let x = Array2::from_shape_vec((n, m), xs).expect("row count matches");
            EnvDataset::new(x, Array1::from(ys), id)
        })
        .collect()
}

/// Reads a dataset and, when `normalize` is set, z-scores every covariate
/// with statistics from this file; the statistics are returned for reuse.
pub fn ingest_csv(path: &Path, normalize: bool) -> Result<(Vec<EnvDataset>, Option<NormStats>)> {
    let mut envs = read_csv(path)?;
    if !normalize {
        return Ok((envs, None));
    }
    let stats = NormStats::fit(&envs)?;
    stats.apply(&mut envs)?;
    Ok((envs, Some(stats)))
}

/// Reads a dataset and normalises it with previously fitted statistics.
pub fn ingest_csv_with(path: &Path, stats: &NormStats) -> Result<Vec<EnvDataset>> {
    let mut envs = read_csv(path)?;
    stats.apply(&mut envs)?;
    Ok(envs)
}

// ---------------------------------------------------------------------------
// Validation

/// Environment id given to a pooled holdout set.
pub const HOLDOUT_ENV: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ValidationRule {
    /// A uniformly random share of all training rows, pooled into one environment.
    IidHoldout { fraction: f64 },
    /// `count` random rows from each listed environment (all when `envs` is empty).
    PerEnvSample {
        count: usize,
        #[serde(default)]
        envs: Vec<i64>,
    },
}

/// Splits training environments into (train, validation). Validation rows
/// are removed from training; training environments left empty are dropped.
pub fn validation_split(envs: &[EnvDataset], rule: &ValidationRule, seed: u64) -> Result<(Vec<EnvDataset>, Vec<EnvDataset>)> {
    model::check_envs(envs)?;
    let mut rng = SalRng::new(seed);
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); envs.len()];
    let mut val = Vec::new();
    match rule {
        ValidationRule::IidHoldout { fraction } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(SalError::InvalidInput(format!("holdout fraction must be in (0, 1), got {fraction}")));
            }
            let total: usize = envs.iter().map(EnvDataset::len).sum();
            let k = (fraction * total as f64).round() as usize;
            if k == 0 || k >= total {
                return Err(SalError::InvalidInput(format!(
                    "holdout fraction {fraction} of {total} rows leaves an empty split"
                )));
            }
            let mut idx: Vec<(usize, usize)> = envs
                .iter()
                .enumerate()
                .flat_map(|(e, d)| (0..d.len()).map(move |i| (e, i)))
                .collect();
            rng.shuffle(&mut idx);
            let mut chosen = idx[..k].to_vec();
            chosen.sort_unstable();
            for &(e, i) in &chosen {
                held[e].push(i);
            }
            let parts: Vec<EnvDataset> = envs
                .iter()
                .zip(&held)
                .filter(|(_, h)| !h.is_empty())
                .map(|(d, h)| d.select(h))
                .collect();
            let mut pooled = model::pool(&parts)?;
            pooled.env_id = HOLDOUT_ENV;
            val.push(pooled);
        }
        ValidationRule::PerEnvSample { count, envs: which } => {
            if *count == 0 {
                return Err(SalError::InvalidInput("per-env validation count must be >= 1".into()));
            }
            for id in which {
                if !envs.iter().any(|e| e.env_id == *id) {
                    return Err(SalError::InvalidInput(format!("validation environment {id} not in training data")));
                }
            }
            for (e, d) in envs.iter().enumerate() {
                if !which.is_empty() && !which.contains(&d.env_id) {
                    continue;
                }
                if d.len() < *count {
                    return Err(SalError::InvalidInput(format!(
                        "environment {} has {} rows, fewer than the {count} requested for validation",
                        d.env_id,
                        d.len()
                    )));
                }
                let mut idx: Vec<usize> = (0..d.len()).collect();
                rng.shuffle(&mut idx);
                let mut h = idx[..*count].to_vec();
                h.sort_unstable();
                val.push(d.select(&h));
                held[e] = h;
            }
        }
    }
    let train: Vec<EnvDataset> = envs
        .iter()
        .zip(&held)
        .filter_map(|(d, h)| {
            let keep: Vec<usize> = (0..d.len()).filter(|i| h.binary_search(i).is_err()).collect();
            (!keep.is_empty()).then(|| d.select(&keep))
        })
        .collect();
    if train.is_empty() {
        return Err(SalError::InvalidInput("validation split leaves no training data".into()));
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Methods and configs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Sal,
    Erm,
    Lasso,
    Ridge,
    Wdrl,
    Irm,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Sal => "sal",
            MethodKind::Erm => "erm",
            MethodKind::Lasso => "lasso",
            MethodKind::Ridge => "ridge",
            MethodKind::Wdrl => "wdrl",
            MethodKind::Irm => "irm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| SalError::InvalidInput(format!("unknown method '{s}'")))
    }

    fn baseline(self) -> Option<BaselineMethod> {
        match self {
            MethodKind::Sal => None,
            MethodKind::Erm => Some(BaselineMethod::Erm),
            MethodKind::Lasso => Some(BaselineMethod::Lasso),
            MethodKind::Ridge => Some(BaselineMethod::Ridge),
            MethodKind::Wdrl => Some(BaselineMethod::Wdrl),
            MethodKind::Irm => Some(BaselineMethod::Irm),
        }
    }

    /// The method's full default configuration as JSON.
    pub fn default_config(self) -> Value {
        match self.baseline() {
            None => serde_json::to_value(SalConfig::default()).expect("serialisable"),
            Some(b) => serde_json::to_value(BaselineConfig::new(b)).expect("serialisable"),
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Sets a dotted path such as `sgd.step`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        if key.is_empty() {
            return Err(SalError::InvalidInput(format!("bad parameter path '{path}'")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| SalError::InvalidInput(format!("'{path}' descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty split")
}

fn unknown_keys(given: &Value, parsed: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(p)) = (given, parsed) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match p.get(k) {
                Some(pv) => unknown_keys(v, pv, &path, out),
                None => out.push(path),
            }
        }
    }
}

/// Deserialises `v`, rejecting keys the target type does not know.
pub fn strict_from_value<T: Serialize + serde::de::DeserializeOwned>(v: &Value, what: &str) -> Result<T> {
    let parsed: T = serde_json::from_value(v.clone())
        .map_err(|e| SalError::InvalidInput(format!("{what} config: {e}")))?;
    let mut bad = Vec::new();
    unknown_keys(v, &serde_json::to_value(&parsed)?, "", &mut bad);
    if !bad.is_empty() {
        return Err(SalError::InvalidInput(format!("{what} config: unknown field(s) {}", bad.join(", "))));
    }
    Ok(parsed)
}

/// Fits `kind` with a configuration given as JSON over the method defaults.
pub fn fit_method(kind: MethodKind, config: &Value, envs: &[EnvDataset], loss: LossKind) -> Result<TrainedModel> {
    let mut full = kind.default_config();
    merge_json(&mut full, config);
    match kind {
        MethodKind::Sal => {
            let cfg: SalConfig = strict_from_value(&full, "sal")?;
            sal::train(envs, loss, &cfg)
        }
        _ => {
            set_path(&mut full, "method", Value::String(kind.name().into()))?;
            let cfg: BaselineConfig = strict_from_value(&full, kind.name())?;
            baselines::fit(envs, loss, &cfg)
        }
    }
}

/// Stamps a derived seed into whichever field the method reads it from.
pub fn with_seed(kind: MethodKind, cfg: &mut Value, seed: u64) -> Result<()> {
    let path = if kind == MethodKind::Sal { "seed" } else { "sgd.seed" };
    set_path(cfg, path, Value::from(seed))
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic data, regenerated for every repeat with a derived seed.
    Generate {
        #[serde(flatten)]
        spec: GenSpec,
    },
    /// Fixed files; test data is normalised with the training statistics.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        normalize: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    /// Row label in the results; defaults to the method name.
    #[serde(default)]
    pub name: Option<String>,
    pub method: MethodKind,
    /// Fixed overrides of the method defaults.
    #[serde(default = "empty_object")]
    pub params: Value,
    /// Dotted parameter path to candidate values; the sweep is their cartesian product.
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<Value>>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl MethodSpec {
    pub fn new(method: MethodKind, params: Value) -> Self {
        Self {
            name: None,
            method,
            params,
            grid: BTreeMap::new(),
        }
    }

    pub fn with_grid(mut self, key: &str, values: Vec<Value>) -> Self {
        self.grid.insert(key.to_string(), values);
        self
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(self.method.name())
    }

    /// Grid points in lexicographic order of the sorted keys; a single empty
    /// point when there is no grid.
    pub fn grid_points(&self) -> Vec<BTreeMap<String, Value>> {
        let mut points = vec![BTreeMap::new()];
        for (k, vals) in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |v| {
                        let mut q = p.clone();
                        q.insert(k.clone(), v.clone());
                        q
                    })
                })
                .collect();
        }
        points
    }

    fn point_config(&self, point: &BTreeMap<String, Value>) -> Result<Value> {
        let mut cfg = self.params.clone();
        if !cfg.is_object() {
            return Err(SalError::InvalidInput(format!("params of '{}' must be an object", self.label())));
        }
        for (k, v) in point {
            set_path(&mut cfg, k, v.clone())?;
        }
        Ok(cfg)
    }
}

fn default_repeats() -> usize {
    10
}
fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSource,
    pub methods: Vec<MethodSpec>,
    /// Required whenever some method has more than one grid point.
    #[serde(default)]
    pub validation: Option<ValidationRule>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub metric: MetricKind,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(SalError::InvalidInput("repeats must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(SalError::InvalidInput("no methods configured".into()));
        }
        for m in &self.methods {
            if let Some((k, _)) = m.grid.iter().find(|(_, v)| v.is_empty()) {
                return Err(SalError::InvalidInput(format!("grid '{k}' of '{}' is empty", m.label())));
            }
            if m.grid_points().len() > 1 && self.validation.is_none() {
                return Err(SalError::InvalidInput(format!(
                    "'{}' sweeps several grid points but no validation rule is set",
                    m.label()
                )));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("serialisable"))
    }
}

/// One grid point of one repeat.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridOutcome {
    pub grid_index: usize,
    pub hyperparams: BTreeMap<String, Value>,
    pub validation_error: Option<f64>,
    pub error: Option<String>,
}

/// The selected model of one method in one repeat.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub repeat: usize,
    pub selected: Option<usize>,
    pub report: Option<EvalReport>,
    #[serde(skip)]
    pub model: Option<TrainedModel>,
    pub grid: Vec<GridOutcome>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn hyperparams(&self) -> Option<&BTreeMap<String, Value>> {
        self.selected.map(|i| &self.grid[i].hyperparams)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub name: String,
    pub method: MethodKind,
    /// Average of the per-run Mean_Error over successful runs.
    pub mean_error: Option<f64>,
    /// Average of the per-run Std_Error over successful runs.
    pub std_error: Option<f64>,
    /// Per-environment metric averaged over successful runs.
    pub per_env: BTreeMap<i64, f64>,
    pub runs: Vec<RunRecord>,
}

impl MethodResult {
    pub fn successes(&self) -> usize {
        self.runs.iter().filter(|r| r.report.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResults {
    pub name: String,
    pub config_hash: String,
    pub metric: MetricKind,
    pub methods: Vec<MethodResult>,
}

impl SweepResults {
    pub fn method(&self, label: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == label)
    }
}

struct RepeatData {
    train: Vec<EnvDataset>,
    val: Vec<EnvDataset>,
    test: Vec<EnvDataset>,
}

fn load_data(exp: &ExperimentConfig) -> Result<Vec<RepeatData>> {
    let base: Vec<(Vec<EnvDataset>, Vec<EnvDataset>)> = match &exp.data {
        DataSource::Generate { spec } => (0..exp.repeats)
            .into_par_iter()
            .map(|r| {
                let mut s = spec.clone();
                s.seed = derive_seed(exp.seed, "data", 0, r);
                let g = datagen::generate(&s)?;
                Ok((g.train, g.test))
            })
            .collect::<Result<_>>()?,
        DataSource::Csv { train, test, normalize } => {
            let (tr, stats) = ingest_csv(train, *normalize)?;
            let te = match &stats {
                Some(s) => ingest_csv_with(test, s)?,
                None => read_csv(test)?,
            };
            vec![(tr, te); exp.repeats]
        }
    };
    base.into_iter()
        .enumerate()
        .map(|(r, (train, test))| {
            let (train, val) = match &exp.validation {
                Some(rule) => validation_split(&train, rule, derive_seed(exp.seed, "validation", 0, r))?,
                None => (train, Vec::new()),
            };
            if let (Some(v), Some(t)) = (val.first(), test.first()) {
                if v.dim() != t.dim() {
                    return Err(SalError::DimensionMismatch { expected: v.dim(), got: t.dim() });
                }
            }
            let test_ids: Vec<i64> = test.iter().map(|e| e.env_id).collect();
            if val.iter().any(|v| v.env_id != HOLDOUT_ENV && test_ids.contains(&v.env_id)) {
                return Err(SalError::InvalidInput("validation and test environment ids overlap".into()));
            }
            Ok(RepeatData { train, val, test })
        })
        .collect()
}

/// Fits every grid point of one method on one repeat. WDRL points that differ
/// only in the radius share one multiplier path; baseline fits do not read
/// their seed (full-batch descent from zero), so the grouping ignores it.
fn fit_points(spec: &MethodSpec, cfgs: &[Value], data: &RepeatData, loss: LossKind) -> Vec<Result<TrainedModel>> {
    let mut out: Vec<Option<Result<TrainedModel>>> = (0..cfgs.len()).map(|_| None).collect();
    if spec.method == MethodKind::Wdrl {
        let mut groups: BTreeMap<String, Vec<(usize, f64, BaselineConfig)>> = BTreeMap::new();
        for (i, c) in cfgs.iter().enumerate() {
            let mut full = MethodKind::Wdrl.default_config();
            merge_json(&mut full, c);
            let Ok(cfg) = strict_from_value::<BaselineConfig>(&full, "wdrl") else { continue };
            let Some(rho) = cfg.radius else { continue };
            let mut key = cfg.clone();
            key.radius = None;
            key.sgd.seed = 0;
            let key = serde_json::to_string(&key).expect("serialisable");
            groups.entry(key).or_default().push((i, rho, cfg));
        }
        for members in groups.values().filter(|g| g.len() > 1) {
            let rhos: Vec<f64> = members.iter().map(|m| m.1).collect();
            match baselines::fit_wdrl_radii(&data.train, loss, &members[0].2, &rhos) {
                Ok(fits) => {
                    for ((i, _, cfg), fit) in members.iter().zip(fits) {
                        out[*i] = Some(fit.and_then(|f| {
                            Ok(TrainedModel {
                                method: "wdrl".into(),
                                weights: CovariateWeights::ones(f.params.dim()),
                                params: f.params,
                                loss,
                                config: serde_json::to_value(cfg)?,
                                history: Vec::new(),
                                provenance: None,
                            })
                        }));
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    for (i, _, _) in members {
                        out[*i] = Some(Err(SalError::InvalidInput(msg.clone())));
                    }
                }
            }
        }
    }
    out.into_iter()
        .zip(cfgs)
        .map(|(o, c)| o.unwrap_or_else(|| fit_method(spec.method, c, &data.train, loss)))
        .collect()
}

fn run_cell(exp: &ExperimentConfig, mi: usize, repeat: usize, data: &RepeatData) -> RunRecord {
    let spec = &exp.methods[mi];
    let points = spec.grid_points();
    let mut cfgs = Vec::with_capacity(points.len());
    let mut grid = Vec::with_capacity(points.len());
    for (gi, p) in points.iter().enumerate() {
        let cfg = spec
            .point_config(p)
            .and_then(|mut c| with_seed(spec.method, &mut c, derive_seed(exp.seed, spec.label(), gi, repeat)).map(|_| c));
        grid.push(GridOutcome {
            grid_index: gi,
            hyperparams: p.clone(),
            validation_error: None,
            error: cfg.as_ref().err().map(|e| e.to_string()),
        });
        cfgs.push(cfg.unwrap_or(Value::Null));
    }
    let fits = fit_points(spec, &cfgs, data, exp.loss);
    let single = points.len() == 1;
    let mut best: Option<(usize, f64, TrainedModel)> = None;
    for (gi, fit) in fits.into_iter().enumerate() {
        if grid[gi].error.is_some() {
            continue;
        }
        let model = match fit {
            Ok(m) => m,
            Err(e) => {
                grid[gi].error = Some(e.to_string());
                continue;
            }
        };
        let score = if single && data.val.is_empty() {
            0.0
        } else {
            match evaluate(&model, &data.val, exp.metric) {
                Ok(r) if r.mean_error.is_finite() => r.mean_error,
                Ok(_) => {
                    grid[gi].error = Some("non-finite validation error".into());
                    continue;
                }
                Err(e) => {
                    grid[gi].error = Some(e.to_string());
                    continue;
                }
            }
        };
        if !(single && data.val.is_empty()) {
            grid[gi].validation_error = Some(score);
        }
        if best.as_ref().is_none_or(|b| score < b.1) {
            best = Some((gi, score, model));
        }
    }
    let Some((gi, _, model)) = best else {
        let why = grid.iter().find_map(|g| g.error.clone()).unwrap_or_default();
        return RunRecord {
            repeat,
            selected: None,
            report: None,
            model: None,
            grid,
            error: Some(format!("all grid points failed: {why}")),
        };
    };
    match evaluate(&model, &data.test, exp.metric) {
        Ok(report) => RunRecord {
            repeat,
            selected: Some(gi),
            report: Some(report),
            model: Some(model),
            grid,
            error: None,
        },
        Err(e) => RunRecord {
            repeat,
            selected: Some(gi),
            report: None,
            model: Some(model),
            grid,
            error: Some(e.to_string()),
        },
    }
}

fn aggregate(spec: &MethodSpec, runs: Vec<RunRecord>) -> MethodResult {
    let reports: Vec<&EvalReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mean_error = mean(reports.iter().map(|r| r.mean_error).collect());
    let stds: Vec<f64> = reports.iter().filter_map(|r| r.std_error).collect();
    let std_error = if stds.len() == reports.len() { mean(stds) } else { None };
    let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for r in &reports {
        for (&e, &v) in &r.per_env_loss {
            let s = sums.entry(e).or_insert((0.0, 0));
            s.0 += v;
            s.1 += 1;
        }
    }
    MethodResult {
        name: spec.label().to_string(),
        method: spec.method,
        mean_error,
        std_error,
        per_env: sums.into_iter().map(|(e, (s, n))| (e, s / n as f64)).collect(),
        runs,
    }
}

/// Runs every (method, repeat) cell on at most `jobs` worker threads. Cell
/// failures are recorded in the results rather than aborting the sweep.
pub fn sweep(exp: &ExperimentConfig, jobs: usize) -> Result<SweepResults> {
    exp.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SalError::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| {
        let data = load_data(exp)?;
        let cells: Vec<(usize, usize)> = (0..exp.methods.len())
            .flat_map(|m| (0..exp.repeats).map(move |r| (m, r)))
            .collect();
        let runs: Vec<RunRecord> = cells
            .par_iter()
            .map(|&(m, r)| run_cell(exp, m, r, &data[r]))
            .collect();
        let mut runs = runs.into_iter();
        let methods = exp
            .methods
            .iter()
            .map(|spec| aggregate(spec, runs.by_ref().take(exp.repeats).collect()))
            .collect();
        Ok(SweepResults {
            name: exp.name.clone(),
            config_hash: exp.hash(),
            metric: exp.metric,
            methods,
        })
    })
}

// ---------------------------------------------------------------------------
// Output

/// `tool-version config-hash seed` line written at the top of every artifact.
pub fn provenance(config_hash: &str, seed: u64) -> String {
    format!(
        "sal-core {} config={config_hash} seed={seed}",
        env!("CARGO_PKG_VERSION")
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_rows(path: &Path, provenance: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# {provenance}").expect("write to Vec");
    let mut w = csv::Writer::from_writer(&mut out);
    for r in rows {
        w.write_record(r).map_err(|e| SalError::Csv {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
    }
    drop(w);
    std::fs::write(path, out).map_err(|e| SalError::io(path.display().to_string(), e))
}

/// One row per method: selected hyperparameters per repeat, the two summary
/// statistics and the averaged per-environment values.
pub fn write_results_csv(path: &Path, res: &SweepResults, provenance: &str) -> Result<()> {
    let mut rows = vec![["method", "hyperparams", "mean_error", "std_error", "per_env", "failed_runs"]
        .map(String::from)
        .to_vec()];
    for m in &res.methods {
        let hp: Vec<Value> = m
            .runs
            .iter()
            .map(|r| r.hyperparams().map_or(Value::Null, |h| serde_json::to_value(h).expect("json")))
            .collect();
        rows.push(vec![
            m.name.clone(),
            serde_json::to_string(&hp)?,
            fmt_opt(m.mean_error),
            fmt_opt(m.std_error),
            serde_json::to_string(&m.per_env)?,
            (m.runs.len() - m.successes()).to_string(),
        ]);
    }
    write_rows(path, provenance, &rows)
}

/// `setting,env,method,loss` rows for plotting.
pub fn write_long_csv(path: &Path, res: &SweepResults, provenance: &str) -> Result<()> {
    let mut rows = vec![["setting", "env", "method", "loss"].map(String::from).to_vec()];
    for m in &res.methods {
        for (e, v) in &m.per_env {
            rows.push(vec![res.name.clone(), e.to_string(), m.name.clone(), v.to_string()]);
        }
    }
    write_rows(path, provenance, &rows)
}

/// Writes an evaluation report as `env,value` rows followed by the summary.
pub fn write_report_csv(path: &Path, report: &EvalReport, provenance: &str) -> Result<()> {
    let mut rows = vec![vec!["env".to_string(), report.metric_kind.name().to_string()]];
    for (e, v) in &report.per_env_loss {
        rows.push(vec![e.to_string(), v.to_string()]);
    }
    rows.push(vec!["mean_error".into(), report.mean_error.to_string()]);
    rows.push(vec!["std_error".into(), fmt_opt(report.std_error)]);
    write_rows(path, provenance, &rows)
}

// ---------------------------------------------------------------------------
// Benchmark presets

/// Radius grid searched for WDRL in the benchmark tables.
pub const WDRL_RADII: [f64; 7] = [1.0, 5.0, 10.0, 20.0, 50.0, 80.0, 100.0];

/// IRM penalty grid `{0.01, 0.1, …, 1e4}`.
pub fn irm_grid() -> Vec<Value> {
    (-2..=4).map(|k| Value::from(10f64.powi(k))).collect()
}

fn wdrl_radius_spec(params: Value) -> MethodSpec {
    MethodSpec::new(MethodKind::Wdrl, params)
        .with_grid("radius", WDRL_RADII.iter().map(|&r| Value::from(r)).collect())
}

/// Selection bias with `r = 1.7`, `n = 2000`, `κ = 0.95`: ERM, WDRL and SAL over ten repeats.
pub fn selection_bias_experiment() -> ExperimentConfig {
    let adv = serde_json::json!({ "eps_x": 1.0, "ascent_steps": 8 });
    let mut wdrl = adv.clone();
    merge_json(&mut wdrl, &serde_json::json!({ "sgd": { "iters": 400, "step": 0.1 } }));
    let mut sal = adv;
    merge_json(
        &mut sal,
        &serde_json::json!({
            "lambda": 0.05, "eps_theta": 0.1, "theta_iters": 50, "outer_iters": 40,
            "eps_w": 10.0, "alpha": 0.1, "w_iters": 1
        }),
    );
    ExperimentConfig {
        name: "selection-bias".into(),
        data: DataSource::Generate {
            spec: GenSpec {
                regime: Regime::SelectionBias(SelectionBiasParams::default()),
                seed: 0,
            },
        },
        methods: vec![
            MethodSpec::new(MethodKind::Erm, serde_json::json!({ "sgd": { "iters": 400, "step": 0.1 } })),
            wdrl_radius_spec(wdrl),
            MethodSpec::new(MethodKind::Sal, sal),
        ],
        validation: Some(ValidationRule::IidHoldout { fraction: 0.1 }),
        repeats: 10,
        metric: MetricKind::Rmse,
        loss: LossKind::Squared,
        seed: 0,
    }
}

/// Anti-causal scenario 2: ERM and SAL over five repeats.
pub fn anti_causal_experiment() -> ExperimentConfig {
    ExperimentConfig {
        name: "anti-causal".into(),
        data: DataSource::Generate {
            spec: GenSpec {
                regime: Regime::AntiCausal(datagen::AntiCausalParams::scenario2()),
                seed: 0,
            },
        },
        methods: vec![
            MethodSpec::new(MethodKind::Erm, serde_json::json!({ "sgd": { "iters": 1000, "step": 0.1 } })),
            MethodSpec::new(
                MethodKind::Sal,
                serde_json::json!({
                    "lambda": 20.0, "eps_x": 0.5, "ascent_steps": 10, "eps_theta": 0.02,
                    "theta_iters": 20, "outer_iters": 100, "eps_w": 1.0, "alpha": 1.0
                }),
            ),
        ],
        validation: None,
        repeats: 5,
        metric: MetricKind::Rmse,
        loss: LossKind::Squared,
        seed: 0,
    }
}

// ---------------------------------------------------------------------------
// Toy coefficient sweep

/// Sweep of the robustness knob `1/λ` on the two-covariate toy data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySweepConfig {
    #[serde(default)]
    pub data: ToyParams,
    #[serde(default)]
    pub seed: u64,
    /// Knob values; each is fitted with multiplier `λ = 1/knob`.
    pub knobs: Vec<f64>,
    pub sal: SalConfig,
    pub wdrl: BaselineConfig,
    pub erm: BaselineConfig,
}

impl Default for ToySweepConfig {
    fn default() -> Self {
        let mut wdrl = BaselineConfig::new(BaselineMethod::Wdrl);
        wdrl.sgd.iters = 1000;
        wdrl.sgd.step = 0.02;
        wdrl.eps_x = 0.5;
        wdrl.ascent_steps = 20;
        let mut erm = BaselineConfig::new(BaselineMethod::Erm);
        erm.sgd = wdrl.sgd.clone();
        Self {
            data: ToyParams::default(),
            seed: 0,
            knobs: vec![0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0],
            sal: SalConfig {
                outer_iters: 20,
                theta_iters: 50,
                w_iters: 1,
                ascent_steps: 20,
                eps_x: 0.5,
                eps_theta: 0.02,
                eps_w: 1.0,
                lambda: 1.0,
                alpha: 1.0,
                seed: 0,
                fit_intercept: false,
            },
            wdrl,
            erm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyRow {
    pub knob: f64,
    pub lambda: f64,
    pub wdrl_theta: Option<Vec<f64>>,
    pub sal_theta: Option<Vec<f64>>,
    pub sal_w: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToySweepResult {
    pub erm_theta: Vec<f64>,
    pub stable_dims: Vec<usize>,
    pub unstable_dims: Vec<usize>,
    pub rows: Vec<ToyRow>,
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

impl ToySweepResult {
    fn series(&self, dim: usize, pick: impl Fn(&ToyRow) -> Option<&Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
        self.rows
            .iter()
            .filter_map(|r| pick(r).map(|t| (r.knob, t[dim])))
            .unzip()
    }

    /// Spearman correlation of the WDRL coefficient on `dim` with the knob.
    pub fn wdrl_trend(&self, dim: usize) -> Option<f64> {
        let (k, c) = self.series(dim, |r| r.wdrl_theta.as_ref());
        spearman(&k, &c)
    }

    pub fn sal_trend(&self, dim: usize) -> Option<f64> {
        let (k, c) = self.series(dim, |r| r.sal_theta.as_ref());
        spearman(&k, &c)
    }

    /// Largest relative deviation of SAL's coefficient on `dim` from ERM's.
    pub fn sal_max_rel_dev(&self, dim: usize) -> Option<f64> {
        let (_, c) = self.series(dim, |r| r.sal_theta.as_ref());
        let e = self.erm_theta[dim];
        (!c.is_empty() && e != 0.0).then(|| c.iter().map(|v| ((v - e) / e).abs()).fold(0.0, f64::max))
    }
}

pub fn toy_sweep(cfg: &ToySweepConfig, jobs: usize) -> Result<ToySweepResult> {
    if cfg.knobs.is_empty() || cfg.knobs.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
        return Err(SalError::InvalidInput("toy knobs must be a nonempty list of positive values".into()));
    }
    let g = datagen::generate(&GenSpec {
        regime: Regime::Toy(cfg.data.clone()),
        seed: cfg.seed,
    })?;
    let erm = baselines::fit_erm(&g.train, LossKind::Squared, &cfg.erm)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SalError::InvalidInput(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        cfg.knobs
            .par_iter()
            .map(|&knob| {
                let lambda = 1.0 / knob;
                let wdrl = baselines::fit_wdrl_lagrangian(&g.train, LossKind::Squared, &cfg.wdrl, lambda);
                let mut sc = cfg.sal.clone();
                sc.lambda = lambda;
                let salm = sal::train(&g.train, LossKind::Squared, &sc);
                let error = [wdrl.as_ref().err(), salm.as_ref().err()]
                    .into_iter()
                    .flatten()
                    .map(|e| e.to_string())
                    .reduce(|a, b| format!("{a}; {b}"));
                ToyRow {
                    knob,
                    lambda,
                    wdrl_theta: wdrl.ok().map(|m| m.params.theta),
                    sal_w: salm.as_ref().ok().map(|m| m.weights.as_slice().to_vec()),
                    sal_theta: salm.ok().map(|m| m.params.theta),
                    error,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(ToySweepResult {
        erm_theta: erm.theta,
        stable_dims: g.truth.stable_dims.clone(),
        unstable_dims: g.truth.unstable_dims.clone(),
        rows,
    })
}

/// `knob,lambda,method,coef_1..` rows (ERM repeated on every knob).
pub fn write_toy_csv(path: &Path, res: &ToySweepResult, provenance: &str) -> Result<()> {
    let m = res.erm_theta.len();
    let mut head = vec!["knob".to_string(), "lambda".into(), "method".into()];
    head.extend((1..=m).map(|j| format!("coef_x{j}")));
    let mut rows = vec![head];
    for r in &res.rows {
        for (name, t) in [("erm", Some(&res.erm_theta)), ("wdrl", r.wdrl_theta.as_ref()), ("sal", r.sal_theta.as_ref())] {
            let mut row = vec![r.knob.to_string(), r.lambda.to_string(), name.to_string()];
            match t {
                Some(t) => row.extend(t.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            rows.push(row);
        }
    }
    write_rows(path, provenance, &rows)
}

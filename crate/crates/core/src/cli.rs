//! Command-line front end. Every subcommand parses its inputs, resolves the
//! effective configuration (flags over config file over built-in defaults)
//! and hands off to the library.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::datagen::{self, AntiCausalParams, GenSpec, Regime, SelectionBiasParams, ToyParams};
use crate::error::SalError;
use crate::eval::{self, ExperimentConfig, MethodKind, MetricKind, ToySweepConfig};
use crate::model::{EnvDataset, LossKind};
use crate::rng::{content_hash, derive_seed};
use crate::sal::{self, SalConfig, TrainedModel};
use crate::ot;

/// Multipliers below this let the inner maximisation run away as soon as
/// `Σ θ_j² / w_j²` exceeds `λ`.
pub const SMALL_LAMBDA: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(name = "sal", version, about = "Stable adversarial learning with learnable transport costs")]
pub struct Cli {
    /// Worker threads; 1 keeps every run sequential.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Master seed. Overrides any seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test CSVs and the ground-truth sidecar.
    Generate(GenerateArgs),
    /// Fit one method and write the model JSON.
    Train(TrainArgs),
    /// Score a saved model on CSV data.
    Evaluate(EvaluateArgs),
    /// Run a full benchmark experiment.
    Benchmark(BenchmarkArgs),
    /// Compare the approximate weight gradient against random directions.
    CheckGrad(CheckGradArgs),
    /// Run the optimal-transport property suites.
    VerifyOt(VerifyOtArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Toy,
    SelectionBias,
    AntiCausal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableArg {
    ToySweep,
    SelectionBias,
    AntiCausal,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    /// Regime parameters as inline JSON or a path to a JSON file.
    #[arg(long)]
    pub params: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// `path=value` override, repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: MethodKind,
    /// Directory holding `train.csv`, or a CSV file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss, default_value = "squared")]
    pub loss: LossKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory holding `test.csv`, or a CSV file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_metric, default_value = "rmse")]
    pub metric: MetricKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum)]
    pub table: TableArg,
    /// JSON patch applied over the built-in experiment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    /// Directory holding `train.csv`; generated selection-bias data when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// SAL configuration patch.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Outer iteration whose weight step is checked.
    #[arg(long, default_value_t = 5)]
    pub snapshot: usize,
    /// Length of every compared step.
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    #[arg(long, value_parser = parse_loss, default_value = "squared")]
    pub loss: LossKind,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct VerifyOtArgs {
    /// Random containment instances.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 100)]
    pub duality_instances: usize,
    /// Candidate distributions sampled per duality instance.
    #[arg(long, default_value_t = 200)]
    pub duality_samples: usize,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<MethodKind, String> {
    MethodKind::parse(s).map_err(|e| e.to_string())
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    MetricKind::parse(s).map_err(|e| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown loss '{s}'"))
}

/// Failure classes and their exit codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }

    /// `error: code=N kind=K msg=...` on a single line.
    pub fn line(&self) -> String {
        let msg: String = self.message().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: code={} kind={} msg={}", self.code(), self.kind(), msg)
    }
}

impl From<SalError> for CliError {
    fn from(e: SalError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if matches!(e, SalError::InvalidInput(_) | SalError::Json(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("bad arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.line());
            return err.code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Benchmark(a) => benchmark(cli, a),
        Command::CheckGrad(a) => check_grad(cli, a),
        Command::VerifyOt(a) => verify_ot(cli, a),
    })
}

// ---------------------------------------------------------------------------
// Config plumbing

fn read_json_file(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Inline JSON, or a path to a JSON file.
fn read_json_arg(arg: &str) -> CliResult<Value> {
    match serde_json::from_str(arg) {
        Ok(v) => Ok(v),
        Err(_) if Path::new(arg).exists() => read_json_file(Path::new(arg)),
        Err(e) => Err(CliError::Usage(format!("--params is neither JSON nor a file: {e}"))),
    }
}

/// Applies `path=value` overrides. Values parse as JSON and fall back to strings.
fn apply_sets(cfg: &mut Value, sets: &[String]) -> CliResult<()> {
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects PATH=VALUE, got '{s}'")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        eval::set_path(cfg, path.trim(), v)?;
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` flags.
fn layered(defaults: Value, file: Option<&Path>, sets: &[String]) -> CliResult<Value> {
    let mut cfg = defaults;
    if let Some(p) = file {
        eval::merge_json(&mut cfg, &read_json_file(p)?);
    }
    apply_sets(&mut cfg, sets)?;
    Ok(cfg)
}

fn config_hash(v: &impl Serialize) -> String {
    content_hash(&serde_json::to_vec(v).expect("serialisable"))
}

fn show_config(cli: &Cli, v: &impl Serialize) {
    if cli.verbose {
        eprintln!("effective config: {}", serde_json::to_string(v).expect("serialisable"));
    }
}

fn warn_lambda(what: &str, lambda: f64) {
    if lambda < SMALL_LAMBDA {
        eprintln!(
            "warning: {what} lambda={lambda} is small; the adversary diverges once sum(theta_j^2 / w_j^2) exceeds lambda"
        );
    }
}

/// Warns about multipliers that commonly make the ascent diverge.
fn warn_method(what: &str, kind: MethodKind, cfg: &Value) {
    let lambda = match kind {
        MethodKind::Sal => cfg.get("lambda"),
        MethodKind::Wdrl if cfg.get("radius").is_none_or(Value::is_null) => cfg.get("reg_lambda"),
        _ => None,
    };
    if let Some(l) = lambda.and_then(Value::as_f64) {
        warn_lambda(what, l);
    }
}

fn data_file(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn load_envs(path: &Path, default_name: &str) -> CliResult<Vec<EnvDataset>> {
    Ok(eval::read_csv(&data_file(path, default_name))?)
}

fn write_json(path: &Path, provenance: &str, body: &impl Serialize) -> CliResult<()> {
    #[derive(Serialize)]
    struct Doc<'a, T: Serialize> {
        provenance: &'a str,
        #[serde(flatten)]
        body: &'a T,
    }
    let mut text = serde_json::to_string_pretty(&Doc { provenance, body }).map_err(SalError::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// Subcommands

fn default_regime(r: RegimeArg) -> Regime {
    match r {
        RegimeArg::Toy => Regime::Toy(ToyParams::default()),
        RegimeArg::SelectionBias => Regime::SelectionBias(SelectionBiasParams::default()),
        RegimeArg::AntiCausal => Regime::AntiCausal(AntiCausalParams::default()),
    }
}

fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult<()> {
    let mut v = serde_json::to_value(default_regime(a.regime)).map_err(SalError::from)?;
    if let Some(p) = &a.params {
        let patch = read_json_arg(p)?;
        if patch.get("regime").is_some_and(|r| *r != v["regime"]) {
            return Err(CliError::Usage("--params names a different regime than --regime".into()));
        }
        eval::merge_json(&mut v, &patch);
    }
    apply_sets(&mut v, &a.sets)?;
    let regime: Regime = eval::strict_from_value(&v, "regime")?;
    let spec = GenSpec {
        regime,
        seed: cli.seed.unwrap_or(0),
    };
    show_config(cli, &spec);
    let prov = eval::provenance(&config_hash(&spec), spec.seed);
    let data = datagen::generate(&spec)?;
    datagen::write_generated(&a.out, &spec, &data, &prov)?;
    println!(
        "wrote {} training and {} test environments to {}",
        data.train.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let envs = load_envs(&a.data, "train.csv")?;
    let mut cfg = layered(a.method.default_config(), a.config.as_deref(), &a.sets)?;
    if let Some(s) = cli.seed {
        eval::with_seed(a.method, &mut cfg, s)?;
    }
    show_config(cli, &cfg);
    warn_method(a.method.name(), a.method, &cfg);
    let seed_of = |v: &Value| v.pointer("/seed").or_else(|| v.pointer("/sgd/seed")).and_then(Value::as_u64);
    let mut model = eval::fit_method(a.method, &cfg, &envs, a.loss)?;
    let hash = config_hash(&json!({ "method": a.method.name(), "loss": a.loss, "config": model.config }));
    model.provenance = Some(eval::provenance(&hash, seed_of(&model.config).unwrap_or(0)));
    let mut text = model.to_json()?;
    text.push('\n');
    std::fs::write(&a.out, text).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    println!("trained {} on {} environments; wrote {}", a.method.name(), envs.len(), a.out.display());
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.model).map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let model = TrainedModel::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let envs = load_envs(&a.data, "test.csv")?;
    let report = eval::evaluate(&model, &envs, a.metric)?;
    let hash = config_hash(&json!({ "model": content_hash(text.as_bytes()), "metric": a.metric.name() }));
    let prov = eval::provenance(&hash, cli.seed.unwrap_or(0));
    eval::write_report_csv(&a.out, &report, &prov)?;
    match report.std_error {
        Some(s) => println!("{} mean={} std={}", a.metric.name(), report.mean_error, s),
        None => println!("{} mean={}", a.metric.name(), report.mean_error),
    }
    Ok(())
}

fn benchmark(cli: &Cli, a: &BenchmarkArgs) -> CliResult<()> {
    create_dir(&a.out)?;
    match a.table {
        TableArg::ToySweep => {
            let base = serde_json::to_value(ToySweepConfig::default()).map_err(SalError::from)?;
            let mut v = layered(base, a.config.as_deref(), &a.sets)?;
            if let Some(s) = cli.seed {
                v["seed"] = Value::from(s);
            }
            let cfg: ToySweepConfig = eval::strict_from_value(&v, "toy-sweep")?;
            show_config(cli, &cfg);
            if let Some(k) = cfg.knobs.iter().copied().reduce(f64::max) {
                warn_lambda("toy sweep", 1.0 / k);
            }
            let prov = eval::provenance(&config_hash(&cfg), cfg.seed);
            let res = eval::toy_sweep(&cfg, cli.jobs)?;
            eval::write_toy_csv(&a.out.join("toy_sweep.csv"), &res, &prov)?;
            write_json(&a.out.join("config.json"), &prov, &json!({ "config": cfg }))?;
            println!("erm theta {:?}", res.erm_theta);
            for r in &res.rows {
                println!("knob {} wdrl {:?} sal {:?}", r.knob, r.wdrl_theta, r.sal_theta);
            }
            for (label, dims) in [("S", &res.stable_dims), ("V", &res.unstable_dims)] {
                for &d in dims.iter() {
                    println!(
                        "{label}{} wdrl_spearman={:?} sal_spearman={:?} sal_max_rel_dev={:?}",
                        d + 1,
                        res.wdrl_trend(d),
                        res.sal_trend(d),
                        res.sal_max_rel_dev(d)
                    );
                }
            }
            if let Some(e) = res.rows.iter().find_map(|r| r.error.as_ref()) {
                eprintln!("warning: some fits failed: {e}");
            }
        }
        TableArg::SelectionBias | TableArg::AntiCausal => {
            let preset = if a.table == TableArg::SelectionBias {
                eval::selection_bias_experiment()
            } else {
                eval::anti_causal_experiment()
            };
            let base = serde_json::to_value(preset).map_err(SalError::from)?;
            let mut v = layered(base, a.config.as_deref(), &a.sets)?;
            if let Some(s) = cli.seed {
                v["seed"] = Value::from(s);
            }
            let exp: ExperimentConfig = eval::strict_from_value(&v, "experiment")?;
            exp.validate()?;
            show_config(cli, &exp);
            for m in &exp.methods {
                warn_method(m.label(), m.method, &m.params);
            }
            let res = eval::sweep(&exp, cli.jobs)?;
            let prov = eval::provenance(&res.config_hash, exp.seed);
            eval::write_results_csv(&a.out.join("results.csv"), &res, &prov)?;
            eval::write_long_csv(&a.out.join("long.csv"), &res, &prov)?;
            write_json(&a.out.join("results.json"), &prov, &json!({ "config": exp, "results": res }))?;
            for m in &res.methods {
                println!(
                    "{} mean_error={} std_error={} failed_runs={}",
                    m.name,
                    m.mean_error.map_or("nan".to_string(), |x| format!("{x:.4}")),
                    m.std_error.map_or("nan".to_string(), |x| format!("{x:.4}")),
                    m.runs.len() - m.successes()
                );
            }
            if res.methods.iter().all(|m| m.successes() == 0) {
                return Err(CliError::Numerical("every run failed".into()));
            }
        }
    }
    println!("wrote results to {}", a.out.display());
    Ok(())
}

/// SAL parameters used by the selection-bias benchmark.
fn selection_bias_sal() -> Value {
    let exp = eval::selection_bias_experiment();
    let spec = exp.methods.iter().find(|m| m.method == MethodKind::Sal).expect("preset has SAL");
    let mut v = MethodKind::Sal.default_config();
    eval::merge_json(&mut v, &spec.params);
    v
}

#[derive(Serialize)]
struct GradReport<'a> {
    config: &'a SalConfig,
    snapshot: usize,
    weights: &'a [f64],
    #[serde(flatten)]
    report: &'a sal::AccuracyReport,
}

fn check_grad(cli: &Cli, a: &CheckGradArgs) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    let envs = match &a.data {
        Some(d) => load_envs(d, "train.csv")?,
        None => {
            datagen::generate(&GenSpec {
                regime: Regime::SelectionBias(SelectionBiasParams::default()),
                seed,
            })?
            .train
        }
    };
    let mut v = layered(selection_bias_sal(), a.config.as_deref(), &a.sets)?;
    if let Some(s) = cli.seed {
        v["seed"] = Value::from(s);
    }
    let cfg: SalConfig = eval::strict_from_value(&v, "sal")?;
    show_config(cli, &cfg);
    warn_lambda("sal", cfg.lambda);
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(CliError::Usage("--step must be positive".into()));
    }
    let snap = sal::snapshot_at(&envs, a.loss, &cfg, a.snapshot)?;
    let rep = sal::gradient_accuracy_check(
        &snap,
        &envs,
        a.loss,
        &cfg,
        a.trials,
        a.step,
        derive_seed(seed, "check-grad", 0, 0),
    )?;
    println!(
        "fraction={} wins={} ties={} trials={} approx_delta_r={:e}",
        rep.fraction, rep.wins, rep.ties, rep.n_random, rep.approx_delta_r
    );
    if let Some(out) = &a.out {
        let hash = config_hash(&json!({ "config": cfg, "snapshot": a.snapshot, "step": a.step, "trials": a.trials }));
        let prov = eval::provenance(&hash, seed);
        let body = GradReport {
            config: &cfg,
            snapshot: a.snapshot,
            weights: snap.weights.as_slice(),
            report: &rep,
        };
        write_json(out, &prov, &body)?;
    }
    Ok(())
}

/// Boundary distance tolerance for the constructed `Q0`.
pub const BOUNDARY_TOL: f64 = 1e-8;
/// Slack allowed in the duality inequality.
pub const DUALITY_TOL: f64 = 1e-6;

fn verify_ot(cli: &Cli, a: &VerifyOtArgs) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    show_config(cli, &json!({ "trials": a.trials, "duality_instances": a.duality_instances, "duality_samples": a.duality_samples, "seed": seed }));
    let c = ot::verify_containment(a.trials, derive_seed(seed, "verify-ot", 0, 0))?;
    let d = ot::verify_duality(a.duality_instances, a.duality_samples, DUALITY_TOL, derive_seed(seed, "verify-ot", 1, 0))?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "containment instances={} trials={} in_weighted_ball={} violations={} boundary_max_error={:e} {}",
        c.instances,
        c.trials,
        c.in_weighted_ball,
        c.violations,
        c.boundary_max_error,
        verdict(c.passed(BOUNDARY_TOL))
    );
    println!(
        "duality instances={} in_ball_samples={} failures={} max_gap={:e} {}",
        d.instances,
        d.q_in_ball,
        d.failures,
        d.max_gap,
        verdict(d.failures == 0)
    );
    if let Some(out) = &a.out {
        let hash = config_hash(&json!({ "trials": a.trials, "duality_instances": a.duality_instances, "duality_samples": a.duality_samples }));
        write_json(out, &eval::provenance(&hash, seed), &json!({ "containment": c, "duality": d }))?;
    }
    if !c.passed(BOUNDARY_TOL) || d.failures > 0 {
        return Err(CliError::Numerical("optimal-transport property check failed".into()));
    }
    Ok(())
}

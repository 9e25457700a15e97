//! Same seed, same bytes: library entry points and every CLI subcommand.

use std::path::Path;
use std::process::Command;

use sal_core::datagen::{self, AntiCausalParams, GenSpec, Regime, SelectionBiasParams, ToyParams};
use sal_core::eval::{self, ExperimentConfig, MethodKind, MethodSpec, ValidationRule};
use sal_core::{sal, LossKind, SalConfig};
use serde_json::json;

const BIN: &str = env!("CARGO_BIN_EXE_sal");

fn sal_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("run sal");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = sal_cli(args);
    assert_eq!(code, 0, "sal {args:?} failed: {stderr}");
    stdout
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
pub fn generators_are_seed_deterministic() {
    for regime in [
        Regime::Toy(ToyParams::default()),
        Regime::SelectionBias(SelectionBiasParams::default()),
        Regime::AntiCausal(AntiCausalParams::scenario2()),
    ] {
        let spec = GenSpec { regime, seed: 11 };
        let a = datagen::generate(&spec).unwrap();
        let b = datagen::generate(&spec).unwrap();
        assert_eq!(a, b);
        let c = datagen::generate(&GenSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }
}

#[test]
pub fn training_is_deterministic_and_thread_count_invariant() {
    let envs = datagen::generate(&GenSpec {
        regime: Regime::SelectionBias(SelectionBiasParams::default()),
        seed: 0,
    })
    .unwrap()
    .train;
    let cfg = SalConfig {
        lambda: 0.05,
        eps_x: 1.0,
        ascent_steps: 8,
        eps_theta: 0.1,
        theta_iters: 10,
        outer_iters: 5,
        eps_w: 10.0,
        alpha: 0.1,
        ..SalConfig::default()
    };
    let a = sal::train(&envs, LossKind::Squared, &cfg).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| sal::train(&envs, LossKind::Squared, &cfg).unwrap());
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
pub fn sweeps_do_not_depend_on_jobs() {
    let exp = ExperimentConfig {
        name: "det".into(),
        data: eval::DataSource::Generate {
            spec: GenSpec {
                regime: Regime::Toy(ToyParams::default()),
                seed: 0,
            },
        },
        methods: vec![
            MethodSpec::new(MethodKind::Erm, json!({ "sgd": { "iters": 100 } })),
            MethodSpec::new(MethodKind::Ridge, json!({ "sgd": { "iters": 100 } })).with_grid("reg_lambda", vec![json!(0.01), json!(1.0)]),
            MethodSpec::new(MethodKind::Sal, json!({ "outer_iters": 3, "theta_iters": 10, "lambda": 1.0 })),
        ],
        validation: Some(ValidationRule::IidHoldout { fraction: 0.2 }),
        repeats: 3,
        metric: Default::default(),
        loss: LossKind::Squared,
        seed: 4,
    };
    let a = eval::sweep(&exp, 1).unwrap();
    let b = eval::sweep(&exp, 3).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
pub fn every_subcommand_reproduces_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let (r1, r2) = (d("run1"), d("run2"));
    let cfg_path = d("bench.json");
    std::fs::write(
        &cfg_path,
        json!({
            "repeats": 2,
            "methods": [
                { "method": "erm", "params": { "sgd": { "iters": 100 } } },
                { "method": "sal", "params": { "lambda": 20.0, "eps_x": 0.5, "outer_iters": 3, "theta_iters": 5, "eps_theta": 0.02 } }
            ]
        })
        .to_string(),
    )
    .unwrap();
    for run in [&r1, &r2] {
        let p = |s: &str| format!("{run}/{s}");
        std::fs::create_dir_all(run).unwrap();
        ok(&["generate", "--regime", "toy", "--seed", "7", "--out", &p("toy")]);
        ok(&["generate", "--regime", "anti-causal", "--seed", "7", "--params", r#"{"n_s": 9, "n_v": 1, "test_n": 50}"#, "--out", &p("ac")]);
        ok(&["train", "--method", "sal", "--data", &p("toy"), "--seed", "3", "--set", "outer_iters=3", "--set", "lambda=1", "--out", &p("sal.json")]);
        ok(&["train", "--method", "ridge", "--data", &p("toy"), "--set", "reg_lambda=0.1", "--out", &p("ridge.json")]);
        ok(&["evaluate", "--model", &p("sal.json"), "--data", &p("toy"), "--metric", "loss", "--out", &p("sal_report.csv")]);
        ok(&["benchmark", "--table", "toy-sweep", "--set", "knobs=[1,2]", "--set", "sal.outer_iters=2", "--out", &p("toy_bench")]);
        ok(&["benchmark", "--table", "anti-causal", "--config", &cfg_path, "--seed", "2", "--jobs", "2", "--out", &p("ac_bench")]);
        ok(&["check-grad", "--trials", "10", "--snapshot", "1", "--set", "outer_iters=2", "--set", "theta_iters=5", "--out", &p("grad.json")]);
        ok(&["verify-ot", "--trials", "20", "--duality-instances", "5", "--seed", "9", "--out", &p("ot.json")]);
    }
    let mut compared = 0;
    for sub in ["", "toy", "ac", "toy_bench", "ac_bench"] {
        let a = read_tree(&Path::new(&r1).join(sub));
        let b = read_tree(&Path::new(&r2).join(sub));
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert!(ba == bb, "{sub}/{na} differs between runs");
            compared += 1;
        }
    }
    assert!(compared >= 14);
    // Every artifact carries the provenance header.
    for f in ["toy/train.csv", "sal_report.csv", "ac_bench/results.csv", "toy_bench/toy_sweep.csv"] {
        let text = std::fs::read_to_string(Path::new(&r1).join(f)).unwrap();
        assert!(text.starts_with("# sal-core "), "{f}");
        assert!(text.lines().next().unwrap().contains("config=") && text.contains("seed="));
    }
    for f in ["sal.json", "grad.json", "ot.json", "ac_bench/results.json", "toy/ground_truth.json"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&r1).join(f)).unwrap()).unwrap();
        let has = v.get("provenance").and_then(|p| p.as_str()).is_some_and(|p| p.starts_with("sal-core "));
        assert!(has || f.ends_with("ground_truth.json"), "{f} lacks provenance");
    }
}

#[test]
pub fn robust_fit_with_huge_multiplier_evaluates_like_erm() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    ok(&["generate", "--regime", "toy", "--seed", "1", "--out", &p("d")]);
    ok(&["train", "--method", "erm", "--data", &p("d"), "--set", "sgd.iters=1000", "--out", &p("erm.json")]);
    ok(&["train", "--method", "wdrl", "--data", &p("d"), "--set", "sgd.iters=1000", "--set", "reg_lambda=1e6", "--out", &p("wdrl.json")]);
    let parse = |s: String| -> f64 {
        let mean = s.split_whitespace().find_map(|t| t.strip_prefix("mean=")).unwrap();
        mean.parse().unwrap()
    };
    let e = parse(ok(&["evaluate", "--model", &p("erm.json"), "--data", &p("d"), "--out", &p("e.csv")]));
    let w = parse(ok(&["evaluate", "--model", &p("wdrl.json"), "--data", &p("d"), "--out", &p("w.csv")]));
    assert!((e - w).abs() < 1e-3, "erm {e} vs wdrl {w}");
}

#[test]
pub fn exit_codes_classify_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    ok(&["generate", "--regime", "toy", "--seed", "1", "--out", &p("d")]);

    let (code, _, err) = sal_cli(&["train", "--method", "nope", "--data", &p("d"), "--out", &p("m.json")]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: code=1 kind=usage"));

    let (code, _, err) = sal_cli(&["train", "--method", "sal", "--data", &p("d"), "--set", "bogus=1", "--out", &p("m.json")]);
    assert_eq!(code, 1, "{err}");

    let (code, _, err) = sal_cli(&["train", "--method", "erm", "--data", &p("missing"), "--out", &p("m.json")]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error: code=2 kind=data"));

    let (code, _, _) = sal_cli(&["train", "--method", "erm", "--loss", "logistic", "--data", &p("d"), "--out", &p("m.json")]);
    assert_eq!(code, 2);

    let (code, _, err) = sal_cli(&[
        "train", "--method", "sal", "--data", &p("d"), "--set", "lambda=0.001", "--set", "eps_x=1",
        "--set", "ascent_steps=200", "--set", "outer_iters=2", "--out", &p("m.json"),
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.lines().any(|l| l.starts_with("warning:")));
    assert!(err.lines().last().unwrap().starts_with("error: code=3 kind=numerical"));

    let (code, out, _) = sal_cli(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["generate", "train", "evaluate", "benchmark", "check-grad", "verify-ot"] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
}

#[test]
pub fn verbose_prints_the_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let cfg = p("c.json");
    std::fs::write(&cfg, r#"{"lambda": 3.0, "alpha": 0.5}"#).unwrap();
    ok(&["generate", "--regime", "toy", "--out", &p("d")]);
    let out = Command::new(BIN)
        .args(["-v", "train", "--method", "sal", "--data", &p("d"), "--config", &cfg, "--set", "alpha=0.25", "--set", "outer_iters=1", "--out", &p("m.json")])
        .output()
        .unwrap();
    assert!(out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().find(|l| l.starts_with("effective config: ")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim_start_matches("effective config: ")).unwrap();
    assert_eq!(v["lambda"], json!(3.0));
    assert_eq!(v["alpha"], json!(0.25));
    assert_eq!(v["outer_iters"], json!(1));
}

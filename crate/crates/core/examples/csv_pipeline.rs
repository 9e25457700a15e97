//! Round trip through CSV: write generated data, ingest it with normalisation,
//! carve a validation split, fit from a JSON config and write a report.

use sal_core::datagen::{self, GenSpec, Regime, ToyParams};
use sal_core::eval::{self, MethodKind, MetricKind, ValidationRule};
use sal_core::LossKind;
use serde_json::json;

fn main() -> sal_core::Result<()> {
    let dir = std::env::temp_dir().join("sal_csv_pipeline");
    let spec = GenSpec {
        regime: Regime::Toy(ToyParams::default()),
        seed: 3,
    };
    let data = datagen::generate(&spec)?;
    let prov = eval::provenance("example", spec.seed);
    datagen::write_generated(&dir, &spec, &data, &prov)?;

    let (train, stats) = eval::ingest_csv(&dir.join("train.csv"), true)?;
    let stats = stats.expect("normalisation requested");
    let test = eval::ingest_csv_with(&dir.join("test.csv"), &stats)?;
    println!("feature means {:?}, stds {:?}", stats.mean, stats.std);

    let (fit_envs, val) = eval::validation_split(&train, &ValidationRule::IidHoldout { fraction: 0.2 }, 0)?;
    let model = eval::fit_method(MethodKind::Ridge, &json!({ "reg_lambda": 0.01, "sgd": { "iters": 500 } }), &fit_envs, LossKind::Squared)?;
    let v = eval::evaluate(&model, &val, MetricKind::Rmse)?;
    let t = eval::evaluate(&model, &test, MetricKind::Rmse)?;
    println!("validation rmse {:.4}; test rmse {:.4} ± {:.4}", v.mean_error, t.mean_error, t.std_error.unwrap_or(0.0));

    let out = dir.join("report.csv");
    eval::write_report_csv(&out, &t, &prov)?;
    println!("wrote {}", out.display());
    Ok(())
}

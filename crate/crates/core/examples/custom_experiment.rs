//! Builds an experiment from JSON: a ridge grid chosen on a holdout split
//! against ERM and SAL, repeated over fresh data draws.

use sal_core::eval::{self, ExperimentConfig};
use serde_json::json;

fn main() -> sal_core::Result<()> {
    let exp: ExperimentConfig = serde_json::from_value(json!({
        "name": "toy-ridge",
        "data": { "source": "generate", "regime": "toy", "seed": 0 },
        "methods": [
            { "method": "erm", "params": { "sgd": { "iters": 500 } } },
            { "method": "ridge", "params": { "sgd": { "iters": 500 } },
              "grid": { "reg_lambda": [0.001, 0.01, 0.1, 1.0] } },
            { "method": "sal", "params": { "lambda": 1.0, "eps_x": 0.5, "ascent_steps": 20,
              "eps_theta": 0.02, "outer_iters": 10 } }
        ],
        "validation": { "rule": "iid_holdout", "fraction": 0.2 },
        "repeats": 3,
        "seed": 5
    }))?;
    let res = eval::sweep(&exp, 1)?;
    for m in &res.methods {
        let picked: Vec<_> = m.runs.iter().map(|r| r.hyperparams().cloned().unwrap_or_default()).collect();
        println!("{:<6} mean {:.4} std {:.4} picked {:?}", m.name, m.mean_error.unwrap_or(f64::NAN), m.std_error.unwrap_or(f64::NAN), picked);
    }
    let out = std::env::temp_dir().join("sal_custom_experiment.csv");
    eval::write_results_csv(&out, &res, &eval::provenance(&res.config_hash, exp.seed))?;
    println!("wrote {}", out.display());
    Ok(())
}

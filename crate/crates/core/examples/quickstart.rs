//! Train ERM and SAL on selection-biased data and compare them on shifted test environments.

use sal_core::baselines::{self, BaselineConfig, BaselineMethod};
use sal_core::datagen::{self, GenSpec, Regime, SelectionBiasParams};
use sal_core::eval::{evaluate, MetricKind};
use sal_core::{sal, LossKind, SalConfig};

fn main() -> sal_core::Result<()> {
    let data = datagen::generate(&GenSpec {
        regime: Regime::SelectionBias(SelectionBiasParams::default()),
        seed: 1,
    })?;
    println!("{} training envs, {} test envs", data.train.len(), data.test.len());

    let mut erm_cfg = BaselineConfig::new(BaselineMethod::Erm);
    erm_cfg.sgd.iters = 400;
    erm_cfg.sgd.step = 0.1;
    let erm = baselines::fit(&data.train, LossKind::Squared, &erm_cfg)?;

    let sal_cfg = SalConfig {
        lambda: 0.05,
        eps_x: 1.0,
        ascent_steps: 8,
        eps_theta: 0.1,
        theta_iters: 50,
        outer_iters: 40,
        eps_w: 10.0,
        alpha: 0.1,
        ..SalConfig::default()
    };
    let model = sal::train(&data.train, LossKind::Squared, &sal_cfg)?;

    for (name, m) in [("erm", &erm), ("sal", &model)] {
        let r = evaluate(m, &data.test, MetricKind::Rmse)?;
        println!("{name}: mean rmse {:.4}, std {:.4}", r.mean_error, r.std_error.unwrap_or(f64::NAN));
    }
    println!("stable dims {:?}, unstable dims {:?}", data.truth.stable_dims, data.truth.unstable_dims);
    println!("erm theta   {:?}", rounded(&erm.params.theta));
    println!("sal theta   {:?}", rounded(&model.params.theta));
    println!("sal weights {:?}", rounded(model.weights.as_slice()));
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

//! Fits every baseline on anti-causal data and reports coefficients and test error.

use sal_core::baselines::{self, BaselineConfig, BaselineMethod};
use sal_core::datagen::{self, AntiCausalParams, GenSpec, Regime};
use sal_core::eval::{evaluate, MetricKind};
use sal_core::LossKind;

fn main() -> sal_core::Result<()> {
    let data = datagen::generate(&GenSpec {
        regime: Regime::AntiCausal(AntiCausalParams::scenario2()),
        seed: 4,
    })?;
    let configs = [
        (BaselineMethod::Erm, 0.0, None),
        (BaselineMethod::Ridge, 0.1, None),
        (BaselineMethod::Lasso, 0.01, None),
        (BaselineMethod::Irm, 0.01, None),
        (BaselineMethod::Wdrl, 20.0, None),
        (BaselineMethod::Wdrl, 0.0, Some(1.0)),
    ];
    for (method, reg, radius) in configs {
        let mut cfg = BaselineConfig::new(method);
        cfg.reg_lambda = reg;
        cfg.radius = radius;
        cfg.sgd.iters = 1000;
        cfg.sgd.step = if method == BaselineMethod::Irm { 0.01 } else { 0.1 };
        cfg.eps_x = 0.5;
        let m = baselines::fit(&data.train, LossKind::Squared, &cfg)?;
        let r = evaluate(&m, &data.test, MetricKind::Rmse)?;
        let theta: Vec<String> = m.params.theta.iter().map(|t| format!("{t:+.2}")).collect();
        let label = match radius {
            Some(rho) => format!("{} rho={rho}", method.name()),
            None => format!("{} reg={reg}", method.name()),
        };
        println!("{label:<16} rmse {:.3}±{:.3}  theta [{}]", r.mean_error, r.std_error.unwrap_or(0.0), theta.join(" "));
    }
    Ok(())
}

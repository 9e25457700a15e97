//! Checks the approximate weight gradient: the step along it should lower the
//! stability objective more than random steps of the same length.

use sal_core::datagen::{self, GenSpec, Regime, SelectionBiasParams};
use sal_core::{sal, LossKind, SalConfig};

fn main() -> sal_core::Result<()> {
    let n = std::env::args().nth(1).map_or(200, |s| s.parse().expect("directions"));
    let data = datagen::generate(&GenSpec {
        regime: Regime::SelectionBias(SelectionBiasParams::default()),
        seed: 0,
    })?;
    let cfg = SalConfig {
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
    for k in [0, 5] {
        let snap = sal::snapshot_at(&data.train, LossKind::Squared, &cfg, k)?;
        let rep = sal::gradient_accuracy_check(&snap, &data.train, LossKind::Squared, &cfg, n, 0.1, 7)?;
        println!(
            "outer iter {k}: R change along -grad {:.3e}; beats {} of {} random directions (fraction {:.3})",
            rep.approx_delta_r, rep.wins, rep.n_random, rep.fraction
        );
    }
    Ok(())
}

//! Sweeps the robustness knob on the two-covariate toy data and prints how the
//! learned coefficients on the stable (S) and unstable (V) covariate move.

use sal_core::eval::{toy_sweep, ToySweepConfig};

fn main() -> sal_core::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let cfg = ToySweepConfig {
        seed,
        ..ToySweepConfig::default()
    };
    let res = toy_sweep(&cfg, 1)?;
    println!("erm: S {:.3} V {:.3}", res.erm_theta[0], res.erm_theta[1]);
    println!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}", "knob", "wdrl S", "wdrl V", "sal S", "sal V", "w_S", "w_V");
    for r in &res.rows {
        let (ws, wv) = r.wdrl_theta.as_ref().map_or((f64::NAN, f64::NAN), |t| (t[0], t[1]));
        let (ss, sv) = r.sal_theta.as_ref().map_or((f64::NAN, f64::NAN), |t| (t[0], t[1]));
        let (a, b) = r.sal_w.as_ref().map_or((f64::NAN, f64::NAN), |w| (w[0], w[1]));
        println!("{:>6} {ws:>10.4} {wv:>10.4} {ss:>10.4} {sv:>10.4} {a:>8.2} {b:>8.2}", r.knob);
    }
    println!(
        "spearman vs knob: wdrl S {:?} V {:?}; sal V {:?}; sal S max deviation from erm {:?}",
        res.wdrl_trend(0),
        res.wdrl_trend(1),
        res.sal_trend(1),
        res.sal_max_rel_dev(0)
    );
    Ok(())
}

//! Per-environment test error of ERM and SAL when the unstable covariate is
//! generated from the target with an environment-dependent noise level.

use sal_core::eval::{anti_causal_experiment, sweep};

fn main() -> sal_core::Result<()> {
    let repeats = std::env::args().nth(1).map_or(5, |s| s.parse().expect("repeats"));
    let mut exp = anti_causal_experiment();
    exp.repeats = repeats;
    let res = sweep(&exp, 1)?;
    let envs: Vec<i64> = res.methods[0].per_env.keys().copied().collect();
    print!("{:<6}", "method");
    for e in &envs {
        print!(" {:>7}", format!("env{e}"));
    }
    println!(" {:>7}", "spread");
    for m in &res.methods {
        print!("{:<6}", m.name);
        for e in &envs {
            print!(" {:>7.3}", m.per_env.get(e).copied().unwrap_or(f64::NAN));
        }
        let (lo, hi) = m.per_env.values().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        println!(" {:>7.3}", hi - lo);
    }
    Ok(())
}

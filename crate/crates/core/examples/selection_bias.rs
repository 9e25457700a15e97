//! The selection-bias benchmark: ERM, WDRL (radius tuned on a holdout) and SAL
//! over repeated draws. Pass the repeat count and thread count as arguments.

use sal_core::eval::{selection_bias_experiment, sweep};

fn main() -> sal_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let repeats = args.next().map_or(10, |s| s.parse().expect("repeats"));
    let jobs = args.next().map_or(1, |s| s.parse().expect("jobs"));
    let mut exp = selection_bias_experiment();
    exp.repeats = repeats;
    let res = sweep(&exp, jobs)?;
    println!("{:<6} {:>10} {:>10} {:>7}", "method", "mean_err", "std_err", "failed");
    for m in &res.methods {
        println!(
            "{:<6} {:>10.4} {:>10.4} {:>7}",
            m.name,
            m.mean_error.unwrap_or(f64::NAN),
            m.std_error.unwrap_or(f64::NAN),
            m.runs.len() - m.successes()
        );
    }
    if let Some(w) = res.method("wdrl") {
        let picked: Vec<_> = w.runs.iter().filter_map(|r| r.hyperparams().and_then(|h| h.get("radius").cloned())).collect();
        println!("wdrl radii picked per repeat: {picked:?}");
    }
    Ok(())
}

//! How the per-covariate transport weights shape the adversarial perturbation.
//! A heavily weighted coordinate is expensive to move, so the adversary leaves it alone.

use ndarray::{array, Array1};
use sal_core::adversary::{ascend, s_lambda, AdvConfig};
use sal_core::cost::cost;
use sal_core::{CovariateWeights, EnvDataset, LossKind, ModelParams};

fn main() -> sal_core::Result<()> {
    let params = ModelParams::new(vec![1.0, 1.0], None)?;
    let data = EnvDataset::new(array![[0.5, -0.2], [1.0, 0.3]], Array1::from(vec![0.0, 0.5]), 1)?;
    let cfg = AdvConfig {
        lambda: 4.0,
        eps_x: 0.1,
        ascent_steps: 50,
    };

    for w in [vec![1.0, 1.0], vec![1.0, 5.0], vec![5.0, 1.0]] {
        let w = CovariateWeights::new(w)?;
        let st = ascend(&params, LossKind::Squared, &w, &data, &cfg)?;
        println!("w = {:?}", w.as_slice());
        for i in 0..data.len() {
            let x = data.row(i).to_vec();
            let xa = st.x_a.row(i).to_vec();
            let shift: Vec<f64> = xa.iter().zip(&x).map(|(a, b)| a - b).collect();
            let c = cost(&w, &xa, &x, data.y[i], data.y[i])?;
            let s = s_lambda(&params, LossKind::Squared, &w, &x, data.y[i], &cfg)?;
            println!("  sample {i}: shift {shift:.4?}  cost {c:.4}  s_lambda {s:.4}");
        }
    }
    Ok(())
}

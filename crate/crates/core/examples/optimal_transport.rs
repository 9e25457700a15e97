//! Exact transport distances between small discrete distributions, the ball
//! containment property of weighted costs, and the Lagrangian duality bound.

use sal_core::ot::{self, CostKind, DiscreteDistribution};
use sal_core::CovariateWeights;

fn main() -> sal_core::Result<()> {
    let p = DiscreteDistribution::uniform(vec![vec![0.0, 0.0], vec![1.0, 0.0]])?;
    let q = DiscreteDistribution::new(vec![vec![0.0, 0.5], vec![1.5, 0.0]], vec![0.5, 0.5])?;
    let w = CovariateWeights::new(vec![1.0, 5.0])?;
    for cost in [CostKind::SqL2, CostKind::WeightedSqL2(w.clone()), CostKind::L1, CostKind::WeightedL1(w.clone())] {
        println!("{cost:?}: W = {:.4}", ot::wasserstein(&p, &q, &cost)?);
    }

    let rho = 0.3;
    let cost = CostKind::WeightedSqL2(w);
    let q0 = ot::boundary_q0(&p, rho, &cost)?;
    println!("boundary distribution at rho {rho}: W = {:.12}", ot::wasserstein(&q0, &p, &cost)?);

    let c = ot::verify_containment(200, 11)?;
    println!(
        "containment: {} of {} random Q in the weighted ball, {} outside the plain ball",
        c.in_weighted_ball, c.trials, c.violations
    );
    let d = ot::verify_duality(20, 100, 1e-6, 11)?;
    println!("duality: {} failures over {} instances, largest primal-dual gap {:.2e}", d.failures, d.instances, d.max_gap);
    Ok(())
}

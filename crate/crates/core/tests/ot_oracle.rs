//! Exact transport against a brute-force assignment oracle.
//!
//! With every probability a multiple of `1/K`, each distribution splits into
//! `K` equal atoms, and an optimal coupling can be taken to be a permutation
//! of them, so the optimum is a minimum over `K!` assignments.

use sal_core::ot::{self, CostKind, DiscreteDistribution};
use sal_core::rng::SalRng;
use sal_core::CovariateWeights;

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Random distribution with `count` atoms whose masses are multiples of `1/k`.
fn rational(rng: &mut SalRng, k: usize, dim: usize) -> (DiscreteDistribution, Vec<usize>) {
    let atoms = 1 + rng.below(k);
    // Split k units into `atoms` positive parts.
    let mut units = vec![1; atoms];
    for _ in atoms..k {
        units[rng.below(atoms)] += 1;
    }
    let support: Vec<Vec<f64>> = (0..atoms).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
    let probs = units.iter().map(|u| *u as f64 / k as f64).collect();
    let mut owner = Vec::new();
    for (i, u) in units.iter().enumerate() {
        owner.extend(std::iter::repeat_n(i, *u));
    }
    (DiscreteDistribution::new(support, probs).unwrap(), owner)
}

fn brute_force(p: &DiscreteDistribution, po: &[usize], q: &DiscreteDistribution, qo: &[usize], cost: impl Fn(&[f64], &[f64]) -> f64, perms: &[Vec<usize>]) -> f64 {
    let k = po.len() as f64;
    perms
        .iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(a, &b)| cost(&p.support()[po[a]], &q.support()[qo[b]]))
                .sum::<f64>()
                / k
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn lp_matches_assignment_oracle_for_all_cost_forms() {
    let mut rng = SalRng::new(21);
    for k in 1..=6 {
        let perms = permutations(k);
        for _ in 0..40 {
            let dim = 1 + rng.below(3);
            let (p, po) = rational(&mut rng, k, dim);
            let (q, qo) = rational(&mut rng, k, dim);
            let raw: Vec<f64> = (0..dim).map(|_| 1.0 + 4.0 * rng.uniform()).collect();
            let w: CovariateWeights = sal_core::cost::project(&raw).unwrap();
            for cost in [CostKind::SqL2, CostKind::L1, CostKind::WeightedSqL2(w.clone()), CostKind::WeightedL1(w.clone())] {
                let lp = ot::wasserstein(&p, &q, &cost).unwrap();
                let bf = brute_force(&p, &po, &q, &qo, |a, b| cost.eval(a, b), &perms);
                assert!((lp - bf).abs() <= 1e-9 * (1.0 + bf), "k={k} {cost:?}: lp {lp} vs brute force {bf}");
            }
        }
    }
}

#[test]
fn infinite_label_costs_match_the_oracle() {
    let mut rng = SalRng::new(22);
    let k = 4;
    let perms = permutations(k);
    let labelled = |a: &[f64], b: &[f64]| if a[1] == b[1] { (a[0] - b[0]).powi(2) } else { f64::INFINITY };
    let mut finite_cases = 0;
    for _ in 0..200 {
        let (mut p, po) = rational(&mut rng, k, 2);
        let (mut q, qo) = rational(&mut rng, k, 2);
        // Binary labels in the second coordinate.
        let relabel = |d: &mut DiscreteDistribution, rng: &mut SalRng| {
            let s: Vec<Vec<f64>> = d.support().iter().enumerate().map(|(i, z)| vec![z[0] + i as f64 * 1e-3, f64::from(rng.uniform() < 0.5)]).collect();
            *d = DiscreteDistribution::new(s, d.probs().to_vec()).unwrap();
        };
        relabel(&mut p, &mut rng);
        relabel(&mut q, &mut rng);
        let bf = brute_force(&p, &po, &q, &qo, labelled, &perms);
        match ot::wasserstein_with(&p, &q, labelled) {
            Ok(lp) => {
                assert!(bf.is_finite(), "lp found {lp} where no finite coupling exists");
                assert!((lp - bf).abs() <= 1e-9 * (1.0 + bf), "lp {lp} vs {bf}");
                finite_cases += 1;
            }
            Err(_) => assert!(bf.is_infinite(), "lp failed but the oracle found {bf}"),
        }
    }
    assert!(finite_cases > 20);
}

#[test]
fn distance_axioms_on_random_instances() {
    let mut rng = SalRng::new(23);
    for _ in 0..100 {
        let (p, _) = rational(&mut rng, 5, 2);
        let (q, _) = rational(&mut rng, 5, 2);
        let (r, _) = rational(&mut rng, 5, 2);
        for cost in [CostKind::L1, CostKind::SqL2] {
            let pq = ot::wasserstein(&p, &q, &cost).unwrap();
            let qp = ot::wasserstein(&q, &p, &cost).unwrap();
            assert!((pq - qp).abs() < 1e-9, "asymmetric: {pq} vs {qp}");
            assert!(ot::wasserstein(&p, &p, &cost).unwrap().abs() < 1e-12);
            if cost == CostKind::L1 {
                let pr = ot::wasserstein(&p, &r, &cost).unwrap();
                let rq = ot::wasserstein(&r, &q, &cost).unwrap();
                assert!(pq <= pr + rq + 1e-9, "triangle: {pq} > {pr} + {rq}");
            }
        }
    }
}

//! The weighted transportation cost `c_w` and its weight space.
//!
//! `c_w((x1, y1), (x2, y2)) = ‖w ⊙ (x1 − x2)‖² + ∞·[y1 ≠ y2]`, with `w` living
//! in `W = { w : w_i ≥ 1, min_i w_i = 1 }`. Targets are never perturbed, so
//! the label term only ever shows up as a sentinel.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SalError};

/// Tolerance on `min w = 1` after projection.
pub const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateWeights(Vec<f64>);

impl CovariateWeights {
    pub fn ones(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    /// Accepts `w` only if it already lies in `W`.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(SalError::InvalidInput("empty weight vector".into()));
        }
        if !w.iter().all(|v| v.is_finite() && *v >= 1.0 - WEIGHT_TOL) {
            return Err(SalError::InvalidInput(format!("weights {w:?} not in [1, inf)")));
        }
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        if (min - 1.0).abs() > WEIGHT_TOL {
            return Err(SalError::InvalidInput(format!("min weight {min} != 1")));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn squared(&self) -> Vec<f64> {
        self.0.iter().map(|w| w * w).collect()
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SalError::DimensionMismatch { expected, got })
    }
}

/// `c_w` between two labelled points; `+∞` when the labels differ.
pub fn cost(w: &CovariateWeights, x1: &[f64], x2: &[f64], y1: f64, y2: f64) -> Result<f64> {
    check_len(w.len(), x1.len())?;
    check_len(w.len(), x2.len())?;
    if y1 != y2 {
        return Ok(f64::INFINITY);
    }
    Ok(weighted_sq_dist(w.as_slice(), x1, x2))
}

#[inline]
pub(crate) fn weighted_sq_dist(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter()
        .zip(a.iter().zip(b))
        .map(|(wi, (ai, bi))| {
            let d = wi * (ai - bi);
            d * d
        })
        .sum()
}

/// Gradient of `c_w(x̂, x)` in `x̂`: `2 · w ⊙ w ⊙ (x̂ − x)`.
pub fn cost_grad_xhat(w: &CovariateWeights, xhat: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_len(w.len(), xhat.len())?;
    check_len(w.len(), x.len())?;
    Ok(w.as_slice()
        .iter()
        .zip(xhat.iter().zip(x))
        .map(|(wi, (a, b))| 2.0 * wi * wi * (a - b))
        .collect())
}

/// Maps a raw vector into `W`: clamp every entry at 1, then shift all entries
/// down by `min − 1`. Ordering and gaps between entries are preserved.
pub fn project(w_raw: &[f64]) -> Result<CovariateWeights> {
    if w_raw.is_empty() {
        return Err(SalError::InvalidInput("empty weight vector".into()));
    }
    if !w_raw.iter().all(|v| v.is_finite()) {
        return Err(SalError::NonFinite("raw weights".into()));
    }
    let clamped: Vec<f64> = w_raw.iter().map(|v| v.max(1.0)).collect();
    let shift = clamped.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    if shift == 0.0 {
        return Ok(CovariateWeights(clamped));
    }
    let mut out: Vec<f64> = clamped.iter().map(|v| v - shift).collect();
    // Rounding in `v - shift` can leave the minimum a few ulps off 1.
    for v in out.iter_mut().filter(|v| **v < 1.0 + WEIGHT_TOL) {
        *v = 1.0;
    }
    Ok(CovariateWeights(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(v: &[f64]) -> CovariateWeights {
        CovariateWeights::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cost_examples() {
        assert_eq!(cost(&w(&[1.0, 1.0]), &[3.0, 4.0], &[0.0, 0.0], 1.0, 1.0).unwrap(), 25.0);
        assert_eq!(cost(&w(&[1.0, 2.0]), &[3.0, 4.0], &[0.0, 0.0], 1.0, 1.0).unwrap(), 73.0);
        assert_eq!(
            cost(&w(&[1.0, 3.0]), &[0.5, 0.5], &[0.5, 0.5], 0.0, 1.0).unwrap(),
            f64::INFINITY
        );
        assert!(cost(&w(&[1.0]), &[1.0, 2.0], &[1.0, 2.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn cost_grad_examples() {
        assert_eq!(cost_grad_xhat(&w(&[1.0]), &[1.0], &[0.0]).unwrap(), vec![2.0]);
        assert_eq!(
            cost_grad_xhat(&w(&[1.0, 4.0]), &[0.3, -2.0], &[0.3, -2.0]).unwrap(),
            vec![0.0, 0.0]
        );
        // w = [2] is only reachable through the raw-vector path; W needs min 1.
        let raw = CovariateWeights(vec![2.0]);
        assert_eq!(cost_grad_xhat(&raw, &[1.0], &[0.0]).unwrap(), vec![8.0]);
    }

    #[test]
    fn project_examples() {
        assert_eq!(project(&[1.0, 2.0]).unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(project(&[0.5, 3.0]).unwrap().as_slice(), &[1.0, 3.0]);
        assert_eq!(project(&[2.0, 4.0]).unwrap().as_slice(), &[1.0, 3.0]);
        assert!(project(&[f64::NAN]).is_err());
    }

    #[test]
    fn new_rejects_outside_w() {
        assert!(CovariateWeights::new(vec![2.0, 3.0]).is_err());
        assert!(CovariateWeights::new(vec![0.5, 1.0]).is_err());
        assert!(CovariateWeights::new(vec![1.0, 7.5]).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn project_is_idempotent_and_lands_in_w(raw in prop::collection::vec(-50.0f64..50.0, 1..8)) {
            let once = project(&raw).unwrap();
            let twice = project(once.as_slice()).unwrap();
            prop_assert_eq!(once.as_slice(), twice.as_slice());
            let min = once.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!((min - 1.0).abs() <= WEIGHT_TOL);
            prop_assert!(once.as_slice().iter().all(|v| *v >= 1.0));
        }
    }

    proptest! {
        #[test]
        fn cost_is_a_valid_transport_cost(
            wv in prop::collection::vec(1.0f64..10.0, 3),
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
            bump in 0.1f64..5.0,
            coord in 0usize..3,
        ) {
            let wv = project(&wv).unwrap();
            let ab = cost(&wv, &a, &b, 0.0, 0.0).unwrap();
            let ba = cost(&wv, &b, &a, 0.0, 0.0).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(cost(&wv, &a, &a, 0.0, 0.0).unwrap(), 0.0);

            let ones = CovariateWeights::ones(3);
            let plain: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum();
            prop_assert_eq!(cost(&ones, &a, &b, 1.0, 1.0).unwrap(), plain);

            let mut heavier = wv.clone().into_inner();
            heavier[coord] += bump;
            let heavier = CovariateWeights(heavier);
            prop_assert!(cost(&heavier, &a, &b, 0.0, 0.0).unwrap() >= ab);
        }
    }
}

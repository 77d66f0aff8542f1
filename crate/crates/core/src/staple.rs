//! Consensus of binary raters by expectation-maximization over each rater's
//! sensitivity and specificity.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::mask::Mask;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;
/// Starting sensitivity and specificity of every rater.
pub const INITIAL_PERFORMANCE: f64 = 0.99;
const PROB_FLOOR: f64 = 1e-6;
const PRIOR_FLOOR: f64 = 1e-3;

fn clamp_prob(v: f64) -> f64 {
    v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Fixed-point accumulator whose result does not depend on summation order,
/// so permuting raters or voxels permutes the estimate exactly.
#[derive(Clone, Copy, Default)]
struct ExactSum(i128);

impl ExactSum {
    const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

    fn add(&mut self, v: f64) {
        self.0 += (v * Self::SCALE).round() as i128;
    }

    fn value(self) -> f64 {
        self.0 as f64 / Self::SCALE
    }
}

/// `R` raters' binary decisions over the same `N` voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterStack {
    raters: usize,
    voxels: usize,
    /// Row-major `(raters, voxels)`.
    decisions: Vec<bool>,
    prior: f64,
}

impl RaterStack {
    pub fn new(decisions: Vec<Vec<bool>>, prior: f64) -> Result<Self> {
        ensure!(!decisions.is_empty(), "staple: need at least one rater");
        let voxels = decisions[0].len();
        ensure!(voxels >= 1, "staple: need at least one voxel");
        ensure!(
            decisions.iter().all(|d| d.len() == voxels),
            "staple: raters disagree on voxel count"
        );
        ensure!(prior > 0.0 && prior < 1.0, "staple: prior {prior} outside (0, 1)");
        Ok(Self {
            raters: decisions.len(),
            voxels,
            decisions: decisions.concat(),
            prior,
        })
    }

    /// Prior set to the mean foreground fraction, kept away from 0 and 1.
    pub fn with_data_prior(decisions: Vec<Vec<bool>>) -> Result<Self> {
        let total: usize = decisions.iter().map(Vec::len).sum();
        let fg = decisions.iter().flatten().filter(|&&b| b).count();
        let prior = (fg as f64 / total.max(1) as f64).clamp(PRIOR_FLOOR, 1.0 - PRIOR_FLOOR);
        Self::new(decisions, prior)
    }

    pub fn from_masks(masks: &[Mask]) -> Result<Self> {
        ensure!(!masks.is_empty(), "staple: need at least one mask");
        for m in &masks[1..] {
            masks[0].check_same_shape(m)?;
        }
        Self::with_data_prior(masks.iter().map(|m| m.data().to_vec()).collect())
    }

    pub fn raters(&self) -> usize {
        self.raters
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn decision(&self, rater: usize, voxel: usize) -> bool {
        self.decisions[rater * self.voxels + voxel]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StapleEstimate {
    /// Posterior foreground probability per voxel.
    pub weights: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub specificities: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood at the start of every iteration and at the end.
    pub log_likelihoods: Vec<f64>,
}

impl StapleEstimate {
    pub fn fused(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w >= 0.5).collect()
    }
}

/// Posterior weights and log-likelihood under `(p, q)`.
fn e_step(stack: &RaterStack, p: &[f64], q: &[f64], weights: &mut [f64]) -> f64 {
    let (lp, lp1): (Vec<f64>, Vec<f64>) = p.iter().map(|&v| (v.ln(), (1.0 - v).ln())).unzip();
    let (lq, lq1): (Vec<f64>, Vec<f64>) = q.iter().map(|&v| (v.ln(), (1.0 - v).ln())).unzip();
    let (l_prior, l_prior1) = (stack.prior.ln(), (1.0 - stack.prior).ln());
    let mut ll = ExactSum::default();
    for (i, w) in weights.iter_mut().enumerate() {
        let (mut la, mut lb) = (ExactSum::default(), ExactSum::default());
        la.add(l_prior);
        lb.add(l_prior1);
        for j in 0..stack.raters {
            if stack.decision(j, i) {
                la.add(lp[j]);
                lb.add(lq1[j]);
            } else {
                la.add(lp1[j]);
                lb.add(lq[j]);
            }
        }
        let (la, lb) = (la.value(), lb.value());
        let m = la.max(lb);
        ll.add(m + ((la - m).exp() + (lb - m).exp()).ln());
        *w = clamp_prob(1.0 / (1.0 + (lb - la).exp()));
    }
    ll.value()
}

/// Observed-data log-likelihood `Σ_i ln(a_i + b_i)` of the stack under `(p, q)`.
pub fn log_likelihood(stack: &RaterStack, p: &[f64], q: &[f64]) -> f64 {
    let mut scratch = vec![0.0; stack.voxels];
    e_step(stack, p, q, &mut scratch)
}

/// Runs EM from `p = q = 0.99` until the largest change in any sensitivity or
/// specificity falls below `tol`, or `max_iters` rounds have run. The
/// returned weights are recomputed from the final `(p, q)`.
pub fn staple_fuse(stack: &RaterStack, tol: f64, max_iters: usize) -> Result<StapleEstimate> {
    ensure!(tol >= 0.0, "staple: tolerance must be non-negative");
    ensure!(max_iters >= 1, "staple: max_iters must be positive");
    let r = stack.raters;
    let mut p = vec![INITIAL_PERFORMANCE; r];
    let mut q = vec![INITIAL_PERFORMANCE; r];
    let mut weights = vec![0.0; stack.voxels];
    let mut log_likelihoods = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        log_likelihoods.push(e_step(stack, &p, &q, &mut weights));
        iterations += 1;
        let (mut sum_w, mut sum_bg) = (ExactSum::default(), ExactSum::default());
        for &w in &weights {
            sum_w.add(w);
            sum_bg.add(1.0 - w);
        }
        let (sum_w, sum_bg) = (sum_w.value(), sum_bg.value());
        let mut delta: f64 = 0.0;
        for j in 0..r {
            let (mut tp, mut tn) = (ExactSum::default(), ExactSum::default());
            for (i, &w) in weights.iter().enumerate() {
                if stack.decision(j, i) {
                    tp.add(w);
                } else {
                    tn.add(1.0 - w);
                }
            }
            let (tp, tn) = (tp.value(), tn.value());
            let (pj, qj) = (clamp_prob(tp / sum_w), clamp_prob(tn / sum_bg));
            delta = delta.max((pj - p[j]).abs()).max((qj - q[j]).abs());
            p[j] = pj;
            q[j] = qj;
        }
        if delta < tol {
            converged = true;
            break;
        }
    }
    log_likelihoods.push(e_step(stack, &p, &q, &mut weights));
    Ok(StapleEstimate {
        weights,
        sensitivities: p,
        specificities: q,
        iterations,
        converged,
        log_likelihoods,
    })
}

/// Fuses same-shape masks with the data-derived prior and default settings.
pub fn fuse_masks(masks: &[Mask]) -> Result<(Mask, StapleEstimate)> {
    let stack = RaterStack::from_masks(masks)?;
    let est = staple_fuse(&stack, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    let fused = Mask::new(masks[0].height(), masks[0].width(), est.fused())?;
    Ok((fused, est))
}

/// Per-voxel majority vote; ties go to foreground.
pub fn mean_vote(masks: &[Mask]) -> Result<Mask> {
    ensure!(!masks.is_empty(), "mean_vote: need at least one mask");
    for m in &masks[1..] {
        masks[0].check_same_shape(m)?;
    }
    let n = masks.len();
    let data = (0..masks[0].len())
        .map(|i| 2 * masks.iter().filter(|m| m.data()[i]).count() >= n)
        .collect();
    Mask::new(masks[0].height(), masks[0].width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(rows: &[&[u8]]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| r.iter().map(|&b| b == 1).collect()).collect()
    }

    /// Frozen output of an independent linear-domain EM written in NumPy with
    /// the same initialization, clamping and stopping rule.
    #[test]
    fn three_rater_reference_fixture() {
        let stack = RaterStack::new(bits(&[&[1, 1, 0, 0], &[1, 0, 0, 0], &[1, 1, 1, 0]]), 0.5).unwrap();
        let est = staple_fuse(&stack, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(est.fused(), vec![true, true, false, false]);
        let p = [0.9999983897076046, 0.4999995000000001, 0.999999];
        let q = [0.9999983897076045, 0.999999, 0.4999995];
        for j in 0..3 {
            assert!((est.sensitivities[j] - p[j]).abs() < 1e-6);
            assert!((est.specificities[j] - q[j]).abs() < 1e-6);
        }
        assert!(est.converged);
        assert_eq!(est.iterations, 14);
    }

    #[test]
    fn unanimous_raters() {
        let row: &[u8] = &[0, 1, 1, 0, 1, 0];
        let stack = RaterStack::with_data_prior(bits(&[row, row, row, row])).unwrap();
        let est = staple_fuse(&stack, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(est.fused(), bits(&[row])[0]);
        assert!(est.converged && est.iterations <= 2);
    }

    #[test]
    fn single_rater_is_returned_unchanged() {
        let row = bits(&[&[1, 0, 1, 1, 0, 0, 0, 1]]);
        for prior in [0.3, 0.4, 0.5, 0.6, 0.7] {
            let stack = RaterStack::new(row.clone(), prior).unwrap();
            let est = staple_fuse(&stack, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            assert_eq!(est.fused(), row[0], "prior {prior}");
        }
    }

    /// One rater only pins the marginal foreground rate, so EM settles where
    /// that rate matches the data. A prior far from the rater's own fraction
    /// then pulls every voxel to one class.
    #[test]
    fn single_rater_with_distant_prior_collapses() {
        let row = bits(&[&[1, 0, 1, 1, 0, 0, 0, 1]]);
        let low = staple_fuse(&RaterStack::new(row.clone(), 0.05).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(low.fused().iter().all(|&b| !b));
        let high = staple_fuse(&RaterStack::new(row, 0.95).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(high.fused().iter().all(|&b| b));
    }

    #[test]
    fn empty_and_full_masks_do_not_break() {
        for v in [false, true] {
            let stack = RaterStack::with_data_prior(vec![vec![v; 5]; 3]).unwrap();
            let est = staple_fuse(&stack, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            assert_eq!(est.fused(), vec![v; 5]);
            assert!(est.weights.iter().all(|w| w.is_finite()));
        }
    }

    #[test]
    fn rejects_malformed_stacks() {
        assert!(RaterStack::new(vec![], 0.5).is_err());
        assert!(RaterStack::new(vec![vec![]], 0.5).is_err());
        assert!(RaterStack::new(vec![vec![true], vec![true, false]], 0.5).is_err());
        assert!(RaterStack::new(vec![vec![true]], 1.0).is_err());
    }

    #[test]
    fn majority_vote() {
        let m = |v: &[u8]| Mask::new(1, v.len(), v.iter().map(|&b| b == 1).collect()).unwrap();
        let fused = mean_vote(&[m(&[1, 0, 1]), m(&[1, 0, 0]), m(&[0, 0, 1])]).unwrap();
        assert_eq!(fused, m(&[1, 0, 1]));
    }

    fn stack_strategy() -> impl Strategy<Value = (Vec<Vec<bool>>, f64)> {
        (1usize..6, 1usize..12).prop_flat_map(|(r, n)| {
            (proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), r), 0.05f64..0.95)
        })
    }

    proptest! {
        #[test]
        fn single_rater_reduction_with_data_prior(row in proptest::collection::vec(any::<bool>(), 1..300)) {
            let stack = RaterStack::with_data_prior(vec![row.clone()]).unwrap();
            let est = staple_fuse(&stack, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            prop_assert_eq!(est.fused(), row);
        }

        #[test]
        fn log_likelihood_never_decreases((d, prior) in stack_strategy()) {
            let stack = RaterStack::new(d, prior).unwrap();
            let est = staple_fuse(&stack, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            for pair in est.log_likelihoods.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-9, "{:?}", est.log_likelihoods);
            }
        }

        #[test]
        fn probabilities_stay_in_bounds((d, prior) in stack_strategy()) {
            let stack = RaterStack::new(d, prior).unwrap();
            for iters in 1..6 {
                let est = staple_fuse(&stack, DEFAULT_TOL, iters).unwrap();
                prop_assert!(est.iterations <= iters);
                for v in est.weights.iter().chain(&est.sensitivities).chain(&est.specificities) {
                    prop_assert!((PROB_FLOOR..=1.0 - PROB_FLOOR).contains(v));
                }
            }
        }

        #[test]
        fn rater_permutation_invariance((d, prior) in stack_strategy(), rot in 0usize..6) {
            let r = d.len();
            let k = rot % r;
            let mut rotated = d.clone();
            rotated.rotate_left(k);
            let a = staple_fuse(&RaterStack::new(d, prior).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            let b = staple_fuse(&RaterStack::new(rotated, prior).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                prop_assert_eq!(wa, wb);
            }
            for j in 0..r {
                prop_assert!((a.sensitivities[(j + k) % r] - b.sensitivities[j]).abs() < 1e-10);
                prop_assert!((a.specificities[(j + k) % r] - b.specificities[j]).abs() < 1e-10);
            }
        }

        #[test]
        fn voxel_permutation_equivariance((d, prior) in stack_strategy(), rot in 0usize..12) {
            let n = d[0].len();
            let k = rot % n;
            let rotated: Vec<Vec<bool>> = d.iter().map(|row| {
                let mut row = row.clone();
                row.rotate_left(k);
                row
            }).collect();
            let a = staple_fuse(&RaterStack::new(d, prior).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            let b = staple_fuse(&RaterStack::new(rotated, prior).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            for i in 0..n {
                prop_assert!((a.weights[(i + k) % n] - b.weights[i]).abs() < 1e-10);
            }
        }
    }
}

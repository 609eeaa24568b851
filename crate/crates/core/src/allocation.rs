//! Per-stage, per-arm sample sizes from the stage ratio `r` and the total
//! sample size.
//!
//! For rules with a fixed stage-2 arm count the sizes follow in closed
//! form. For the variable rules (epsilon, threshold) the expected stage-2
//! arm count depends on the interim outcome, so a calibration step
//! simulates stage 1 over a candidate set of stage-1 sizes and picks the
//! candidate whose expected total sample size lands closest to the target.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trial_sim::{apply_selection, draw_stage_statistics, EffectSet, SelectionRule, SimConstants};

/// Resolved per-arm stage sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub n_stage1: usize,
    pub n_stage2: usize,
    /// Expected stage-2 arm count including the control; exact for
    /// fixed-count rules.
    pub k2_hat: f64,
    /// `k1 * n_stage1 + k2_hat * n_stage2`.
    pub achieved_total: f64,
    /// Set when calibration degenerated (rule selected no arm in any
    /// replication, so `k2_hat` fell to 1).
    pub flagged: bool,
    /// Calibration scan, empty for fixed-count allocations.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub scan: Vec<CalibrationCandidate>,
}

/// One scanned stage-1 size candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCandidate {
    pub n_stage1: usize,
    pub k2_hat: f64,
    /// Squared distance of the expected total from the target.
    pub h: f64,
}

/// Knobs of the calibration scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    /// Equally spaced candidates over the admissible stage-1 interval.
    pub candidates: usize,
    /// Stage-1 replications per coarse candidate.
    pub coarse_reps: usize,
    /// Stage-1 replications per candidate in the integer refinement
    /// window around the coarse minimum.
    pub refine_reps: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            candidates: 40,
            coarse_reps: 300,
            refine_reps: 1000,
        }
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Closed-form stage sizes when the stage-2 arm count `k2` is known.
///
/// `n_stage1 = round(n_total * r / (k1*r + k2*(1-r)))` and analogously for
/// stage 2; a stage rounding to zero patients is infeasible.
pub fn stage_sizes_fixed(r: f64, k1: usize, k2: usize, n_total: usize) -> Result<AllocationResult> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidInput(format!(
            "stage ratio must lie in (0, 1), got {r}"
        )));
    }
    if k1 == 0 || k2 == 0 || n_total == 0 {
        return Err(Error::InvalidInput(
            "k1, k2 and n_total must be at least 1".into(),
        ));
    }
    let denom = k1 as f64 * r + k2 as f64 * (1.0 - r);
    let n1 = round_half_up(n_total as f64 * r / denom);
    let n2 = round_half_up(n_total as f64 * (1.0 - r) / denom);
    if n1 < 1 || n2 < 1 {
        return Err(Error::InfeasibleDesign(format!(
            "r = {r}, k1 = {k1}, k2 = {k2}, n_total = {n_total} leaves a stage without patients"
        )));
    }
    let (n1, n2) = (n1 as usize, n2 as usize);
    Ok(AllocationResult {
        n_stage1: n1,
        n_stage2: n2,
        k2_hat: k2 as f64,
        achieved_total: (k1 * n1 + k2 * n2) as f64,
        flagged: false,
        scan: Vec::new(),
    })
}

/// Admissible stage-1 size interval scanned by the calibration.
pub fn candidate_interval(n_total: usize, k1: usize) -> (usize, usize) {
    let lo = (0.01 * n_total as f64 / k1 as f64).ceil().max(1.0) as usize;
    let hi = (n_total as f64 / k1 as f64).ceil() as usize;
    (lo, hi.max(lo))
}

/// Calibrates the stage-1 size for a variable selection rule.
///
/// Scans equally spaced candidates over the admissible interval, estimates
/// the expected stage-2 arm count `k2_hat = 1 + mean(|S|)` per candidate
/// by simulating stage 1, then refines every integer around the coarse
/// minimum with more replications. Returns the candidate minimizing
/// `h(n1) = (k1*n1 + k2_hat*(1-r)/r*n1 - n_total)^2`.
pub fn calibrate_variable_rule<R: Rng + ?Sized>(
    rule: &SelectionRule,
    effects: &EffectSet,
    r: f64,
    n_total: usize,
    k1: usize,
    consts: &SimConstants,
    opts: &CalibrationOptions,
    rng: &mut R,
) -> Result<AllocationResult> {
    if matches!(rule, SelectionRule::KappaBest(_)) {
        return Err(Error::InvalidInput(
            "calibration applies only to epsilon and threshold rules".into(),
        ));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidInput(format!(
            "stage ratio must lie in (0, 1), got {r}"
        )));
    }
    rule.validate(effects.arm_count())?;
    if opts.candidates < 2 {
        return Err(Error::InvalidInput("need at least 2 candidates".into()));
    }

    let (lo, hi) = candidate_interval(n_total, k1);
    let n2_factor = (1.0 - r) / r;

    let mut coarse: Vec<usize> = (0..opts.candidates)
        .map(|i| {
            let t = i as f64 / (opts.candidates - 1) as f64;
            round_half_up(lo as f64 + t * (hi - lo) as f64).max(1) as usize
        })
        .collect();
    coarse.dedup();

    let k2_for = |n1: usize, reps: usize, rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut total = 0usize;
        for _ in 0..reps {
            let draw = draw_stage_statistics(effects, n1, consts.corr, rng)?;
            total += apply_selection(rule, &draw.z_early).len();
        }
        Ok(1.0 + total as f64 / reps as f64)
    };
    let h_of = |n1: usize, k2_hat: f64| -> f64 {
        let expected = k1 as f64 * n1 as f64 + k2_hat * n2_factor * n1 as f64;
        (expected - n_total as f64).powi(2)
    };

    // Per-candidate substreams drawn up front so the scan order cannot
    // change the result.
    let coarse_seeds: Vec<u64> = coarse.iter().map(|_| rng.gen()).collect();
    let mut scan: Vec<CalibrationCandidate> = Vec::new();
    for (&n1, &seed) in coarse.iter().zip(&coarse_seeds) {
        let mut sub = ChaCha8Rng::seed_from_u64(seed);
        let k2_hat = k2_for(n1, opts.coarse_reps, &mut sub)?;
        scan.push(CalibrationCandidate {
            n_stage1: n1,
            k2_hat,
            h: h_of(n1, k2_hat),
        });
    }

    let coarse_best = scan
        .iter()
        .min_by(|a, b| a.h.partial_cmp(&b.h).unwrap())
        .unwrap()
        .n_stage1;
    let step = (((hi - lo) as f64 / (opts.candidates - 1) as f64).ceil() as usize).max(1);
    let win_lo = coarse_best.saturating_sub(step).max(lo.min(coarse_best));
    let win_hi = (coarse_best + step).min(hi);

    let refine: Vec<usize> = (win_lo..=win_hi).collect();
    let refine_seeds: Vec<u64> = refine.iter().map(|_| rng.gen()).collect();
    for (&n1, &seed) in refine.iter().zip(&refine_seeds) {
        let mut sub = ChaCha8Rng::seed_from_u64(seed);
        let k2_hat = k2_for(n1, opts.refine_reps, &mut sub)?;
        let refined = CalibrationCandidate {
            n_stage1: n1,
            k2_hat,
            h: h_of(n1, k2_hat),
        };
        // A refined estimate supersedes the coarse one at the same size.
        match scan.iter_mut().find(|c| c.n_stage1 == n1) {
            Some(slot) => *slot = refined,
            None => scan.push(refined),
        }
    }
    scan.sort_by_key(|c| c.n_stage1);

    let best = scan
        .iter()
        .min_by(|a, b| a.h.partial_cmp(&b.h).unwrap().then(a.n_stage1.cmp(&b.n_stage1)))
        .unwrap()
        .clone();
    let n_stage2 = round_half_up(n2_factor * best.n_stage1 as f64).max(1) as usize;
    Ok(AllocationResult {
        n_stage1: best.n_stage1,
        n_stage2,
        k2_hat: best.k2_hat,
        achieved_total: k1 as f64 * best.n_stage1 as f64 + best.k2_hat * n_stage2 as f64,
        flagged: best.k2_hat <= 1.0 + 1e-12,
        scan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng_for, Domain};
    use crate::trial_sim::IntersectionTest;
    use proptest::prelude::*;

    fn consts() -> SimConstants {
        SimConstants {
            corr: 0.4,
            level: 0.025,
            ptest: vec![3, 4],
            nsim: 100,
            intersection: IntersectionTest::Simes,
        }
    }

    fn null_effects() -> EffectSet {
        EffectSet::new("null", &[0.0; 5], &[0.0; 5]).unwrap()
    }

    #[test]
    fn copd_arithmetic() {
        // 5 * 100 + 3 * 300 = 1400.
        let a = stage_sizes_fixed(0.25, 5, 3, 1400).unwrap();
        assert_eq!((a.n_stage1, a.n_stage2), (100, 300));
        assert_eq!(a.achieved_total, 1400.0);
    }

    #[test]
    fn rejects_bad_ratio() {
        assert!(matches!(
            stage_sizes_fixed(0.0, 5, 3, 1400),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            stage_sizes_fixed(1.0, 5, 3, 1400),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn starved_stage_is_infeasible() {
        assert!(matches!(
            stage_sizes_fixed(0.999, 5, 2, 200),
            Err(Error::InfeasibleDesign(_))
        ));
    }

    proptest! {
        #[test]
        fn equal_arm_counts_collapse(
            r in 0.05f64..0.95,
            k in 1usize..8,
            n_total in 200usize..4000,
        ) {
            let a = stage_sizes_fixed(r, k, k, n_total).unwrap();
            let expect1 = (n_total as f64 * r / k as f64 + 0.5).floor();
            let expect2 = (n_total as f64 * (1.0 - r) / k as f64 + 0.5).floor();
            prop_assert_eq!(a.n_stage1 as f64, expect1);
            prop_assert_eq!(a.n_stage2 as f64, expect2);
        }

        #[test]
        fn totals_hold_within_rounding_slack(
            r in 0.02f64..0.98,
            k1 in 2usize..7,
            k2 in 1usize..7,
            n_total in 300usize..5000,
        ) {
            let denom = k1 as f64 * r + k2 as f64 * (1.0 - r);
            prop_assume!(n_total as f64 * r / denom >= 0.5);
            prop_assume!(n_total as f64 * (1.0 - r) / denom >= 0.5);
            let a = stage_sizes_fixed(r, k1, k2, n_total).unwrap();
            let total = (k1 * a.n_stage1 + k2 * a.n_stage2) as f64;
            let slack = (k1 + k2) as f64 / 2.0;
            prop_assert!((total - n_total as f64).abs() <= slack,
                "total {} vs {}", total, n_total);
        }
    }

    #[test]
    fn wide_epsilon_degenerates_to_select_all() {
        // Range of the early statistics cannot span 20, so all arms pass.
        let effects = null_effects();
        let mut rng = rng_for(1, Domain::Calibrate, 0);
        let a = calibrate_variable_rule(
            &SelectionRule::Epsilon(20.0),
            &effects,
            0.3,
            1400,
            5,
            &consts(),
            &CalibrationOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.k2_hat, 5.0);
        assert!(!a.flagged);
        let fixed = stage_sizes_fixed(0.3, 5, 5, 1400).unwrap();
        assert!((a.n_stage1 as i64 - fixed.n_stage1 as i64).abs() <= 1);
    }

    #[test]
    fn unreachable_threshold_flags_and_targets_single_arm_total() {
        let effects = null_effects();
        let mut rng = rng_for(2, Domain::Calibrate, 0);
        let a = calibrate_variable_rule(
            &SelectionRule::Threshold(25.0),
            &effects,
            0.5,
            1000,
            5,
            &consts(),
            &CalibrationOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.k2_hat, 1.0);
        assert!(a.flagged);
        // With k2_hat = 1 the target is 5*n1 + n2 = n_total at n2 = n1.
        let total = 5.0 * a.n_stage1 as f64 + a.n_stage2 as f64;
        assert!((total - 1000.0).abs() <= 6.0, "total {total}");
    }

    #[test]
    fn epsilon_zero_matches_two_arm_fixed_sizes() {
        // eps = 0 keeps exactly the best arm, so k2 = 2 with no noise.
        let effects = EffectSet::new(
            "spread",
            &[0.0, 0.2, 0.4, 0.6, 0.8],
            &[0.0, 0.05, 0.1, 0.15, 0.2],
        )
        .unwrap();
        let mut rng = rng_for(3, Domain::Calibrate, 0);
        let a = calibrate_variable_rule(
            &SelectionRule::Epsilon(0.0),
            &effects,
            0.4,
            1000,
            5,
            &consts(),
            &CalibrationOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.k2_hat, 2.0);
        let fixed = stage_sizes_fixed(0.4, 5, 2, 1000).unwrap();
        assert!((a.n_stage1 as i64 - fixed.n_stage1 as i64).abs() <= 1);
        assert!((a.n_stage2 as i64 - fixed.n_stage2 as i64).abs() <= 2);
    }

    #[test]
    fn returned_candidate_minimizes_h_over_scan() {
        let effects = null_effects();
        let mut rng = rng_for(4, Domain::Calibrate, 0);
        let a = calibrate_variable_rule(
            &SelectionRule::Epsilon(1.0),
            &effects,
            0.35,
            1200,
            5,
            &consts(),
            &CalibrationOptions::default(),
            &mut rng,
        )
        .unwrap();
        let returned_h = a
            .scan
            .iter()
            .find(|c| c.n_stage1 == a.n_stage1)
            .unwrap()
            .h;
        for c in &a.scan {
            assert!(returned_h <= c.h, "candidate {} beats returned", c.n_stage1);
        }
    }

    #[test]
    fn calibration_is_deterministic() {
        let effects = null_effects();
        let run = || {
            let mut rng = rng_for(7, Domain::Calibrate, 3);
            calibrate_variable_rule(
                &SelectionRule::Threshold(1.0),
                &effects,
                0.5,
                1000,
                5,
                &consts(),
                &CalibrationOptions::default(),
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn expected_total_lands_near_target() {
        let effects = null_effects();
        let c = consts();
        let mut rng = rng_for(8, Domain::Calibrate, 0);
        let a = calibrate_variable_rule(
            &SelectionRule::Epsilon(1.0),
            &effects,
            0.4,
            1000,
            5,
            &c,
            &CalibrationOptions::default(),
            &mut rng,
        )
        .unwrap();
        // Post-hoc check with an independent stage-1 stream.
        let mut check = rng_for(9, Domain::Calibrate, 99);
        let mut total = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let d = draw_stage_statistics(&effects, a.n_stage1, c.corr, &mut check).unwrap();
            total += apply_selection(&SelectionRule::Epsilon(1.0), &d.z_early).len();
        }
        let k2 = 1.0 + total as f64 / draws as f64;
        let expected = 5.0 * a.n_stage1 as f64 + k2 * a.n_stage2 as f64;
        assert!(
            (expected - 1000.0).abs() <= 0.02 * 1000.0,
            "expected total {expected}"
        );
    }
}

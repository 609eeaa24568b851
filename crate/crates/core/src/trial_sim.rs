//! Monte Carlo simulation of a two-stage adaptive seamless design with
//! interim treatment selection and closed testing.
//!
//! Stage 1 compares `K` experimental arms against a shared control on an
//! early and a final outcome. An interim selection rule keeps a subset of
//! arms for stage 2. The final analysis combines stagewise p-values with
//! the inverse normal combination function and applies the closed test
//! principle, so the family-wise error rate is controlled in the strong
//! sense. The simulator reports the probability of rejecting at least one
//! hypothesis from a designated treatment subset.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{clamp_p, norm_cdf, norm_quantile};

/// Standardized effect sizes per arm and stage; index 0 is the control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSet {
    pub name: String,
    #[serde(rename = "early")]
    pub early_effects: Vec<f64>,
    #[serde(rename = "final")]
    pub final_effects: Vec<f64>,
}

impl EffectSet {
    pub fn new(name: &str, early: &[f64], fin: &[f64]) -> Result<Self> {
        let set = Self {
            name: name.to_string(),
            early_effects: early.to_vec(),
            final_effects: fin.to_vec(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Number of experimental arms `K` (excludes the control).
    pub fn arm_count(&self) -> usize {
        self.early_effects.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.early_effects.len() != self.final_effects.len() {
            return Err(Error::InvalidInput(format!(
                "effect set '{}': early and final lengths differ",
                self.name
            )));
        }
        if self.early_effects.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "effect set '{}': need a control and at least one arm",
                self.name
            )));
        }
        if self.early_effects[0] != 0.0 || self.final_effects[0] != 0.0 {
            return Err(Error::InvalidInput(format!(
                "effect set '{}': control effects must be zero",
                self.name
            )));
        }
        if !self
            .early_effects
            .iter()
            .chain(self.final_effects.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "effect set '{}': effects must be finite",
                self.name
            )));
        }
        Ok(())
    }
}

/// Test used for the intersection hypotheses of the closed test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntersectionTest {
    /// Simes combination of the one-sided marginal p-values.
    #[default]
    Simes,
    /// Many-to-one max-statistic test under the shared-control correlation.
    Dunnett,
}

/// Simulator constants that stay fixed across a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConstants {
    /// Correlation between early and final outcome within an arm.
    pub corr: f64,
    /// One-sided significance level.
    pub level: f64,
    /// 1-based treatment indices whose rejections count towards the power.
    pub ptest: Vec<usize>,
    /// Monte Carlo iterations per power evaluation.
    pub nsim: usize,
    #[serde(default)]
    pub intersection: IntersectionTest,
}

impl SimConstants {
    pub fn validate(&self, arm_count: usize) -> Result<()> {
        if self.corr.abs() > 1.0 {
            return Err(Error::InvalidInput(format!(
                "corr must lie in [-1, 1], got {}",
                self.corr
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidInput(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if self.nsim == 0 {
            return Err(Error::InvalidInput("nsim must be at least 1".into()));
        }
        if self.ptest.is_empty() {
            return Err(Error::InvalidInput("ptest must be non-empty".into()));
        }
        if self.ptest.iter().any(|&k| k == 0 || k > arm_count) {
            return Err(Error::InvalidInput(format!(
                "ptest indices must lie in 1..={arm_count}"
            )));
        }
        Ok(())
    }
}

/// Interim rule deciding which arms continue into stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SelectionRule {
    /// Keep the `kappa` arms with the largest early statistics.
    KappaBest(usize),
    /// Keep all arms within `eps` of the largest early statistic.
    Epsilon(f64),
    /// Keep all arms with early statistic at least `tau`; may keep none.
    Threshold(f64),
}

impl SelectionRule {
    pub fn validate(&self, arm_count: usize) -> Result<()> {
        match *self {
            SelectionRule::KappaBest(k) if k == 0 || k > arm_count => Err(Error::InvalidInput(
                format!("kappa must lie in 1..={arm_count}, got {k}"),
            )),
            SelectionRule::Epsilon(e) if !(e >= 0.0) => Err(Error::InvalidInput(format!(
                "epsilon must be >= 0, got {e}"
            ))),
            SelectionRule::Threshold(t) if !t.is_finite() => {
                Err(Error::InvalidInput(format!("tau must be finite, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

/// Stage-1 test statistics and the interim selection made from them.
#[derive(Debug, Clone)]
pub struct StageOneDraw {
    /// Early-outcome statistics for arms `1..=K`.
    pub z_early: Vec<f64>,
    /// Final-outcome statistics for arms `1..=K` (stage-1 patients only).
    pub z_final: Vec<f64>,
    /// 1-based arms selected for stage 2; empty until a rule is applied.
    pub selected: Vec<usize>,
}

/// Estimated power with its binomial Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub value: f64,
    pub nsim: usize,
    pub mc_se: f64,
}

impl PowerEstimate {
    pub fn from_successes(successes: usize, nsim: usize) -> Self {
        let value = successes as f64 / nsim as f64;
        PowerEstimate {
            value,
            nsim,
            mc_se: (value * (1.0 - value) / nsim as f64).sqrt(),
        }
    }
}

/// A design resolved down to per-arm stage sizes and a selection rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedDesign {
    pub n_stage1: usize,
    pub n_stage2: usize,
    pub rule: SelectionRule,
}

/// Draws one set of stage-1 statistics for all `K` arms.
///
/// Marginals are `z_early[k] ~ N(delta_early[k] * sqrt(n_arm/2), 1)` and
/// `z_final[k] ~ N(delta_final[k] * sqrt(n_arm/2), 1)`. The shared control
/// induces correlation 1/2 between arms within an outcome; within an arm
/// the early and final statistics correlate with `corr`, across arms and
/// outcomes with `corr/2`. The draw is built constructively from per-arm
/// scores, so no covariance factorization is needed.
pub fn draw_stage_statistics<R: Rng + ?Sized>(
    effects: &EffectSet,
    n_arm: usize,
    corr: f64,
    rng: &mut R,
) -> Result<StageOneDraw> {
    if n_arm == 0 {
        return Err(Error::InvalidInput("n_arm must be at least 1".into()));
    }
    if corr.abs() > 1.0 {
        return Err(Error::InvalidInput(format!(
            "corr must lie in [-1, 1], got {corr}"
        )));
    }
    effects.validate()?;

    let k = effects.arm_count();
    let scale = (n_arm as f64 / 2.0).sqrt();
    let coupling = (1.0 - corr * corr).sqrt();

    // Per-arm early scores, control at index 0.
    let mut early_scores = Vec::with_capacity(k + 1);
    for _ in 0..=k {
        early_scores.push(rng.sample::<f64, _>(StandardNormal));
    }
    // Per-arm final scores correlated with the early ones.
    let mut final_scores = Vec::with_capacity(k + 1);
    for e in &early_scores {
        let w: f64 = rng.sample(StandardNormal);
        final_scores.push(corr * e + coupling * w);
    }

    let sqrt_half = std::f64::consts::FRAC_1_SQRT_2;
    let z_early = (1..=k)
        .map(|a| effects.early_effects[a] * scale + (early_scores[a] - early_scores[0]) * sqrt_half)
        .collect();
    let z_final = (1..=k)
        .map(|a| effects.final_effects[a] * scale + (final_scores[a] - final_scores[0]) * sqrt_half)
        .collect();

    Ok(StageOneDraw {
        z_early,
        z_final,
        selected: Vec::new(),
    })
}

/// Stage-2 final statistics for the selected arms, with a fresh control.
pub(crate) fn draw_stage2_statistics<R: Rng + ?Sized>(
    effects: &EffectSet,
    selected: &[usize],
    n_arm: usize,
    rng: &mut R,
) -> Vec<f64> {
    let scale = (n_arm as f64 / 2.0).sqrt();
    let sqrt_half = std::f64::consts::FRAC_1_SQRT_2;
    let control: f64 = rng.sample(StandardNormal);
    selected
        .iter()
        .map(|&a| {
            let score: f64 = rng.sample(StandardNormal);
            effects.final_effects[a] * scale + (score - control) * sqrt_half
        })
        .collect()
}

/// Applies a selection rule to the early statistics; returns sorted
/// 1-based arm indices.
///
/// Exact ties under `KappaBest` break towards the lower arm index.
pub fn apply_selection(rule: &SelectionRule, z_early: &[f64]) -> Vec<usize> {
    let k = z_early.len();
    match *rule {
        SelectionRule::KappaBest(kappa) => {
            let kappa = kappa.min(k);
            let mut order: Vec<usize> = (0..k).collect();
            // Stable sort by descending statistic keeps lower indices first
            // among exact ties.
            order.sort_by(|&a, &b| z_early[b].partial_cmp(&z_early[a]).unwrap());
            let mut sel: Vec<usize> = order[..kappa].iter().map(|&i| i + 1).collect();
            sel.sort_unstable();
            sel
        }
        SelectionRule::Epsilon(eps) => {
            let max = z_early.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (0..k)
                .filter(|&i| z_early[i] >= max - eps)
                .map(|i| i + 1)
                .collect()
        }
        SelectionRule::Threshold(tau) => (0..k)
            .filter(|&i| z_early[i] >= tau)
            .map(|i| i + 1)
            .collect(),
    }
}

/// Closed-test outcome with the per-intersection decisions kept for
/// inspection.
#[derive(Debug, Clone)]
pub struct ClosedTestDetail {
    /// Rejection decision for every non-empty `J`, indexed by bitmask
    /// (bit `k-1` set means arm `k` is in `J`).
    pub rejected_subsets: Vec<bool>,
    /// Elementary hypotheses rejected, sorted 1-based arms.
    pub rejected: Vec<usize>,
}

/// Runs the closed test over all intersection hypotheses.
///
/// `z1_final` are the stage-1 final statistics of all `K` arms;
/// `z2_final[i]` belongs to `selected[i]`. Stagewise p-values are combined
/// with `w1 * qnorm(1 - p1) + w2 * qnorm(1 - p2)` and compared against
/// `qnorm(1 - level)`. An intersection with no selected member gets a
/// stage-2 p-value of 1. Only selected arms can be rejected.
pub fn closed_test(
    z1_final: &[f64],
    z2_final: &[f64],
    selected: &[usize],
    w1: f64,
    w2: f64,
    level: f64,
    method: IntersectionTest,
) -> Result<Vec<usize>> {
    Ok(closed_test_detail(z1_final, z2_final, selected, w1, w2, level, method)?.rejected)
}

pub fn closed_test_detail(
    z1_final: &[f64],
    z2_final: &[f64],
    selected: &[usize],
    w1: f64,
    w2: f64,
    level: f64,
    method: IntersectionTest,
) -> Result<ClosedTestDetail> {
    let k = z1_final.len();
    if k == 0 || k > 16 {
        return Err(Error::InvalidInput(format!(
            "arm count must lie in 1..=16, got {k}"
        )));
    }
    if (w1 * w1 + w2 * w2 - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "weights must satisfy w1^2 + w2^2 = 1, got {w1}, {w2}"
        )));
    }
    if z2_final.len() != selected.len() {
        return Err(Error::InvalidInput(
            "z2_final must align with the selected arms".into(),
        ));
    }
    if selected.iter().any(|&a| a == 0 || a > k) {
        return Err(Error::InvalidInput("selected arm out of range".into()));
    }

    let critical = norm_quantile(1.0 - level);
    let n_masks = (1usize << k) - 1;
    let mut rejected_subsets = vec![false; n_masks + 1];

    let mut stage1 = Vec::with_capacity(k);
    let mut stage2 = Vec::with_capacity(selected.len());
    for mask in 1..=n_masks {
        stage1.clear();
        stage2.clear();
        for arm in 1..=k {
            if mask & (1 << (arm - 1)) != 0 {
                stage1.push(z1_final[arm - 1]);
            }
        }
        for (i, &arm) in selected.iter().enumerate() {
            if mask & (1 << (arm - 1)) != 0 {
                stage2.push(z2_final[i]);
            }
        }
        let p1 = intersection_p(&stage1, method);
        let p2 = if stage2.is_empty() {
            1.0
        } else {
            intersection_p(&stage2, method)
        };
        let combined =
            w1 * norm_quantile(1.0 - clamp_p(p1)) + w2 * norm_quantile(1.0 - clamp_p(p2));
        rejected_subsets[mask] = combined >= critical;
    }

    let mut rejected = Vec::new();
    for &arm in selected {
        let bit = 1usize << (arm - 1);
        let all_rejected = (1..=n_masks)
            .filter(|mask| mask & bit != 0)
            .all(|mask| rejected_subsets[mask]);
        if all_rejected {
            rejected.push(arm);
        }
    }
    rejected.sort_unstable();

    Ok(ClosedTestDetail {
        rejected_subsets,
        rejected,
    })
}

/// One-sided p-value of the intersection hypothesis over `z`.
fn intersection_p(z: &[f64], method: IntersectionTest) -> f64 {
    match method {
        IntersectionTest::Simes => {
            let mut p: Vec<f64> = z.iter().map(|&v| 1.0 - norm_cdf(v)).collect();
            p.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = p.len() as f64;
            p.iter()
                .enumerate()
                .map(|(i, &pi)| m * pi / (i + 1) as f64)
                .fold(f64::INFINITY, f64::min)
                .min(1.0)
        }
        IntersectionTest::Dunnett => {
            let t = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            1.0 - equicorrelated_max_cdf(t, z.len())
        }
    }
}

/// `P(max_k Z_k <= t)` for `m` standard normals with shared-control
/// correlation 1/2, by Gauss-Hermite quadrature over the control score.
fn equicorrelated_max_cdf(t: f64, m: usize) -> f64 {
    let sqrt2 = std::f64::consts::SQRT_2;
    gauss_hermite()
        .iter()
        .map(|&(x, w)| {
            // e0 = sqrt(2) * x under the probabilists' change of variable.
            let e0 = sqrt2 * x;
            w * norm_cdf(sqrt2 * t + e0).powi(m as i32)
        })
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Nodes and normalized weights of 48-point Gauss-Hermite quadrature,
/// computed once via Golub-Welsch.
fn gauss_hermite() -> &'static [(f64, f64)] {
    use std::sync::LazyLock;
    static NODES: LazyLock<Vec<(f64, f64)>> = LazyLock::new(|| {
        let n = 48;
        let mut jacobi = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            jacobi[(i - 1, i)] = b;
            jacobi[(i, i - 1)] = b;
        }
        let eig = nalgebra::SymmetricEigen::new(jacobi);
        let mut nodes: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        nodes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        nodes
    });
    &NODES
}

/// Estimates the power of a fully resolved design.
///
/// Power is the proportion of iterations rejecting at least one hypothesis
/// from `consts.ptest`. The estimate is a pure function of the design,
/// effects, constants, and the RNG stream, so identical seeds reproduce it
/// bit-exactly.
pub fn estimate_power<R: Rng + ?Sized>(
    design: &ResolvedDesign,
    effects: &EffectSet,
    consts: &SimConstants,
    rng: &mut R,
) -> Result<PowerEstimate> {
    if design.n_stage1 == 0 || design.n_stage2 == 0 {
        return Err(Error::InvalidInput(
            "stage sizes must be at least 1".into(),
        ));
    }
    let k = effects.arm_count();
    consts.validate(k)?;
    design.rule.validate(k)?;

    let n1 = design.n_stage1 as f64;
    let n2 = design.n_stage2 as f64;
    let w1 = (n1 / (n1 + n2)).sqrt();
    let w2 = (n2 / (n1 + n2)).sqrt();

    let mut successes = 0usize;
    for _ in 0..consts.nsim {
        let draw = draw_stage_statistics(effects, design.n_stage1, consts.corr, rng)?;
        let selected = apply_selection(&design.rule, &draw.z_early);
        if selected.is_empty() {
            // Trial stopped at interim; counts as no rejection.
            continue;
        }
        let z2 = draw_stage2_statistics(effects, &selected, design.n_stage2, rng);
        let rejected = closed_test(
            &draw.z_final,
            &z2,
            &selected,
            w1,
            w2,
            consts.level,
            consts.intersection,
        )?;
        if rejected.iter().any(|a| consts.ptest.contains(a)) {
            successes += 1;
        }
    }
    Ok(PowerEstimate::from_successes(successes, consts.nsim))
}

//! Search strategies over the design space: the Bayesian-optimization
//! loop, exhaustive grid search with unbiased cross-replicate selection,
//! grid snapping, and independent validation.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionContext;
use crate::allocation::{
    calibrate_variable_rule, stage_sizes_fixed, AllocationResult, CalibrationOptions,
};
use crate::design_space::{encode, make_grid, sample_one, sample_uniform, DesignPoint};
use crate::error::{Error, Result};
use crate::seed::{derive, rng_for, Domain};
use crate::surrogate::{fit, FitOptions, GpModel, GpSummary};
use crate::trial_sim::{estimate_power, EffectSet, PowerEstimate, ResolvedDesign, SimConstants};

/// Optimization strategies compared by the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BO")]
    Bo,
    #[serde(rename = "BOGrid")]
    BoGrid,
    Grid,
    GridSmall,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Bo => "BO",
            Method::BoGrid => "BOGrid",
            Method::Grid => "Grid",
            Method::GridSmall => "GridSmall",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "BO" | "bo" => Some(Method::Bo),
            "BOGrid" | "bogrid" => Some(Method::BoGrid),
            "Grid" | "grid" => Some(Method::Grid),
            "GridSmall" | "gridsmall" | "grid-small" => Some(Method::GridSmall),
            _ => None,
        }
    }

    pub fn default_grid_resolution(self) -> Option<usize> {
        match self {
            Method::Grid => Some(25),
            Method::GridSmall => Some(7),
            Method::Bo | Method::BoGrid => None,
        }
    }
}

/// Everything a search needs to evaluate designs for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub effects: EffectSet,
    pub n_total: usize,
    pub consts: SimConstants,
    #[serde(default)]
    pub calibration: CalibrationOptions,
}

impl Scenario {
    /// Stage-1 arm count including the control.
    pub fn k1(&self) -> usize {
        self.effects.arm_count() + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.effects.validate()?;
        self.consts.validate(self.effects.arm_count())?;
        if self.n_total == 0 {
            return Err(Error::InvalidInput("n_total must be at least 1".into()));
        }
        Ok(())
    }
}

/// Evaluation budget of the Bayesian-optimization loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub n_init: usize,
    pub n_iter: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            n_init: 16,
            n_iter: 100,
        }
    }
}

/// One observation of the black box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub point: DesignPoint,
    pub n_stage1: usize,
    pub n_stage2: usize,
    pub k2_hat: f64,
    pub y: PowerEstimate,
    pub seed: u64,
    pub iteration: usize,
    /// Inner stochastic replicate for grid methods; 0 for BO.
    pub replication: usize,
    pub millis: f64,
}

/// Outcome of one optimizer run.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub method: Method,
    pub grid_resolution: Option<usize>,
    pub history: Vec<EvaluationRecord>,
    pub chosen: DesignPoint,
    /// The un-snapped choice when the method maps onto a grid.
    pub pre_snap: Option<DesignPoint>,
    pub chosen_allocation: AllocationResult,
    pub y_valid: Vec<PowerEstimate>,
    pub validation_seeds: Vec<u64>,
    /// Final posterior mean per history record (BO methods).
    pub surrogate_means: Option<Vec<f64>>,
    /// Final surrogate hyperparameters for audit (BO methods).
    pub surrogate: Option<GpSummary>,
    /// Best single observed outcome (grid methods record the optimistic
    /// estimate next to the cross-replicate one).
    pub naive_best: Option<f64>,
    pub master_seed: u64,
    pub fit_failures: usize,
    pub wall_millis: f64,
}

impl RunResult {
    /// Mean of the independent validation replicates.
    pub fn validated_power(&self) -> f64 {
        self.y_valid.iter().map(|p| p.value).sum::<f64>() / self.y_valid.len() as f64
    }
}

type CalibKey = (usize, u64, u64, usize);

/// The black-box objective: resolves allocations (with a calibration
/// cache keyed on exact parameter bits) and runs the power simulation.
pub struct SimObjective<'a> {
    scenario: &'a Scenario,
    master_seed: u64,
    fit_options: FitOptions,
    calibration_cache: Mutex<HashMap<CalibKey, AllocationResult>>,
}

impl<'a> SimObjective<'a> {
    pub fn new(scenario: &'a Scenario, master_seed: u64) -> Self {
        SimObjective {
            scenario,
            master_seed,
            fit_options: FitOptions::default(),
            calibration_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_fit_options(mut self, fit_options: FitOptions) -> Self {
        self.fit_options = fit_options;
        self
    }

    /// Stage sizes for a design point; calibration results are cached.
    pub fn resolve_allocation(&self, point: &DesignPoint) -> Result<AllocationResult> {
        let arms = self.scenario.effects.arm_count();
        if let Some(k2) = point.fixed_k2(arms) {
            return stage_sizes_fixed(point.r, self.scenario.k1(), k2, self.scenario.n_total);
        }
        let key: CalibKey = (
            point.strategy.index(),
            point.r.to_bits(),
            point.active_param().unwrap().to_bits(),
            self.scenario.n_total,
        );
        if let Some(hit) = self.calibration_cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        // The calibration stream depends only on the key, so concurrent
        // recomputation yields the identical result.
        let counter = calib_counter(&key);
        let mut rng = rng_for(self.master_seed, Domain::Calibrate, counter);
        let allocation = calibrate_variable_rule(
            &point.rule(arms),
            &self.scenario.effects,
            point.r,
            self.scenario.n_total,
            self.scenario.k1(),
            &self.scenario.consts,
            &self.scenario.calibration,
            &mut rng,
        )?;
        self.calibration_cache
            .lock()
            .unwrap()
            .insert(key, allocation.clone());
        Ok(allocation)
    }

    /// Evaluates the estimated power of one design under one seed.
    pub fn evaluate(
        &self,
        point: &DesignPoint,
        seed: u64,
        iteration: usize,
        replication: usize,
    ) -> Result<EvaluationRecord> {
        point.validate()?;
        let start = Instant::now();
        let record = match self.resolve_allocation(point) {
            Ok(allocation) => {
                let design = ResolvedDesign {
                    n_stage1: allocation.n_stage1,
                    n_stage2: allocation.n_stage2,
                    rule: point.rule(self.scenario.effects.arm_count()),
                };
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let y = estimate_power(&design, &self.scenario.effects, &self.scenario.consts, &mut rng)?;
                EvaluationRecord {
                    point: *point,
                    n_stage1: allocation.n_stage1,
                    n_stage2: allocation.n_stage2,
                    k2_hat: allocation.k2_hat,
                    y,
                    seed,
                    iteration,
                    replication,
                    millis: start.elapsed().as_secs_f64() * 1e3,
                }
            }
            Err(Error::InfeasibleDesign(_)) => {
                // A design that cannot field both stages has no power to
                // detect anything; recorded with zeroed sizes.
                EvaluationRecord {
                    point: *point,
                    n_stage1: 0,
                    n_stage2: 0,
                    k2_hat: 0.0,
                    y: PowerEstimate {
                        value: 0.0,
                        nsim: self.scenario.consts.nsim,
                        mc_se: 0.0,
                    },
                    seed,
                    iteration,
                    replication,
                    millis: start.elapsed().as_secs_f64() * 1e3,
                }
            }
            Err(e) => return Err(e),
        };
        Ok(record)
    }
}

use rand_chacha::rand_core::SeedableRng;

fn calib_counter(key: &CalibKey) -> u64 {
    fn mix(z: u64) -> u64 {
        let mut z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(mix(key.0 as u64) ^ key.1) ^ key.2) ^ key.3 as u64)
}

fn fit_history(
    history: &[EvaluationRecord],
    fit_options: &FitOptions,
    master_seed: u64,
    counter: u64,
) -> Result<GpModel> {
    let n = history.len();
    let x = DMatrix::from_fn(n, crate::design_space::ENCODED_DIM, |i, j| {
        encode(&history[i].point).0[j]
    });
    let y = DVector::from_fn(n, |i, _| history[i].y.value);
    let mut rng = rng_for(master_seed, Domain::Fit, counter);
    fit(x, y, fit_options, &mut rng)
}

/// Runs the Bayesian-optimization loop: evaluate an initial design, then
/// iterate fit / propose / evaluate. The final configuration is the
/// evaluated point with the best posterior mean under a surrogate fitted
/// on the full history, re-evaluated independently afterwards.
pub fn run_bo(
    scenario: &Scenario,
    budget: Budget,
    fit_options: &FitOptions,
    validation_reps: usize,
    master_seed: u64,
) -> Result<RunResult> {
    let search = bo_search(scenario, budget, fit_options, master_seed)?;
    let objective = SimObjective::new(scenario, master_seed);
    let allocation = objective.resolve_allocation(&search.chosen)?;
    let (y_valid, validation_seeds) =
        validate(&search.chosen, scenario, validation_reps, master_seed)?;
    Ok(RunResult {
        method: Method::Bo,
        grid_resolution: None,
        history: search.history,
        chosen: search.chosen,
        pre_snap: None,
        chosen_allocation: allocation,
        y_valid,
        validation_seeds,
        surrogate_means: Some(search.means),
        surrogate: search.summary,
        naive_best: None,
        master_seed,
        fit_failures: search.fit_failures,
        wall_millis: search.wall_millis,
    })
}

/// BO whose final configuration is mapped to the closest grid point
/// before the independent validation.
pub fn run_bo_grid(
    scenario: &Scenario,
    budget: Budget,
    fit_options: &FitOptions,
    grid_resolution: usize,
    validation_reps: usize,
    master_seed: u64,
) -> Result<RunResult> {
    let search = bo_search(scenario, budget, fit_options, master_seed)?;
    let grid = make_grid(grid_resolution);
    let snapped = snap_to_grid(&search.chosen, &grid)?;
    let objective = SimObjective::new(scenario, master_seed);
    let allocation = objective.resolve_allocation(&snapped)?;
    let (y_valid, validation_seeds) = validate(&snapped, scenario, validation_reps, master_seed)?;
    Ok(RunResult {
        method: Method::BoGrid,
        grid_resolution: Some(grid_resolution),
        history: search.history,
        chosen: snapped,
        pre_snap: Some(search.chosen),
        chosen_allocation: allocation,
        y_valid,
        validation_seeds,
        surrogate_means: Some(search.means),
        surrogate: search.summary,
        naive_best: None,
        master_seed,
        fit_failures: search.fit_failures,
        wall_millis: search.wall_millis,
    })
}

struct BoSearch {
    history: Vec<EvaluationRecord>,
    chosen: DesignPoint,
    means: Vec<f64>,
    summary: Option<GpSummary>,
    fit_failures: usize,
    wall_millis: f64,
}

fn bo_search(
    scenario: &Scenario,
    budget: Budget,
    fit_options: &FitOptions,
    master_seed: u64,
) -> Result<BoSearch> {
    scenario.validate()?;
    if budget.n_init == 0 {
        return Err(Error::InvalidInput("initial design must be non-empty".into()));
    }
    let start = Instant::now();
    let objective = SimObjective::new(scenario, master_seed);

    let mut history = Vec::with_capacity(budget.n_init + budget.n_iter);
    let init = sample_uniform(budget.n_init, &mut rng_for(master_seed, Domain::Sample, 0));
    for (i, point) in init.iter().enumerate() {
        let seed = derive(master_seed, Domain::Eval, i as u64);
        history.push(objective.evaluate(point, seed, i, 0)?);
    }

    let mut fit_failures = 0usize;
    for iter in 0..budget.n_iter {
        let point = match fit_history(&history, fit_options, master_seed, iter as u64) {
            Ok(model) => {
                let ctx = AcquisitionContext::new(&model);
                ctx.propose_next(&mut rng_for(master_seed, Domain::Propose, iter as u64))
            }
            Err(e) => {
                log::warn!("surrogate fit failed at iteration {iter}: {e}; proposing at random");
                fit_failures += 1;
                sample_one(&mut rng_for(master_seed, Domain::Propose, iter as u64))
            }
        };
        let idx = budget.n_init + iter;
        let seed = derive(master_seed, Domain::Eval, idx as u64);
        history.push(objective.evaluate(&point, seed, idx, 0)?);
    }

    // Selection on the posterior mean of a surrogate seeing everything.
    let (chosen_idx, means, summary) =
        match fit_history(&history, fit_options, master_seed, budget.n_iter as u64) {
            Ok(model) => {
                let means: Vec<f64> = history
                    .iter()
                    .map(|r| model.predict(&encode(&r.point)).mean)
                    .collect();
                let idx = argmax(&means);
                (idx, means, Some(model.summary()))
            }
            Err(e) => {
                log::warn!("final surrogate fit failed: {e}; choosing best observed outcome");
                let observed: Vec<f64> = history.iter().map(|r| r.y.value).collect();
                let idx = argmax(&observed);
                (idx, observed, None)
            }
        };

    Ok(BoSearch {
        chosen: history[chosen_idx].point,
        history,
        means,
        summary,
        fit_failures,
        wall_millis: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-replicate grid selection: per replicate, the best-scoring point
/// is re-estimated from the remaining replicates.
#[derive(Debug, Clone)]
pub struct GridSelection {
    /// Index of the point with the best single outcome across everything.
    pub naive_index: usize,
    pub naive_best: f64,
    /// One unbiased estimate per replicate.
    pub cross_replicate: Vec<f64>,
    /// Per-replicate winning point indices.
    pub winners: Vec<usize>,
}

/// `outcomes[i][j]` is the outcome of grid point `i` in replicate `j`.
pub fn grid_select(outcomes: &[Vec<f64>]) -> GridSelection {
    let reps = outcomes[0].len();
    let mut naive_index = 0usize;
    let mut naive_best = f64::NEG_INFINITY;
    for (i, row) in outcomes.iter().enumerate() {
        for &v in row {
            if v > naive_best {
                naive_best = v;
                naive_index = i;
            }
        }
    }
    let mut cross_replicate = Vec::with_capacity(reps);
    let mut winners = Vec::with_capacity(reps);
    for j in 0..reps {
        let mut winner = 0usize;
        for i in 0..outcomes.len() {
            if outcomes[i][j] > outcomes[winner][j] {
                winner = i;
            }
        }
        winners.push(winner);
        let others: Vec<f64> = (0..reps).filter(|&r| r != j).map(|r| outcomes[winner][r]).collect();
        let estimate = if others.is_empty() {
            outcomes[winner][j]
        } else {
            others.iter().sum::<f64>() / others.len() as f64
        };
        cross_replicate.push(estimate);
    }
    GridSelection {
        naive_index,
        naive_best,
        cross_replicate,
        winners,
    }
}

/// Exhaustive grid search with stochastic replications.
///
/// Every grid point is evaluated `reps` times. The per-replicate best
/// points provide the unbiased cross-replicate estimates reported in
/// `y_valid`; `chosen` is the point with the best single outcome.
pub fn run_grid(
    scenario: &Scenario,
    method: Method,
    l: usize,
    reps: usize,
    master_seed: u64,
) -> Result<RunResult> {
    scenario.validate()?;
    if l < 2 {
        return Err(Error::InvalidInput("grid needs l >= 2".into()));
    }
    if reps == 0 {
        return Err(Error::InvalidInput("need at least one replication".into()));
    }
    let start = Instant::now();
    let grid = make_grid(l);
    let objective = SimObjective::new(scenario, master_seed);

    let history: Vec<EvaluationRecord> = (0..grid.len() * reps)
        .into_par_iter()
        .map(|flat| {
            let i = flat / reps;
            let j = flat % reps;
            let seed = derive(master_seed, Domain::Eval, flat as u64);
            objective.evaluate(&grid[i], seed, flat, j)
        })
        .collect::<Result<_>>()?;

    let mut outcomes = vec![vec![0.0f64; reps]; grid.len()];
    for rec in &history {
        outcomes[rec.iteration / reps][rec.replication] = rec.y.value;
    }
    let selection = grid_select(&outcomes);
    let chosen = grid[selection.naive_index];
    let allocation = objective.resolve_allocation(&chosen)?;
    let nsim = scenario.consts.nsim;
    let y_valid: Vec<PowerEstimate> = selection
        .cross_replicate
        .iter()
        .map(|&value| {
            let pooled = nsim * reps.saturating_sub(1).max(1);
            PowerEstimate {
                value,
                nsim: pooled,
                mc_se: (value.max(0.0) * (1.0 - value).max(0.0) / pooled as f64).sqrt(),
            }
        })
        .collect();

    Ok(RunResult {
        method,
        grid_resolution: Some(l),
        history,
        chosen,
        pre_snap: None,
        chosen_allocation: allocation,
        y_valid,
        validation_seeds: Vec::new(),
        surrogate_means: None,
        surrogate: None,
        naive_best: Some(selection.naive_best),
        master_seed,
        fit_failures: 0,
        wall_millis: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Maps a design point to the closest grid point of the same strategy,
/// by Euclidean distance over the active numeric parameters. Ties prefer
/// the smaller ratio, then the smaller rule parameter.
pub fn snap_to_grid(point: &DesignPoint, grid: &[DesignPoint]) -> Result<DesignPoint> {
    let candidates: Vec<&DesignPoint> = grid
        .iter()
        .filter(|g| g.strategy == point.strategy)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidInput(
            "grid holds no point with the matching strategy".into(),
        ));
    }
    let dist2 = |g: &DesignPoint| {
        let dr = g.r - point.r;
        let dp = match (g.active_param(), point.active_param()) {
            (Some(a), Some(b)) => a - b,
            _ => 0.0,
        };
        dr * dr + dp * dp
    };
    let mut best = candidates[0];
    for g in &candidates[1..] {
        let (da, db) = (dist2(g), dist2(best));
        let better = da < db
            || (da == db
                && (g.r < best.r
                    || (g.r == best.r
                        && g.active_param().unwrap_or(0.0) < best.active_param().unwrap_or(0.0))));
        if better {
            best = g;
        }
    }
    Ok(*best)
}

/// Independent re-evaluations of a chosen design with fresh seeds from
/// the validation stream, never reused during search.
pub fn validate(
    chosen: &DesignPoint,
    scenario: &Scenario,
    reps: usize,
    master_seed: u64,
) -> Result<(Vec<PowerEstimate>, Vec<u64>)> {
    let objective = SimObjective::new(scenario, master_seed);
    let seeds: Vec<u64> = (0..reps)
        .map(|i| derive(master_seed, Domain::Validate, i as u64))
        .collect();
    let estimates: Vec<PowerEstimate> = seeds
        .par_iter()
        .map(|&seed| objective.evaluate(chosen, seed, 0, 0).map(|r| r.y))
        .collect::<Result<_>>()?;
    Ok((estimates, seeds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design_space::Strategy;
    use crate::trial_sim::IntersectionTest;
    use rand::Rng;

    fn small_scenario() -> Scenario {
        Scenario {
            name: "test".into(),
            effects: EffectSet::new(
                "linear",
                &[0.0, 0.2, 0.4, 0.6, 0.8],
                &[0.0, 0.05, 0.1, 0.15, 0.2],
            )
            .unwrap(),
            n_total: 1000,
            consts: SimConstants {
                corr: 0.4,
                level: 0.025,
                ptest: vec![3, 4],
                nsim: 50,
                intersection: IntersectionTest::Simes,
            },
            calibration: CalibrationOptions {
                candidates: 12,
                coarse_reps: 40,
                refine_reps: 80,
            },
        }
    }

    fn light_fit() -> FitOptions {
        FitOptions {
            restarts: 2,
            max_steps: 40,
            ..FitOptions::default()
        }
    }

    #[test]
    fn bo_touches_objective_exactly_budget_times() {
        let scenario = small_scenario();
        let budget = Budget {
            n_init: 6,
            n_iter: 4,
        };
        let result = run_bo(&scenario, budget, &light_fit(), 3, 11).unwrap();
        assert_eq!(result.history.len(), 10);
        assert_eq!(result.y_valid.len(), 3);
        let iters: Vec<usize> = result.history.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn bo_without_iterations_selects_from_initial_design() {
        let scenario = small_scenario();
        let budget = Budget {
            n_init: 5,
            n_iter: 0,
        };
        let result = run_bo(&scenario, budget, &light_fit(), 2, 3).unwrap();
        assert_eq!(result.history.len(), 5);
        assert!(result.history.iter().any(|r| r.point == result.chosen));
        // Chosen maximizes the surrogate mean over the evaluated points.
        let means = result.surrogate_means.as_ref().unwrap();
        let best = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let chosen_mean = means[result
            .history
            .iter()
            .position(|r| r.point == result.chosen)
            .unwrap()];
        assert!((chosen_mean - best).abs() < 1e-12);
    }

    #[test]
    fn bo_is_deterministic_for_a_seed() {
        let scenario = small_scenario();
        let budget = Budget {
            n_init: 4,
            n_iter: 2,
        };
        let a = run_bo(&scenario, budget, &light_fit(), 2, 99).unwrap();
        let b = run_bo(&scenario, budget, &light_fit(), 2, 99).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.chosen, b.chosen);
        assert_eq!(
            a.y_valid.iter().map(|p| p.value).collect::<Vec<_>>(),
            b.y_valid.iter().map(|p| p.value).collect::<Vec<_>>()
        );
    }

    #[test]
    fn best_so_far_is_monotone() {
        let scenario = small_scenario();
        let result = run_bo(
            &scenario,
            Budget {
                n_init: 6,
                n_iter: 3,
            },
            &light_fit(),
            2,
            5,
        )
        .unwrap();
        let mut best = f64::NEG_INFINITY;
        let curve: Vec<f64> = result
            .history
            .iter()
            .map(|r| {
                best = best.max(r.y.value);
                best
            })
            .collect();
        for w in curve.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn grid_counts_points_and_replicates() {
        let scenario = small_scenario();
        let result = run_grid(&scenario, Method::GridSmall, 2, 3, 21).unwrap();
        assert_eq!(result.history.len(), 16 * 3);
        let distinct: std::collections::HashSet<u64> = result
            .history
            .iter()
            .map(|r| r.point.r.to_bits() ^ (r.point.strategy.index() as u64) << 60
                ^ r.point.active_param().unwrap_or(-1.0).to_bits().rotate_left(17))
            .collect();
        assert_eq!(distinct.len(), 16);
        assert_eq!(result.y_valid.len(), 3);
        assert!(result.naive_best.is_some());
    }

    #[test]
    fn grid_single_replicate_and_deterministic_outcomes_agree() {
        // With no noise both selection schemes pick the same value.
        let outcomes = vec![vec![0.4, 0.4], vec![0.7, 0.7]];
        let sel = grid_select(&outcomes);
        assert_eq!(sel.naive_index, 1);
        assert_eq!(sel.cross_replicate, vec![0.7, 0.7]);
        assert_eq!(sel.naive_best, 0.7);
    }

    #[test]
    fn cross_replicate_selection_curbs_optimism() {
        let mut rng = rng_for(1, Domain::Sample, 7);
        let (mut naive_sum, mut cross_sum) = (0.0, 0.0);
        let grids = 100;
        for _ in 0..grids {
            let truth: Vec<f64> = (0..20).map(|_| rng.gen_range(0.3..0.8)).collect();
            let outcomes: Vec<Vec<f64>> = truth
                .iter()
                .map(|&t| (0..10).map(|_| t + rng.gen_range(-0.1..0.1)).collect())
                .collect();
            let sel = grid_select(&outcomes);
            naive_sum += sel.naive_best;
            cross_sum += sel.cross_replicate.iter().sum::<f64>() / 10.0;
        }
        assert!(
            cross_sum / grids as f64 <= naive_sum / grids as f64,
            "cross {} vs naive {}",
            cross_sum / grids as f64,
            naive_sum / grids as f64
        );
    }

    #[test]
    fn snapping_respects_strategy_and_distance() {
        let grid = make_grid(25);
        // A point already on the grid maps to itself.
        let on_grid = grid[40];
        assert_eq!(snap_to_grid(&on_grid, &grid).unwrap(), on_grid);

        let p = DesignPoint::with_eps(0.31, 1.49).unwrap();
        let snapped = snap_to_grid(&p, &grid).unwrap();
        assert_eq!(snapped.strategy, Strategy::Eps);
        // Exhaustive nearest-neighbour oracle.
        let best = grid
            .iter()
            .filter(|g| g.strategy == Strategy::Eps)
            .min_by(|a, b| {
                let da = (a.r - p.r).powi(2) + (a.eps.unwrap() - p.eps.unwrap()).powi(2);
                let db = (b.r - p.r).powi(2) + (b.eps.unwrap() - p.eps.unwrap()).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert_eq!(snapped, *best);

        let thresh = DesignPoint::with_tau(0.5, 9.9).unwrap();
        assert_eq!(
            snap_to_grid(&thresh, &grid).unwrap().strategy,
            Strategy::Thresh
        );
    }

    #[test]
    fn validation_seeds_stay_clear_of_search_seeds() {
        let scenario = small_scenario();
        let result = run_bo(
            &scenario,
            Budget {
                n_init: 4,
                n_iter: 2,
            },
            &light_fit(),
            5,
            17,
        )
        .unwrap();
        let search: std::collections::HashSet<u64> =
            result.history.iter().map(|r| r.seed).collect();
        for seed in &result.validation_seeds {
            assert!(!search.contains(seed));
        }
        assert_eq!(result.validation_seeds.len(), 5);
    }

    #[test]
    fn validation_mean_tracks_high_precision_reference() {
        let scenario = {
            let mut s = small_scenario();
            s.consts.nsim = 400;
            s
        };
        let chosen = DesignPoint::fixed(Strategy::TwoBest, 0.3).unwrap();
        let (y_valid, _) = validate(&chosen, &scenario, 20, 4242).unwrap();
        let mean = y_valid.iter().map(|p| p.value).sum::<f64>() / 20.0;

        let mut reference_scenario = scenario.clone();
        reference_scenario.consts.nsim = 1_000_000;
        let objective = SimObjective::new(&reference_scenario, 777);
        let reference = objective
            .evaluate(&chosen, derive(777, Domain::Eval, 0), 0, 0)
            .unwrap()
            .y;
        let tol = 3.0 * (mean * (1.0 - mean) / 400.0).sqrt() / (20.0f64).sqrt() + 3.0 * reference.mc_se;
        assert!(
            (mean - reference.value).abs() < tol,
            "mean {mean} vs reference {} (tol {tol})",
            reference.value
        );
    }

    #[test]
    fn bo_grid_snap_only_loses_up_to_noise() {
        let scenario = small_scenario();
        let budget = Budget {
            n_init: 5,
            n_iter: 3,
        };
        let mut diff_sum = 0.0;
        let mut se_sum = 0.0;
        let seeds = [3u64, 13, 23];
        for &seed in &seeds {
            let bo = run_bo(&scenario, budget, &light_fit(), 8, seed).unwrap();
            let bo_grid = run_bo_grid(&scenario, budget, &light_fit(), 13, 8, seed).unwrap();
            assert_eq!(bo.history, bo_grid.history);
            assert_eq!(bo_grid.pre_snap, Some(bo.chosen));
            diff_sum += bo_grid.validated_power() - bo.validated_power();
            let pooled = |r: &RunResult| {
                r.y_valid.iter().map(|p| p.mc_se * p.mc_se).sum::<f64>().sqrt()
                    / r.y_valid.len() as f64
            };
            se_sum += pooled(&bo) + pooled(&bo_grid);
        }
        let avg_diff = diff_sum / seeds.len() as f64;
        let avg_se = se_sum / seeds.len() as f64;
        assert!(
            avg_diff <= 2.0 * avg_se + 1e-12,
            "snap gained {avg_diff} vs allowance {avg_se}"
        );
    }

    #[test]
    fn infeasible_points_record_zero_power() {
        let scenario = {
            let mut s = small_scenario();
            s.n_total = 300;
            s
        };
        let objective = SimObjective::new(&scenario, 1);
        let extreme = DesignPoint::fixed(Strategy::All, 0.999).unwrap();
        let rec = objective.evaluate(&extreme, 1, 0, 0).unwrap();
        assert_eq!(rec.y.value, 0.0);
        assert_eq!(rec.n_stage1, 0);
    }

    #[test]
    fn calibration_cache_returns_identical_results() {
        let scenario = small_scenario();
        let objective = SimObjective::new(&scenario, 9);
        let p = DesignPoint::with_eps(0.4, 1.0).unwrap();
        let a = objective.resolve_allocation(&p).unwrap();
        let b = objective.resolve_allocation(&p).unwrap();
        assert_eq!(a, b);
        // A second objective with the same master seed agrees too.
        let fresh = SimObjective::new(&scenario, 9);
        assert_eq!(fresh.resolve_allocation(&p).unwrap(), a);
    }
}

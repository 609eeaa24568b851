//! Executes the scenario plan and assembles the output artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cli::config::{ResolvedConfig, ResolvedScenario};
use crate::cli::files::{
    read_history, write_curves, write_history, write_summary, CurveRow, HistoryRow,
};
use crate::design_space::Strategy;
use crate::error::{Error, Result};
use crate::optimizer::{
    run_bo, run_bo_grid, run_grid, validate, Method, RunResult, Scenario,
};
use crate::seed;
use crate::surrogate::GpSummary;
use crate::trial_sim::PowerEstimate;

/// Identity of one optimizer run within a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLabel {
    pub scenario: String,
    pub method: Method,
    pub replication: usize,
}

impl RunLabel {
    pub fn design_id(&self) -> String {
        format!("{}/{}/{}", self.scenario, self.method.label(), self.replication)
    }
}

/// A finished (or failed) run.
#[derive(Debug)]
pub struct RunOutcome {
    pub label: RunLabel,
    pub result: std::result::Result<RunResult, String>,
}

fn mix(a: u64, b: u64) -> u64 {
    fn sm(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    sm(a ^ sm(b))
}

/// Master seed of one run, derived from the scenario seed, the method,
/// and the replication index.
pub fn run_seed(scenario_seed: u64, method: Method, replication: usize) -> u64 {
    let method_tag = match method {
        Method::Bo => 1u64,
        Method::BoGrid => 2,
        Method::Grid => 3,
        Method::GridSmall => 4,
    };
    mix(mix(scenario_seed, method_tag), replication as u64)
}

fn run_one(sc: &ResolvedScenario, method: Method, replication: usize) -> Result<RunResult> {
    let master = run_seed(sc.master_seed, method, replication);
    match method {
        Method::Bo => run_bo(&sc.scenario, sc.budget, &sc.fit, sc.validation_reps, master),
        Method::BoGrid => run_bo_grid(
            &sc.scenario,
            sc.budget,
            &sc.fit,
            sc.grid_resolution,
            sc.validation_reps,
            master,
        ),
        Method::Grid => run_grid(
            &sc.scenario,
            method,
            sc.grid_resolution,
            sc.grid_replications,
            master,
        ),
        Method::GridSmall => run_grid(
            &sc.scenario,
            method,
            sc.grid_small_resolution,
            sc.grid_replications,
            master,
        ),
    }
}

/// Runs every scenario x method x replication of the plan. Failures are
/// reported per run; the remaining runs are unaffected.
pub fn execute(config: &ResolvedConfig) -> Vec<RunOutcome> {
    let mut tasks: Vec<(&ResolvedScenario, Method, usize)> = Vec::new();
    for sc in &config.scenarios {
        for &method in &sc.methods {
            for replication in 0..sc.replications {
                tasks.push((sc, method, replication));
            }
        }
    }
    tasks
        .par_iter()
        .map(|&(sc, method, replication)| RunOutcome {
            label: RunLabel {
                scenario: sc.scenario.name.clone(),
                method,
                replication,
            },
            result: run_one(sc, method, replication).map_err(|e| e.to_string()),
        })
        .collect()
}

/// Flattens run outcomes into history rows. Grid methods report their
/// inner stochastic replicate (offset by the outer repetition when a
/// grid is repeated); BO methods report the outer repetition.
pub fn history_rows(outcomes: &[RunOutcome], grid_replications: impl Fn(&RunLabel) -> usize) -> Vec<HistoryRow> {
    let mut rows = Vec::new();
    for outcome in outcomes {
        let Ok(result) = &outcome.result else {
            continue;
        };
        let label = &outcome.label;
        let method = label.method.label();
        for record in &result.history {
            let replication = match label.method {
                Method::Bo | Method::BoGrid => label.replication,
                Method::Grid | Method::GridSmall => {
                    label.replication * grid_replications(label) + record.replication
                }
            };
            rows.push(HistoryRow::from_record(
                &label.scenario,
                method,
                replication,
                record,
            ));
        }
    }
    rows
}

/// Power curves of a grid run: mean power against the stage ratio per
/// strategy; for eps and thresh only the slice of the parameter value
/// with the highest power is kept.
pub fn emit_power_curves(label: &RunLabel, result: &RunResult) -> Vec<CurveRow> {
    let rows: Vec<HistoryRow> = result
        .history
        .iter()
        .map(|record| {
            HistoryRow::from_record(
                &label.scenario,
                label.method.label(),
                record.replication,
                record,
            )
        })
        .collect();
    power_curves_from_rows(&rows)
}

/// Curve extraction over raw history rows of one scenario and method.
pub fn power_curves_from_rows(rows: &[HistoryRow]) -> Vec<CurveRow> {
    // Pool outcomes per design point.
    type PointKey = (usize, u64, u64);
    let mut pooled: BTreeMap<PointKey, (Strategy, f64, Option<f64>, Vec<f64>)> = BTreeMap::new();
    for row in rows {
        let param = row.eps.or(row.tau);
        let key = (
            row.strategy.index(),
            row.r.to_bits(),
            param.map(|p| p.to_bits()).unwrap_or(u64::MAX),
        );
        pooled
            .entry(key)
            .or_insert_with(|| (row.strategy, row.r, param, Vec::new()))
            .3
            .push(row.y);
    }

    let (scenario, method) = match rows.first() {
        Some(r) => (r.scenario.clone(), r.method.clone()),
        None => return Vec::new(),
    };
    let stats = |ys: &[f64]| -> (f64, f64) {
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        if ys.len() < 2 {
            return (mean, 0.0);
        }
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };

    let mut curves = Vec::new();
    for strategy in Strategy::ALL {
        let of_strategy: Vec<&(Strategy, f64, Option<f64>, Vec<f64>)> = pooled
            .values()
            .filter(|(s, _, _, _)| *s == strategy)
            .collect();
        if of_strategy.is_empty() {
            continue;
        }
        let chosen_param: Option<f64> = if strategy.has_eps() || strategy.has_tau() {
            // Best parameter slice: the value whose curve reaches the
            // highest mean power anywhere.
            let mut by_param: BTreeMap<u64, f64> = BTreeMap::new();
            for (_, _, param, ys) in &of_strategy {
                let (mean, _) = stats(ys);
                let bits = param.unwrap().to_bits();
                let best = by_param.entry(bits).or_insert(f64::NEG_INFINITY);
                *best = best.max(mean);
            }
            let best_bits = by_param
                .iter()
                .max_by(|a, b| {
                    a.1.partial_cmp(b.1)
                        .unwrap()
                        .then(b.0.cmp(a.0))
                })
                .map(|(bits, _)| *bits)
                .unwrap();
            Some(f64::from_bits(best_bits))
        } else {
            None
        };

        let mut slice: Vec<CurveRow> = of_strategy
            .iter()
            .filter(|(_, _, param, _)| match chosen_param {
                Some(cp) => param.map(|p| p.to_bits()) == Some(cp.to_bits()),
                None => true,
            })
            .map(|(s, r, param, ys)| {
                let (mean, se) = stats(ys);
                CurveRow {
                    scenario: scenario.clone(),
                    method: method.clone(),
                    strategy: *s,
                    param: *param,
                    r: *r,
                    mean_power: mean,
                    se,
                    replicates: ys.len(),
                }
            })
            .collect();
        slice.sort_by(|a, b| a.r.partial_cmp(&b.r).unwrap());
        curves.extend(slice);
    }
    curves
}

/// Five-number summary plus mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistStats {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl DistStats {
    pub fn from_values(values: &[f64]) -> DistStats {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let q = |p: f64| -> f64 {
            if n == 1 {
                return sorted[0];
            }
            let pos = p * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        };
        DistStats {
            mean,
            sd,
            min: sorted[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: sorted[n - 1],
        }
    }
}

/// Per-run summary entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub design_id: String,
    pub scenario: String,
    pub method: String,
    pub replication: usize,
    pub master_seed: u64,
    pub evaluations: usize,
    pub chosen: crate::design_space::DesignPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_snap: Option<crate::design_space::DesignPoint>,
    pub allocation: crate::allocation::AllocationResult,
    pub y_valid: Vec<f64>,
    pub stats: DistStats,
    pub validated_power: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub naive_best: Option<f64>,
    pub fit_failures: usize,
    pub wall_millis: f64,
    pub validation_seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<GpSummary>,
    /// Everything needed to re-validate this design independently.
    pub scenario_spec: Scenario,
    pub validation_reps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunError {
    pub design_id: String,
    pub message: String,
}

/// The structured run summary document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryFile {
    pub seed_derivation: String,
    pub runs: Vec<RunSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<RunError>,
}

/// Builds the summary for a batch of outcomes.
pub fn emit_summary(config: &ResolvedConfig, outcomes: &[RunOutcome]) -> SummaryFile {
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for outcome in outcomes {
        let label = &outcome.label;
        match &outcome.result {
            Ok(result) => {
                let sc = config
                    .scenarios
                    .iter()
                    .find(|s| s.scenario.name == label.scenario)
                    .expect("outcome references a configured scenario");
                let y_valid: Vec<f64> = result.y_valid.iter().map(|p| p.value).collect();
                let mut allocation = result.chosen_allocation.clone();
                allocation.scan.clear();
                runs.push(RunSummary {
                    design_id: label.design_id(),
                    scenario: label.scenario.clone(),
                    method: label.method.label().to_string(),
                    replication: label.replication,
                    master_seed: result.master_seed,
                    evaluations: result.history.len(),
                    chosen: result.chosen,
                    pre_snap: result.pre_snap,
                    allocation,
                    stats: DistStats::from_values(&y_valid),
                    validated_power: result.validated_power(),
                    y_valid,
                    naive_best: result.naive_best,
                    fit_failures: result.fit_failures,
                    wall_millis: result.wall_millis,
                    validation_seeds: result.validation_seeds.clone(),
                    surrogate: result.surrogate.clone(),
                    scenario_spec: sc.scenario.clone(),
                    validation_reps: sc.validation_reps,
                });
            }
            Err(message) => errors.push(RunError {
                design_id: label.design_id(),
                message: message.clone(),
            }),
        }
    }
    SummaryFile {
        seed_derivation: seed::DERIVATION_NOTE.to_string(),
        runs,
        errors,
    }
}

/// Runs a full plan and writes `history.csv`, `summary.json`, and
/// `resolved_config.toml` into the output directory. With
/// `with_curves`, grid runs additionally emit per-run curve tables.
/// Returns the number of failed runs.
pub fn run_scenarios(config: &ResolvedConfig, with_curves: bool) -> Result<usize> {
    let outcomes = execute(config);

    if !config.scenarios.is_empty() {
        let reps_of = |label: &RunLabel| -> usize {
            config
                .scenarios
                .iter()
                .find(|s| s.scenario.name == label.scenario)
                .map(|s| s.grid_replications)
                .unwrap_or(1)
        };
        let rows = history_rows(&outcomes, reps_of);
        write_history(&config.output_dir.join("history.csv"), &rows)?;
        let summary = emit_summary(config, &outcomes);
        write_summary(&config.output_dir.join("summary.json"), &summary)?;
        let resolved_toml = toml::to_string_pretty(config)
            .map_err(|e| Error::Config(format!("cannot serialize resolved config: {e}")))?;
        crate::cli::files::write_atomic(
            &config.output_dir.join("resolved_config.toml"),
            resolved_toml.as_bytes(),
        )?;

        if with_curves {
            for outcome in &outcomes {
                if let Ok(result) = &outcome.result {
                    if matches!(outcome.label.method, Method::Grid | Method::GridSmall) {
                        let curves = emit_power_curves(&outcome.label, result);
                        let name = format!(
                            "curves_{}_{}_{}.csv",
                            outcome.label.scenario,
                            outcome.label.method.label(),
                            outcome.label.replication
                        );
                        write_curves(&config.output_dir.join(name), &curves)?;
                    }
                }
            }
        }
    }

    let failures = outcomes.iter().filter(|o| o.result.is_err()).count();
    for outcome in &outcomes {
        if let Err(e) = &outcome.result {
            log::error!("{}: {e}", outcome.label.design_id());
        }
    }
    Ok(failures)
}

/// Re-validates a design recorded in a summary file with fresh seeds.
pub fn revalidate(
    summary: &SummaryFile,
    design_id: &str,
    reps: Option<usize>,
    seed_override: Option<u64>,
) -> Result<(RunSummary, Vec<PowerEstimate>)> {
    let entry = summary
        .runs
        .iter()
        .find(|r| r.design_id == design_id)
        .ok_or_else(|| {
            Error::Config(format!(
                "design id '{design_id}' not found; known: {}",
                summary
                    .runs
                    .iter()
                    .map(|r| r.design_id.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?;
    let reps = reps.unwrap_or(entry.validation_reps);
    // A distinct master keeps these replicates disjoint from everything
    // the original run consumed.
    let master = seed_override.unwrap_or_else(|| mix(entry.master_seed, 0x5245_5641));
    let (estimates, _) = validate(&entry.chosen, &entry.scenario_spec, reps, master)?;
    Ok((entry.clone(), estimates))
}

/// Curve tables for every (scenario, method) pair found in a history file.
pub fn curves_from_history_file(history_path: &Path, out_path: &Path) -> Result<usize> {
    let rows = read_history(history_path)?;
    let mut groups: BTreeMap<(String, String), Vec<HistoryRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.scenario.clone(), row.method.clone()))
            .or_default()
            .push(row);
    }
    let mut all = Vec::new();
    for rows in groups.values() {
        all.extend(power_curves_from_rows(rows));
    }
    let count = all.len();
    write_curves(out_path, &all)?;
    Ok(count)
}

//! Scenario configuration: TOML files with built-in effect sets,
//! top-level defaults, and per-scenario overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocation::CalibrationOptions;
use crate::error::{Error, Result};
use crate::optimizer::{Budget, Method, Scenario};
use crate::surrogate::FitOptions;
use crate::trial_sim::{EffectSet, IntersectionTest, SimConstants};

/// Names of the effect sets shipped as built-ins.
pub const BUILTIN_EFFECT_SETS: [&str; 4] = ["paper", "linear", "sigmoid", "paper2"];

/// Built-in standardized effect sets (early stage / final stage per arm).
pub fn builtin_effect_set(name: &str) -> Option<EffectSet> {
    let (early, fin): (&[f64], &[f64]) = match name {
        "paper" => (
            &[0.0, 0.68, 0.82, 0.95, 0.91],
            &[0.0, 0.13, 0.17, 0.23, 0.20],
        ),
        "paper2" => (
            &[0.0, 0.68, 0.82, 0.95, 0.91],
            &[0.0, 0.26, 0.34, 0.46, 0.40],
        ),
        "linear" => (
            &[0.0, 0.20, 0.40, 0.60, 0.80],
            &[0.0, 0.05, 0.10, 0.15, 0.20],
        ),
        "sigmoid" => (
            &[0.0, 0.10, 0.20, 0.70, 0.80],
            &[0.0, 0.025, 0.05, 0.175, 0.20],
        ),
        _ => return None,
    };
    Some(EffectSet::new(name, early, fin).expect("built-in effect sets are valid"))
}

/// Reference to an effect set: a built-in name or an inline definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EffectSetRef {
    Named(String),
    Inline(EffectSet),
}

impl EffectSetRef {
    pub fn resolve(&self) -> Result<EffectSet> {
        match self {
            EffectSetRef::Named(name) => builtin_effect_set(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown effect set '{name}'; built-ins: {}",
                    BUILTIN_EFFECT_SETS.join(", ")
                ))
            }),
            EffectSetRef::Inline(set) => {
                set.validate()?;
                Ok(set.clone())
            }
        }
    }
}

/// Top-level defaults applied to every scenario unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub nsim: usize,
    pub corr: f64,
    pub level: f64,
    pub ptest: Vec<usize>,
    pub intersection_test: IntersectionTest,
    pub replications: usize,
    pub validation_reps: usize,
    pub n_init: usize,
    pub n_iter: usize,
    pub grid_resolution: usize,
    pub grid_small_resolution: usize,
    pub grid_replications: usize,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default)]
    pub fit: FitOptions,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            nsim: 1000,
            corr: 0.4,
            level: 0.025,
            ptest: vec![3, 4],
            intersection_test: IntersectionTest::Simes,
            replications: 1,
            validation_reps: 20,
            n_init: 16,
            n_iter: 100,
            grid_resolution: 25,
            grid_small_resolution: 7,
            grid_replications: 20,
            calibration: CalibrationOptions::default(),
            fit: FitOptions::default(),
        }
    }
}

/// One scenario entry of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub effect_set: EffectSetRef,
    pub n_total: usize,
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nsim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptest: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intersection_test: Option<IntersectionTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_init: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_small_resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_replications: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_reps: Option<usize>,
}

/// The config file as written by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_master_seed() -> u64 {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Expands defaults and references into self-contained scenarios.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let mut scenarios = Vec::with_capacity(self.scenarios.len());
        for (idx, sc) in self.scenarios.iter().enumerate() {
            if sc.name.is_empty() {
                return Err(Error::Config(format!("scenario {idx}: empty name")));
            }
            if sc.methods.is_empty() {
                return Err(Error::Config(format!(
                    "scenario '{}': no methods listed",
                    sc.name
                )));
            }
            let d = &self.defaults;
            let effects = sc.effect_set.resolve()?;
            let consts = SimConstants {
                corr: sc.corr.unwrap_or(d.corr),
                level: sc.level.unwrap_or(d.level),
                ptest: sc.ptest.clone().unwrap_or_else(|| d.ptest.clone()),
                nsim: sc.nsim.unwrap_or(d.nsim),
                intersection: sc.intersection_test.unwrap_or(d.intersection_test),
            };
            let scenario = Scenario {
                name: sc.name.clone(),
                effects,
                n_total: sc.n_total,
                consts,
                calibration: d.calibration.clone(),
            };
            scenario.validate().map_err(|e| {
                Error::Config(format!("scenario '{}': {e}", sc.name))
            })?;
            let replications = sc.replications.unwrap_or(d.replications);
            if replications == 0 {
                return Err(Error::Config(format!(
                    "scenario '{}': replications must be at least 1",
                    sc.name
                )));
            }
            scenarios.push(ResolvedScenario {
                scenario,
                methods: sc.methods.clone(),
                replications,
                master_seed: sc.master_seed.unwrap_or(self.master_seed),
                budget: Budget {
                    n_init: sc.n_init.unwrap_or(d.n_init),
                    n_iter: sc.n_iter.unwrap_or(d.n_iter),
                },
                grid_resolution: sc.grid_resolution.unwrap_or(d.grid_resolution),
                grid_small_resolution: sc
                    .grid_small_resolution
                    .unwrap_or(d.grid_small_resolution),
                grid_replications: sc.grid_replications.unwrap_or(d.grid_replications),
                validation_reps: sc.validation_reps.unwrap_or(d.validation_reps),
                fit: d.fit.clone(),
            });
        }
        Ok(ResolvedConfig {
            output_dir: self.output_dir.clone(),
            master_seed: self.master_seed,
            workers: self.workers,
            scenarios,
        })
    }
}

/// A scenario with every knob made explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedScenario {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub master_seed: u64,
    pub budget: Budget,
    pub grid_resolution: usize,
    pub grid_small_resolution: usize,
    pub grid_replications: usize,
    pub validation_reps: usize,
    pub fit: FitOptions,
}

impl ResolvedScenario {
    /// Grid resolution used by a method, if it runs on a grid.
    pub fn resolution_for(&self, method: Method) -> Option<usize> {
        match method {
            Method::Grid => Some(self.grid_resolution),
            Method::GridSmall => Some(self.grid_small_resolution),
            Method::BoGrid => Some(self.grid_resolution),
            Method::Bo => None,
        }
    }
}

/// Fully resolved run plan; serializable for byte-exact round trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub output_dir: PathBuf,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub scenarios: Vec<ResolvedScenario>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
output_dir = "out"
master_seed = 42

[defaults]
nsim = 200
corr = 0.4
level = 0.025
ptest = [3, 4]
intersection_test = "simes"
replications = 2
validation_reps = 5
n_init = 8
n_iter = 10
grid_resolution = 13
grid_small_resolution = 7
grid_replications = 4

[[scenario]]
name = "linear-1000"
effect_set = "linear"
n_total = 1000
methods = ["BO", "GridSmall"]

[[scenario]]
name = "custom"
effect_set = { name = "custom", early = [0.0, 0.5], final = [0.0, 0.2] }
n_total = 500
methods = ["Grid"]
nsim = 100
replications = 1
"#;

    #[test]
    fn sample_config_parses_and_resolves() {
        let config: RunConfig = toml::from_str(SAMPLE).unwrap();
        let resolved = config.resolve().unwrap();
        assert_eq!(resolved.scenarios.len(), 2);
        let first = &resolved.scenarios[0];
        assert_eq!(first.scenario.consts.nsim, 200);
        assert_eq!(first.replications, 2);
        assert_eq!(first.scenario.effects.name, "linear");
        let second = &resolved.scenarios[1];
        assert_eq!(second.scenario.consts.nsim, 100);
        assert_eq!(second.scenario.effects.arm_count(), 1);
    }

    #[test]
    fn resolved_config_round_trips() {
        let config: RunConfig = toml::from_str(SAMPLE).unwrap();
        let resolved = config.resolve().unwrap();
        let text = toml::to_string(&resolved).unwrap();
        let reloaded: ResolvedConfig = toml::from_str(&text).unwrap();
        assert_eq!(resolved, reloaded);
    }

    #[test]
    fn builtin_effect_sets_match_published_values() {
        let paper = builtin_effect_set("paper").unwrap();
        assert_eq!(paper.early_effects, vec![0.0, 0.68, 0.82, 0.95, 0.91]);
        assert_eq!(paper.final_effects, vec![0.0, 0.13, 0.17, 0.23, 0.20]);
        // The doubled set scales only the final stage.
        let paper2 = builtin_effect_set("paper2").unwrap();
        assert_eq!(paper2.early_effects, paper.early_effects);
        for (a, b) in paper2.final_effects.iter().zip(&paper.final_effects) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        assert!(builtin_effect_set("nope").is_none());
        for name in BUILTIN_EFFECT_SETS {
            builtin_effect_set(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_effect_set_is_a_config_error() {
        let bad = r#"
[[scenario]]
name = "x"
effect_set = "mystery"
n_total = 500
methods = ["BO"]
"#;
        let config: RunConfig = toml::from_str(bad).unwrap();
        assert!(matches!(config.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_scenario_list_is_fine() {
        let config: RunConfig = toml::from_str("master_seed = 3").unwrap();
        let resolved = config.resolve().unwrap();
        assert!(resolved.scenarios.is_empty());
    }
}

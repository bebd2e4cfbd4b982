use std::fs;
use std::path::{Path, PathBuf};

use dpsc::data::{Schema, SynthSpec};
use dpsc::evaluation::{Algorithm, ExperimentGrid, LambdaPolicy, DEFAULT_SUPPORT_THRESHOLD};
use dpsc::model::Penalty;
use dpsc::noise::derive_seed;
use dpsc::SolverConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Generate,
    Train,
    Accountant,
    Experiment,
    Metrics,
}

/// Budget for `train`. Neither field set means a non-private solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccountantSection {
    pub epsilons: Vec<f64>,
    pub gammas: Vec<f64>,
    pub n: usize,
}

impl Default for AccountantSection {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0],
            gammas: Vec::new(),
            n: 10_000,
        }
    }
}

/// Grid axes; the solver, data design and penalty smoothing come from the
/// top-level sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub epsilons: Vec<f64>,
    pub sizes: Vec<usize>,
    pub test_n: usize,
    pub repeats: usize,
    pub lambda_policy: LambdaPolicy,
    pub lambdas: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub support_threshold: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = ExperimentGrid::default();
        Self {
            epsilons: g.epsilons,
            sizes: g.sizes,
            test_n: g.test_n,
            repeats: g.repeats,
            lambda_policy: g.lambda_policy,
            lambdas: g.lambdas,
            algorithms: g.algorithms,
            support_threshold: DEFAULT_SUPPORT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training data: a dataset cache file, or a CSV when `schema` is set.
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Sidecar written by `generate`, supplying the true coefficients.
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<Command>,
    /// Master seed. When set, the data, solver and grid seeds are derived
    /// from it and any seeds given in the sections are replaced.
    pub seed: Option<u64>,
    pub synth: SynthSpec,
    pub solver: SolverConfig,
    pub penalty: Penalty,
    pub privacy: PrivacySection,
    pub accountant: AccountantSection,
    pub grid: GridSection,
    pub schema: Option<Schema>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: None,
            synth: SynthSpec::default(),
            solver: SolverConfig::default(),
            penalty: Penalty::l1(0.01),
            privacy: PrivacySection::default(),
            accountant: AccountantSection::default(),
            grid: GridSection::default(),
            schema: None,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Fills the component seeds from the master seed, if one is set.
    pub fn resolve_seeds(&mut self) {
        if let Some(master) = self.seed {
            self.synth.seed = derive_seed(master, &[1]);
            self.solver.seed = derive_seed(master, &[2]);
        }
    }

    pub fn experiment_grid(&self) -> ExperimentGrid {
        let (mu, reweight_steps) = match self.penalty {
            Penalty::LHalf {
                mu, reweight_steps, ..
            } => (mu, reweight_steps),
            Penalty::L1 { .. } => {
                let d = ExperimentGrid::default();
                (d.mu, d.reweight_steps)
            }
        };
        ExperimentGrid {
            epsilons: self.grid.epsilons.clone(),
            sizes: self.grid.sizes.clone(),
            test_n: self.grid.test_n,
            repeats: self.grid.repeats,
            lambda_policy: self.grid.lambda_policy,
            lambdas: self.grid.lambdas.clone(),
            algorithms: self.grid.algorithms.clone(),
            solver: self.solver,
            synth: self.synth.clone(),
            mu,
            reweight_steps,
            support_threshold: self.grid.support_threshold,
            master_seed: self.seed.unwrap_or(self.solver.seed),
        }
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
        path.as_deref()
            .ok_or_else(|| CliError::Config(format!("paths.{name} is required for this command")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub name: String,
    pub seed: u64,
}

/// Everything needed to rerun a command: the resolved config and the seeds
/// it used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seeds: Vec<SeedEntry>,
}

/// Sets `path` (dot separated) in a JSON tree, creating objects on the way.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!(
            "override key `{key}` is malformed"
        )));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .expect("just made an object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    if !node.is_object() {
        *node = Value::Object(Default::default());
    }
    node.as_object_mut()
        .expect("just made an object")
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads a config or a manifest (whose `config` member is used), applies
/// the overrides, and fills defaults.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut tree = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            match parsed {
                Value::Object(mut map)
                    if map.contains_key("seeds") && map.contains_key("config") =>
                {
                    map.remove("config").expect("checked")
                }
                other => other,
            }
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    serde_json::from_value(tree).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut tree = serde_json::json!({"solver": {"c": 1.0}});
        apply_override(&mut tree, "solver.alpha=0.25").unwrap();
        apply_override(&mut tree, "penalty.kind=l_half").unwrap();
        apply_override(&mut tree, "penalty.lambda=0.2").unwrap();
        apply_override(&mut tree, "grid.epsilons=[1,2]").unwrap();
        let cfg: RunConfig = serde_json::from_value(tree).unwrap();
        assert_eq!(cfg.solver.alpha, 0.25);
        assert_eq!(cfg.solver.c, 1.0);
        assert_eq!(cfg.penalty, Penalty::lhalf(0.2));
        assert_eq!(cfg.grid.epsilons, vec![1.0, 2.0]);
        assert!(apply_override(&mut serde_json::json!({}), "novalue").is_err());
        assert!(apply_override(&mut serde_json::json!({}), "a..b=1").is_err());
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = RunConfig {
            seed: Some(9),
            command: Some(Command::Experiment),
            ..RunConfig::default()
        };
        cfg.resolve_seeds();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        let tree = serde_json::json!({"solvr": {}});
        assert!(serde_json::from_value::<RunConfig>(tree).is_err());
    }
}

//! Run configurations. Every struct rejects unknown keys; relative paths are
//! resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use shotnoise::mc::ThresholdSet;
use shotnoise::model::ModelConfig;
use shotnoise::ratefn::RateConstraint;
use shotnoise::verify::VerifyConfig;
use shotnoise::{Control, ShotNoiseModel};

use crate::CliError;

/// Bytes of every file read while loading a run, for the manifest hash.
#[derive(Debug, Default)]
pub struct Inputs {
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::Config(format!("{} is not valid UTF-8", path.display())))?;
        self.files.push((path.to_path_buf(), bytes));
        Ok(text)
    }
}

pub fn parse<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_command(found: &Option<String>, expected: &str) -> Result<(), CliError> {
    match found {
        Some(c) if c != expected => Err(CliError::Config(format!(
            "config is for command '{c}' but '{expected}' was invoked"
        ))),
        _ => Ok(()),
    }
}

fn exactly_one<'a, A, B>(
    a: &'a Option<A>,
    b: &'a Option<B>,
    what: &str,
) -> Result<Option<Result<&'a A, &'a B>>, CliError> {
    match (a, b) {
        (Some(_), Some(_)) => Err(CliError::Config(format!(
            "give either '{what}' or '{what}_file', not both"
        ))),
        (Some(a), None) => Ok(Some(Ok(a))),
        (None, Some(b)) => Ok(Some(Err(b))),
        (None, None) => Ok(None),
    }
}

pub fn load_model(
    inline: &Option<ModelConfig>,
    file: &Option<PathBuf>,
    base: &Path,
    inputs: &mut Inputs,
) -> Result<ShotNoiseModel, CliError> {
    let cfg = match exactly_one(inline, file, "model")? {
        Some(Ok(m)) => m.clone(),
        Some(Err(p)) => {
            let path = resolve(base, p);
            let text = inputs.read(&path)?;
            parse::<ModelConfig>(&text, &path)?
        }
        None => return Err(CliError::Config("missing 'model' or 'model_file'".into())),
    };
    ShotNoiseModel::from_config(&cfg).map_err(|e| CliError::Config(format!("model: {e}")))
}

pub fn load_control(
    inline: &Option<Control>,
    file: &Option<PathBuf>,
    what: &str,
    base: &Path,
    inputs: &mut Inputs,
) -> Result<Option<Control>, CliError> {
    Ok(match exactly_one(inline, file, what)? {
        Some(Ok(c)) => Some(c.clone()),
        Some(Err(p)) => {
            let path = resolve(base, p);
            let text = inputs.read(&path)?;
            Some(parse::<Control>(&text, &path)?)
        }
        None => None,
    })
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub command: Option<String>,
    pub model: Option<ModelConfig>,
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Replication index; selects the RNG stream.
    #[serde(default)]
    pub stream: u64,
    pub epsilon: f64,
    pub control: Option<Control>,
    pub control_file: Option<PathBuf>,
    #[serde(default = "default_grid_intervals")]
    pub grid_intervals: usize,
}

fn default_grid_intervals() -> usize {
    shotnoise::simulate::DEFAULT_GRID_INTERVALS
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    pub command: Option<String>,
    pub model: Option<ModelConfig>,
    pub model_file: Option<PathBuf>,
    pub control: Option<Control>,
    pub control_file: Option<PathBuf>,
    pub tol: Option<f64>,
    pub nodes_per_cell: Option<usize>,
    pub min_total_nodes: Option<usize>,
    pub max_iterations: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub command: Option<String>,
    pub model: Option<ModelConfig>,
    pub model_file: Option<PathBuf>,
    pub constraint: RateConstraint,
    pub cells: Option<usize>,
    pub constraint_tol: Option<f64>,
    pub max_outer: Option<usize>,
    pub initial_penalty: Option<f64>,
    pub inner_max_iter: Option<usize>,
    pub inner_gtol: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMethod {
    Naive,
    Is,
    Exact,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub command: Option<String>,
    pub model: Option<ModelConfig>,
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub event: ThresholdSet,
    pub epsilons: Vec<f64>,
    pub method: McMethod,
    #[serde(default = "default_replications")]
    pub replications: u64,
    pub tilt: Option<Control>,
    pub tilt_file: Option<PathBuf>,
    /// Computes the tilt with `minimize_rate` on this constraint instead.
    pub tilt_constraint: Option<RateConstraint>,
    pub tilt_cells: Option<usize>,
}

fn default_replications() -> u64 {
    10_000
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRunConfig {
    pub command: Option<String>,
    /// Model file of the compound Poisson benchmark.
    pub benchmark: PathBuf,
    #[serde(default)]
    pub suite: VerifyConfig,
    /// Subset of criteria to run; all by default.
    pub criteria: Option<Vec<String>>,
}

impl SimulateConfig {
    pub fn check(&self) -> Result<(), CliError> {
        check_command(&self.command, "simulate")?;
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(CliError::Config("epsilon must be positive".into()));
        }
        if self.grid_intervals == 0 {
            return Err(CliError::Config("grid_intervals must be positive".into()));
        }
        Ok(())
    }
}

impl FluidConfig {
    pub fn check(&self) -> Result<(), CliError> {
        check_command(&self.command, "fluid")
    }
}

impl RateConfig {
    pub fn check(&self) -> Result<(), CliError> {
        check_command(&self.command, "rate")
    }
}

impl McConfig {
    pub fn check(&self) -> Result<(), CliError> {
        check_command(&self.command, "mc")?;
        if self.epsilons.is_empty() {
            return Err(CliError::Config("epsilons must not be empty".into()));
        }
        if self.replications == 0 {
            return Err(CliError::Config("replications must be positive".into()));
        }
        let tilts = [
            self.tilt.is_some(),
            self.tilt_file.is_some(),
            self.tilt_constraint.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count();
        match (self.method, tilts) {
            (McMethod::Is, 1) => Ok(()),
            (McMethod::Is, _) => Err(CliError::Config(
                "method 'is' needs exactly one of 'tilt', 'tilt_file', 'tilt_constraint'".into(),
            )),
            (_, 0) => Ok(()),
            _ => Err(CliError::Config("a tilt is only used with method 'is'".into())),
        }
    }
}

impl VerifyRunConfig {
    pub fn check(&self) -> Result<(), CliError> {
        check_command(&self.command, "verify")?;
        if let Some(ids) = &self.criteria {
            for id in ids {
                if !crate::verify::ALL.contains(&id.as_str()) {
                    return Err(CliError::Config(format!("unknown criterion '{id}'")));
                }
            }
        }
        self.suite
            .validate()
            .map_err(|e| CliError::Config(format!("suite: {e}")))
    }
}

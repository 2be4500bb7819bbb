//! Scenario files: strict TOML describing one closed-loop run, with
//! command-line overrides addressed by dotted key paths.
//!
//! ```toml
//! seed = 7
//!
//! [sim]
//! duration = 98.0
//! timing = "sampled"        # or "continuous"
//! dt_control = 0.02
//!
//! [trajectory.path]
//! kind = "circle"
//! radius = 10.0
//!
//! [trajectory.speed]
//! initial = 1.0
//!
//! [[trailers]]
//! mass = 2630.0
//! l = 2.5
//! ```
//!
//! Relative file paths are resolved against the scenario's directory.

use crate::controller::{ControllerGains, ControllerOptions, TrackingError};
use crate::io::{self, IoError};
use crate::powertrain::{BrakeParams, PropulsionMap};
use crate::sim::{Actuation, AuditConfig, ControlTiming, ForceProvider, InitialCondition, Plant, SimConfig, SimError};
use crate::trailer::{ForceProfile, SensorModel, TrailerParams};
use crate::trajectory::{make_generator, GeneratorSpec, SpeedProfile, Trajectory};
use crate::vehicle::{HitchForce, TractorParams};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("override `{key}`: {reason}")]
    Override { key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] IoError),
}

impl From<SimError> for ScenarioError {
    fn from(e: SimError) -> Self {
        ScenarioError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    #[default]
    Sampled,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub duration: f64,
    #[serde(default = "default_dt_physics")]
    pub dt_physics: f64,
    #[serde(default = "default_dt_control")]
    pub dt_control: f64,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub actuation: Actuation,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Defaults to half the duration.
    #[serde(default)]
    pub settle_time: Option<f64>,
}

fn default_dt_physics() -> f64 {
    1e-3
}
fn default_dt_control() -> f64 {
    0.02
}
fn default_log_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowertrainSection {
    /// Map file the controller inverts; the reference map if absent.
    #[serde(default)]
    pub map: Option<PathBuf>,
    /// Map of the simulated vehicle; the controller's map if absent.
    #[serde(default)]
    pub plant_map: Option<PathBuf>,
    #[serde(default)]
    pub brake: BrakeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    #[serde(default)]
    pub path: Option<GeneratorSpec>,
    /// Table of `t,x,y` rows, instead of a generated path.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub speed: Option<SpeedProfile>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default)]
    pub x_e: f64,
    #[serde(default)]
    pub y_e: f64,
    #[serde(default)]
    pub theta_e: f64,
    #[serde(default)]
    pub v_e: f64,
    #[serde(default)]
    pub psi: f64,
    #[serde(default)]
    pub hitch_angles: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Quasi-static chain built from `[[trailers]]`; no load without trailers.
    #[default]
    Chain,
    /// Recorded force, columns `t,h_x,h_y`.
    Replay,
    /// Constant force `(h_x, h_y)`.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceSection {
    #[serde(default)]
    pub provider: ProviderKind,
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub h_x: f64,
    #[serde(default)]
    pub h_y: f64,
}

/// A trailer as written in a scenario. The first trailer's hitch offset
/// defaults to the tractor's hitch distance `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrailerSpec {
    pub mass: f64,
    #[serde(default)]
    pub d: Option<f64>,
    pub l: f64,
    #[serde(default)]
    pub c_rr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub sim: SimSection,
    #[serde(default)]
    pub tractor: TractorParams,
    #[serde(default)]
    pub powertrain: PowertrainSection,
    #[serde(default)]
    pub gains: ControllerGains,
    #[serde(default)]
    pub controller: ControllerOptions,
    pub trajectory: TrajectorySection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub force: ForceSection,
    #[serde(default)]
    pub trailers: Vec<TrailerSpec>,
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub output: OutputSection,
}

/// A loaded scenario: the run configuration and where its outputs go.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub config: SimConfig,
    pub log_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Splits `a.b=value` into its key and value.
pub fn parse_override(arg: &str) -> Result<(String, String), ScenarioError> {
    let arg = arg.trim_start_matches("--");
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(ScenarioError::Override { key: arg.to_string(), reason: "expected key.path=value".into() }),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // a bare word that is not valid TOML is taken as a string
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `key` (dotted path) in `doc`, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<(), ScenarioError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ScenarioError::Override { key: key.into(), reason: "empty path segment".into() });
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ScenarioError::Override { key: key.into(), reason: format!("`{p}` is not a table") }),
        };
    }
    table.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Parses scenario text after applying overrides. Unknown keys are errors.
pub fn parse_scenario(text: &str, path: &Path, overrides: &[(String, String)]) -> Result<ScenarioFile, ScenarioError> {
    let parse_err = |e: toml::de::Error| ScenarioError::Parse { path: path.to_path_buf(), reason: e.to_string() };
    if overrides.is_empty() {
        return toml::from_str(text).map_err(parse_err);
    }
    let mut doc: toml::Table = toml::from_str(text).map_err(parse_err)?;
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    doc.try_into().map_err(parse_err)
}

pub fn load_scenario(path: &Path, overrides: &[(String, String)]) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Read { path: path.to_path_buf(), source })?;
    let file = parse_scenario(&text, path, overrides)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
    build(file, base, &stem)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Turns a parsed scenario into a validated run configuration. Data files
/// are looked up relative to `base`.
pub fn build(file: ScenarioFile, base: &Path, default_name: &str) -> Result<Scenario, ScenarioError> {
    let invalid = |m: String| ScenarioError::Invalid(m);
    let tractor = file.tractor;
    tractor.validate().map_err(|e| invalid(format!("tractor: {e}")))?;
    file.gains.validate().map_err(|e| invalid(format!("gains: {e}")))?;

    let controller_map = match &file.powertrain.map {
        Some(p) => io::read_map(&resolve(base, p))?,
        None => PropulsionMap::reference(),
    };
    let plant_map = match &file.powertrain.plant_map {
        Some(p) => io::read_map(&resolve(base, p))?,
        None => controller_map.clone(),
    };

    let speed = file.trajectory.speed.clone();
    let trajectory: Trajectory = match (&file.trajectory.path, &file.trajectory.file) {
        (Some(spec), None) => {
            let speed = speed.ok_or_else(|| invalid("trajectory: [trajectory.speed] is required for a path".into()))?;
            make_generator(spec, speed, tractor.min_turning_radius())
                .map_err(|e| invalid(format!("trajectory: {e}")))?
                .into()
        }
        (None, Some(table)) => {
            if speed.is_some() {
                return Err(invalid("trajectory: a table carries its own speed; remove [trajectory.speed]".into()));
            }
            Trajectory::Table(io::read_trajectory_table(&resolve(base, table))?)
        }
        _ => return Err(invalid("trajectory: give exactly one of `path` or `file`".into())),
    };

    let trailers: Vec<TrailerParams> = file
        .trailers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let d = match (t.d, i) {
                (Some(d), _) => d,
                (None, 0) => tractor.c,
                (None, _) => return Err(invalid(format!("trailer {i}: hitch offset `d` is required"))),
            };
            let p = TrailerParams { mass: t.mass, d, l: t.l, c_rr: t.c_rr.unwrap_or(0.02) };
            p.validate(i).map_err(|e| invalid(e.to_string()))?;
            Ok(p)
        })
        .collect::<Result<_, _>>()?;

    let force = match file.force.provider {
        ProviderKind::Chain if trailers.is_empty() => ForceProvider::None,
        ProviderKind::Chain => ForceProvider::Chain(trailers),
        ProviderKind::Replay => {
            let p = file.force.file.as_ref().ok_or_else(|| invalid("force: replay needs `file`".into()))?;
            ForceProvider::Replay(io::read_force_profile(&resolve(base, p))?)
        }
        ProviderKind::Constant => {
            ForceProvider::Replay(ForceProfile::constant(HitchForce::new(file.force.h_x, file.force.h_y)))
        }
    };
    if !matches!(force, ForceProvider::Chain(_)) && !file.trailers.is_empty() {
        return Err(invalid("trailers are only used with the chain force provider".into()));
    }

    let sim = &file.sim;
    let timing = match sim.timing {
        Timing::Sampled => ControlTiming::Sampled { period: sim.dt_control },
        Timing::Continuous => ControlTiming::Continuous,
    };
    let init = &file.initial;
    let config = SimConfig {
        plant: Plant { tractor, map: plant_map, brake: file.powertrain.brake, force },
        controller_map,
        gains: file.gains,
        options: file.controller,
        sensor: file.sensor,
        trajectory,
        initial: InitialCondition {
            error: TrackingError { x_e: init.x_e, y_e: init.y_e, theta_e: init.theta_e, v_e: init.v_e },
            psi: init.psi,
            hitch_angles: init.hitch_angles.clone(),
        },
        timing,
        actuation: sim.actuation,
        dt_physics: sim.dt_physics,
        duration: sim.duration,
        seed: file.seed,
        log_every: sim.log_every,
        settle_time: sim.settle_time.unwrap_or(0.5 * sim.duration),
        audit: file.audit,
    };
    config.validate()?;

    let name = file.name.clone().unwrap_or_else(|| default_name.to_string());
    let log_path = file.output.log.clone().unwrap_or_else(|| PathBuf::from(format!("{name}_log.csv")));
    let summary_path = file.output.summary.clone().unwrap_or_else(|| PathBuf::from(format!("{name}_summary.toml")));
    Ok(Scenario { name, config, log_path, summary_path })
}

//! File formats: CSV inputs and logs, TOML maps and summaries.

use crate::powertrain::{FitReport, MapFitSample, PropulsionMap};
use crate::sim::{LogRecord, RunSummary};
use crate::trailer::{ForceProfile, TrailerError};
use crate::trajectory::{TableTrajectory, TrajectoryError};
use crate::vehicle::HitchForce;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {reason}")]
    Csv { path: PathBuf, line: u64, reason: String },
    #[error("{path}: {reason}")]
    Toml { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Trajectory { path: PathBuf, source: TrajectoryError },
    #[error("{path}: {source}")]
    Force { path: PathBuf, source: TrailerError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Reads every row of a headed CSV into `T`, reporting the file line of
/// the first bad row.
pub fn read_csv_from<T: DeserializeOwned, R: Read>(reader: R, path: &Path) -> Result<Vec<T>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: T = row.map_err(|e| IoError::Csv {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            reason: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?;
        out.push(row);
    }
    Ok(out)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_csv_from(file, path)
}

pub fn write_csv<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_csv(std::io::BufWriter::new(file), rows).map_err(|e| IoError::Csv {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })
}

fn ensure_parent(path: &Path) -> Result<(), IoError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

/// Propulsion measurements, columns `u1,v,F`.
pub fn read_map_samples(path: &Path) -> Result<Vec<MapFitSample>, IoError> {
    read_csv(path)
}

pub fn write_map_samples(path: &Path, samples: &[MapFitSample]) -> Result<(), IoError> {
    write_csv_file(path, samples)
}

#[derive(Debug, Deserialize)]
struct ForceRow {
    t: f64,
    h_x: f64,
    h_y: f64,
}

/// Recorded hitch force, columns `t,h_x,h_y`.
pub fn read_force_profile(path: &Path) -> Result<ForceProfile, IoError> {
    let rows: Vec<ForceRow> = read_csv(path)?;
    ForceProfile::new(rows.into_iter().map(|r| (r.t, HitchForce::new(r.h_x, r.h_y))).collect())
        .map_err(|source| IoError::Force { path: path.to_path_buf(), source })
}

/// One row of a trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub v: f64,
}

/// Reference table with columns `t,x,y`; further columns are ignored and
/// heading and speed are recomputed from the positions.
pub fn read_trajectory_table(path: &Path) -> Result<TableTrajectory, IoError> {
    let rows: Vec<TrajectoryRow> = read_csv(path)?;
    let points: Vec<_> = rows.iter().map(|r| (r.t, r.x, r.y)).collect();
    TableTrajectory::from_points(&points).map_err(|source| IoError::Trajectory { path: path.to_path_buf(), source })
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<(), IoError> {
    write_csv_file(path, rows)
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<(), IoError> {
    write_csv_file(path, records)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, IoError> {
    read_csv(path)
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = toml::to_string(value).map_err(|e| IoError::Toml { path: path.to_path_buf(), reason: e.to_string() })?;
    ensure_parent(path)?;
    fs::write(path, text).map_err(io_err(path))
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| IoError::Toml { path: path.to_path_buf(), reason: e.to_string() })
}

#[derive(Debug, Serialize)]
struct MapFile<'a> {
    #[serde(flatten)]
    map: &'a PropulsionMap,
    rms_residual: f64,
    samples: usize,
}

/// Writes a fitted map with its fit statistics.
pub fn write_fit_report(path: &Path, report: &FitReport) -> Result<(), IoError> {
    write_toml(path, &MapFile { map: &report.map, rms_residual: report.rms_residual, samples: report.samples })
}

/// Reads a map written by [`write_fit_report`] or a bare map table.
pub fn read_map(path: &Path) -> Result<PropulsionMap, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: toml::Table =
        toml::from_str(&text).map_err(|e| IoError::Toml { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut map = value;
    map.remove("rms_residual");
    map.remove("samples");
    let out: PropulsionMap = map
        .try_into()
        .map_err(|e: toml::de::Error| IoError::Toml { path: path.to_path_buf(), reason: e.to_string() })?;
    out.validate().map_err(|e| IoError::Toml { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(out)
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<(), IoError> {
    write_toml(path, summary)
}

pub fn read_summary(path: &Path) -> Result<RunSummary, IoError> {
    read_toml(path)
}

//! Scenario files: TOML with `include` support.
//!
//! Included files are merged first, in order, and the including file wins
//! on conflicts; tables merge recursively, everything else is replaced.
//! Paths are relative to the file that names them. The full schema is in
//! `docs/config.md`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Extra species/ring records file.
    #[serde(default)]
    pub records: Option<PathBuf>,
    pub species: SpeciesSection,
    #[serde(default)]
    pub ring: RingSection,
    pub budget: Option<BudgetSection>,
    pub crystal: Option<CrystalSection>,
    pub cooling: Option<CoolingSection>,
    pub stray: Option<StraySection>,
    pub gates: Option<GatesSection>,
    pub tracking: Option<TrackingSection>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_name() -> String {
    "scenario".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSection {
    pub name: String,
}

/// Ring parameters; frequencies are ordinary frequencies in Hz.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingSection {
    /// Named starting point; currently only `pallas`.
    pub preset: Option<String>,
    pub name: Option<String>,
    pub circumference: Option<f64>,
    pub n_ions: Option<u64>,
    pub kinetic_energy_ev: Option<f64>,
    pub secular_hz: Option<[f64; 3]>,
    pub rf_drive_hz: Option<f64>,
    pub horizontal_tune: Option<f64>,
    pub periodicity: Option<u32>,
    /// rad; defaults to the smooth-focusing value 2πQ/P.
    pub cell_phase_advance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    #[serde(default = "d_ld_temperature")]
    pub ld_temperature: f64,
    #[serde(default = "d_stray_field")]
    pub stray_field: f64,
    #[serde(default = "d_waist")]
    pub beam_waist: f64,
    #[serde(default = "d_pulse")]
    pub gate_pulse_length: f64,
    pub eta: Option<f64>,
    #[serde(default = "d_counts")]
    pub gate_ion_counts: Vec<u64>,
    #[serde(default = "d_band")]
    pub band_width_hz: f64,
    #[serde(default = "d_split")]
    pub cooler_split_hz: f64,
}

fn d_ld_temperature() -> f64 {
    20e-6
}
fn d_stray_field() -> f64 {
    10.0
}
fn d_waist() -> f64 {
    10e-6
}
fn d_pulse() -> f64 {
    4.6e-9
}
fn d_counts() -> Vec<u64> {
    vec![100, 100_000]
}
fn d_band() -> f64 {
    1e6
}
fn d_split() -> f64 {
    80e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrystalSection {
    pub n_ions: usize,
    /// Overrides the ring's secular frequencies.
    pub secular_hz: Option<[f64; 3]>,
    #[serde(default = "d_branch")]
    pub branch: String,
}

fn d_branch() -> String {
    "all".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoolingSection {
    #[serde(default = "d_one")]
    pub n_ions: usize,
    /// Simulated orbit length, m; defaults to the ring's.
    pub circumference: Option<f64>,
    pub secular_hz: Option<[f64; 3]>,
    #[serde(default = "d_saturation")]
    pub saturation: f64,
    /// Mean detuning in units of the linewidth.
    #[serde(default = "d_detuning")]
    pub detuning_linewidths: f64,
    /// Detuning split between the forward and backward beams, Hz.
    #[serde(default)]
    pub split_hz: f64,
    #[serde(default)]
    pub initial_velocity: f64,
    pub duration: f64,
    pub dt: f64,
    pub warmup: f64,
    #[serde(default = "d_sample_every")]
    pub sample_every: u64,
    /// Write every k-th step to the trajectory file; 0 disables it.
    #[serde(default)]
    pub trajectory_decimation: u64,
    #[serde(default = "d_true")]
    pub recoil: bool,
}

fn d_one() -> usize {
    1
}
fn d_saturation() -> f64 {
    0.1
}
fn d_detuning() -> f64 {
    -0.5
}
fn d_sample_every() -> u64 {
    200
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StraySection {
    #[serde(default, rename = "component")]
    pub components: Vec<ringqc::dynamics::StrayComponent>,
    /// Evenly spaced compensation sensors around the ring.
    pub sensors: usize,
    /// V/m
    pub target_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatesSection {
    /// Defaults to v/Δ of the ring.
    pub arrival_rate_hz: Option<f64>,
    #[serde(default)]
    pub targets: Vec<u64>,
    pub pulse_length: f64,
    pub rise_fall: f64,
    #[serde(default = "d_pulse")]
    pub switching_pulse_length: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_gate_counts")]
    pub n_ions: Vec<f64>,
    pub piecewise: Option<PiecewiseSection>,
}

fn d_eta() -> f64 {
    0.2
}
fn d_gate_counts() -> Vec<f64> {
    vec![100.0, 1e5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseSection {
    pub target_angle: f64,
    pub max_angle_per_pass: f64,
    pub coherence_time: Option<f64>,
    /// s; defaults to C/v of the ring.
    pub revolution_period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingSection {
    pub n_ions: usize,
    #[serde(default = "d_dark")]
    pub dark_fraction: f64,
    #[serde(default)]
    pub events: usize,
    #[serde(default = "d_loss_fraction")]
    pub loss_fraction: f64,
    #[serde(default = "d_rate")]
    pub event_rate_hz: f64,
    /// Extra sites observed beyond the uniqueness length.
    #[serde(default = "d_margin")]
    pub window_margin: usize,
    #[serde(default = "d_circular")]
    pub circular: bool,
    #[serde(default)]
    pub sweep_trials: usize,
}

fn d_dark() -> f64 {
    0.1
}
fn d_loss_fraction() -> f64 {
    0.5
}
fn d_rate() -> f64 {
    1.0
}
fn d_margin() -> usize {
    4
}
fn d_circular() -> bool {
    false
}

/// A loaded scenario and the directory relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ScenarioConfig,
    pub base_dir: PathBuf,
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let mut stack = HashSet::new();
    let table = load_table(path, &mut stack)?;
    let config: ScenarioConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Parse(format!("{}: {}", path.display(), e.message())))?;
    Ok(LoadedConfig {
        config,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn parse_str(text: &str, base_dir: &Path) -> Result<LoadedConfig, CliError> {
    let table: Table = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    if table.contains_key("include") {
        return Err(CliError::Parse("`include` needs a file path to resolve against".into()));
    }
    let config: ScenarioConfig =
        Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Parse(e.message().to_string()))?;
    Ok(LoadedConfig { config, base_dir: base_dir.to_path_buf() })
}

fn load_table(path: &Path, stack: &mut HashSet<PathBuf>) -> Result<Table, CliError> {
    let canonical = fs::canonicalize(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    if !stack.insert(canonical.clone()) {
        return Err(CliError::Parse(format!("{}: include cycle", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let mut table: Table = toml::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let mut merged = Table::new();
    if let Some(inc) = table.remove("include") {
        let list = match inc {
            Value::String(s) => vec![s],
            Value::Array(a) => a
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(CliError::Parse(format!("{}: include entries must be strings, got {other}", path.display()))),
                })
                .collect::<Result<_, _>>()?,
            other => return Err(CliError::Parse(format!("{}: include must be a string or array, got {other}", path.display()))),
        };
        let dir = path.parent().unwrap_or(Path::new("."));
        for rel in list {
            let sub = load_table(&dir.join(&rel), stack)?;
            merge(&mut merged, sub);
        }
    }
    merge(&mut merged, table);
    stack.remove(&canonical);
    Ok(merged)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

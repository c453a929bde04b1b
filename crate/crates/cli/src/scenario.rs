//! Scenario resolution, validation and the per-module pipelines.

use std::f64::consts::PI;

use serde_json::{json, Value};

use ringqc::budget::{self, BudgetInputs};
use ringqc::crystal::{self, Branch, ColumnarTable, TrapPotential};
use ringqc::dynamics::{self, CoolingRun, DynamicsOptions, Simulator, StrayFieldMap, TrajectoryRecorder};
use ringqc::gates::{self, Envelope, GateError, SwitchingRequest};
use ringqc::physcore::{self, constants, IonSpecies, RecordFile, Registry, RingConfig};
use ringqc::tracking::{self, Detection};

use crate::config::{LoadedConfig, RingSection, ScenarioConfig, SCHEMA_VERSION};
use crate::output::Artifact;
use crate::CliError;

const TWO_PI: f64 = 2.0 * PI;
const CRYSTAL_DENSE_CAP: usize = 2000;

/// Per-pipeline seed offsets so sections draw independent streams.
const SEED_COOLING: u64 = 0x636f_6f6c;
const SEED_TRACKING: u64 = 0x7472_6163;

#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub species: IonSpecies,
    pub ring: RingConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Budget,
    Crystal,
    Cooling,
    Stray,
    Gates,
    Tracking,
}

impl Pipeline {
    pub const ALL: [Pipeline; 6] = [
        Pipeline::Budget,
        Pipeline::Crystal,
        Pipeline::Cooling,
        Pipeline::Stray,
        Pipeline::Gates,
        Pipeline::Tracking,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Pipeline::Budget => "budget",
            Pipeline::Crystal => "crystal",
            Pipeline::Cooling => "cooling",
            Pipeline::Stray => "stray",
            Pipeline::Gates => "gates",
            Pipeline::Tracking => "tracking",
        }
    }

    fn present(self, c: &ScenarioConfig) -> bool {
        match self {
            Pipeline::Budget => c.budget.is_some(),
            Pipeline::Crystal => c.crystal.is_some(),
            Pipeline::Cooling => c.cooling.is_some(),
            Pipeline::Stray => c.stray.is_some(),
            Pipeline::Gates => c.gates.is_some(),
            Pipeline::Tracking => c.tracking.is_some(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn build_ring(section: &RingSection, records: &RecordFile) -> Result<RingConfig, CliError> {
    let mut ring = match section.preset.as_deref() {
        Some("pallas") => Some(RingConfig::pallas()),
        Some(other) => match records.ring.get(other) {
            Some(r) => Some(r.clone()),
            None => return Err(invalid(format!("ring.preset `{other}` is neither `pallas` nor a record"))),
        },
        None => None,
    };
    let need = |field: &str| invalid(format!("ring.{field} is required without a preset"));
    let mut r = match ring.take() {
        Some(r) => r,
        None => RingConfig {
            name: section.name.clone().unwrap_or_else(|| "ring".into()),
            circumference: section.circumference.ok_or_else(|| need("circumference"))?,
            n_ions: section.n_ions.ok_or_else(|| need("n_ions"))?,
            kinetic_energy: section.kinetic_energy_ev.ok_or_else(|| need("kinetic_energy_ev"))? * constants::ELEMENTARY_CHARGE,
            secular_freq_x: 0.0,
            secular_freq_y: 0.0,
            secular_freq_z: 0.0,
            rf_drive_freq: TWO_PI * section.rf_drive_hz.ok_or_else(|| need("rf_drive_hz"))?,
            horizontal_tune: section.horizontal_tune.ok_or_else(|| need("horizontal_tune"))?,
            periodicity: section.periodicity.ok_or_else(|| need("periodicity"))?,
            cell_phase_advance: 0.0,
        },
    };
    if section.preset.is_none() {
        let s = section.secular_hz.ok_or_else(|| need("secular_hz"))?;
        r.secular_freq_x = TWO_PI * s[0];
        r.secular_freq_y = TWO_PI * s[1];
        r.secular_freq_z = TWO_PI * s[2];
    } else {
        if let Some(n) = &section.name {
            r.name = n.clone();
        }
        if let Some(v) = section.circumference {
            r.circumference = v;
        }
        if let Some(v) = section.n_ions {
            r.n_ions = v;
        }
        if let Some(v) = section.kinetic_energy_ev {
            r.kinetic_energy = v * constants::ELEMENTARY_CHARGE;
        }
        if let Some(s) = section.secular_hz {
            r.secular_freq_x = TWO_PI * s[0];
            r.secular_freq_y = TWO_PI * s[1];
            r.secular_freq_z = TWO_PI * s[2];
        }
        if let Some(v) = section.rf_drive_hz {
            r.rf_drive_freq = TWO_PI * v;
        }
        if let Some(v) = section.horizontal_tune {
            r.horizontal_tune = v;
        }
        if let Some(v) = section.periodicity {
            r.periodicity = v;
        }
    }
    r.cell_phase_advance = match section.cell_phase_advance {
        Some(mu) => mu,
        None if section.preset.is_some() && section.horizontal_tune.is_none() && section.periodicity.is_none() => {
            r.cell_phase_advance
        }
        None => physcore::smooth_cell_phase_advance(r.horizontal_tune, r.periodicity.max(1)),
    };
    Ok(r)
}

/// Resolve references and check every section's preconditions before any
/// pipeline runs.
pub fn resolve(loaded: &LoadedConfig, seed_override: Option<u64>) -> Result<Resolved, CliError> {
    let config = loaded.config.clone();
    if config.schema_version != SCHEMA_VERSION {
        return Err(invalid(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", config.schema_version)));
    }
    let records = match &config.records {
        Some(p) => {
            let path = loaded.base_dir.join(p);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
            RecordFile::parse(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?
        }
        None => RecordFile::default(),
    };
    let mut registry = Registry::new();
    for sp in records.species.values() {
        registry.insert(sp.clone()).map_err(|e| invalid(e.to_string()))?;
    }
    let species = registry.get(&config.species.name).map_err(|e| invalid(format!("species.name: {e}")))?;
    let ring = build_ring(&config.ring, &records)?;
    ring.validate(&species).map_err(|e| invalid(format!("ring: {e}")))?;
    let resolved = Resolved { seed: seed_override.unwrap_or(config.seed), config, species, ring };
    validate_sections(&resolved)?;
    Ok(resolved)
}

fn validate_sections(r: &Resolved) -> Result<(), CliError> {
    let c = &r.config;
    if let Some(b) = &c.budget {
        for (k, v) in [("beam_waist", b.beam_waist), ("gate_pulse_length", b.gate_pulse_length), ("band_width_hz", b.band_width_hz)] {
            if !(v > 0.0) {
                return Err(invalid(format!("budget.{k} must be positive")));
            }
        }
    }
    if let Some(cr) = &c.crystal {
        if cr.n_ions == 0 {
            return Err(invalid("crystal.n_ions must be at least 1"));
        }
        cr.branch.parse::<Branch>().map_err(|e| invalid(format!("crystal.branch: {e}")))?;
        crystal_trap(r).map_err(|e| invalid(format!("crystal: {e}")))?;
    }
    if c.cooling.is_some() {
        let (sim, run) = cooling_setup(r).map_err(|e| invalid(format!("cooling: {e}")))?;
        if run.dt >= sim.max_step() {
            return Err(invalid(format!("cooling.dt = {:e} s must be below the resolution guard {:e} s", run.dt, sim.max_step())));
        }
        if !(run.duration > run.warmup && run.warmup >= 0.0) {
            return Err(invalid("cooling.duration must exceed cooling.warmup"));
        }
        if run.n_ions == 0 || run.sample_every == 0 {
            return Err(invalid("cooling.n_ions and cooling.sample_every must be positive"));
        }
    }
    if let Some(s) = &c.stray {
        if s.sensors == 0 || !(s.target_residual >= 0.0) {
            return Err(invalid("stray.sensors must be positive and stray.target_residual non-negative"));
        }
        stray_map(r).validate().map_err(|e| invalid(format!("stray: {e}")))?;
    }
    if let Some(g) = &c.gates {
        if !(g.pulse_length >= 0.0 && g.rise_fall >= 0.0 && g.eta > 0.0 && g.switching_pulse_length > 0.0) {
            return Err(invalid("gates: pulse lengths must be non-negative and eta positive"));
        }
        let moving = physcore::beam_velocity(&r.ring, &r.species) > 0.0;
        if g.arrival_rate_hz.is_none() && !moving {
            return Err(invalid("gates.arrival_rate_hz is required for a ring at rest"));
        }
        if let Some(p) = &g.piecewise {
            if !(p.max_angle_per_pass > 0.0) {
                return Err(invalid("gates.piecewise.max_angle_per_pass must be positive"));
            }
            if p.revolution_period.is_none() && !moving {
                return Err(invalid("gates.piecewise.revolution_period is required for a ring at rest"));
            }
        }
    }
    if let Some(t) = &c.tracking {
        if !(0.0..1.0).contains(&t.dark_fraction) {
            return Err(invalid("tracking.dark_fraction must lie in [0, 1)"));
        }
        if t.n_ions < 2 || !(t.event_rate_hz > 0.0) || !(0.0..=1.0).contains(&t.loss_fraction) {
            return Err(invalid("tracking: need n_ions ≥ 2, a positive event rate and loss_fraction in [0, 1]"));
        }
        if t.events >= t.n_ions {
            return Err(invalid("tracking.events must be smaller than tracking.n_ions"));
        }
    }
    Ok(())
}

pub fn present(r: &Resolved) -> Vec<Pipeline> {
    Pipeline::ALL.into_iter().filter(|p| p.present(&r.config)).collect()
}

/// Result of one or more pipelines: a JSON summary plus files.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Value,
    pub artifacts: Vec<Artifact>,
}

fn header(r: &Resolved) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    m.insert("scenario".into(), json!(r.config.name));
    m.insert("seed".into(), json!(r.seed));
    m.insert("species".into(), json!(r.species.name));
    m.insert("ring".into(), json!(r.ring.name));
    m
}

pub fn run(r: &Resolved, pipelines: &[Pipeline]) -> Result<Outcome, CliError> {
    let mut summary = header(r);
    let mut artifacts = Vec::new();
    for &p in pipelines {
        if !p.present(&r.config) {
            return Err(invalid(format!("the scenario has no [{}] section", p.key())));
        }
        let (v, mut files) = match p {
            Pipeline::Budget => run_budget(r)?,
            Pipeline::Crystal => run_crystal(r)?,
            Pipeline::Cooling => run_cooling(r)?,
            Pipeline::Stray => run_stray(r)?,
            Pipeline::Gates => run_gates(r)?,
            Pipeline::Tracking => run_tracking(r)?,
        };
        summary.insert(p.key().into(), v);
        artifacts.append(&mut files);
    }
    let summary = Value::Object(summary);
    artifacts.push(Artifact::json("summary.json", &summary));
    artifacts.push(Artifact::new(
        "report.txt",
        crate::output::render_report(&format!("ringqc scenario `{}`", r.config.name), &summary).into_bytes(),
    ));
    Ok(Outcome { summary, artifacts })
}

fn runtime(module: &str) -> impl Fn(String) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{module}: {e}"))
}

fn run_budget(r: &Resolved) -> Result<(Value, Vec<Artifact>), CliError> {
    let b = r.config.budget.as_ref().expect("checked by caller");
    let inputs = BudgetInputs {
        ld_temperature: b.ld_temperature,
        stray_field: b.stray_field,
        beam_waist: b.beam_waist,
        gate_pulse_length: b.gate_pulse_length,
        eta: b.eta,
        gate_ion_counts: b.gate_ion_counts.clone(),
        band_width: b.band_width_hz,
        cooler_split: TWO_PI * b.cooler_split_hz,
    };
    let report = budget::standard_report(&r.species, &r.ring, &inputs).map_err(|e| runtime("budget")(e.to_string()))?;
    let v = report.to_json();
    Ok((v.clone(), vec![Artifact::json("budget.json", &v)]))
}

fn crystal_trap(r: &Resolved) -> Result<TrapPotential, crystal::CrystalError> {
    let cr = r.config.crystal.as_ref().expect("checked by caller");
    let [wx, wy, wz] = match cr.secular_hz {
        Some(s) => s.map(|f| TWO_PI * f),
        None => [r.ring.secular_freq_x, r.ring.secular_freq_y, r.ring.secular_freq_z],
    };
    TrapPotential::for_species(&r.species, wx, wy, wz)
}

fn run_crystal(r: &Resolved) -> Result<(Value, Vec<Artifact>), CliError> {
    let cr = r.config.crystal.as_ref().expect("checked by caller");
    let err = |e: crystal::CrystalError| runtime("crystal")(e.to_string());
    let trap = crystal_trap(r).map_err(err)?;
    let branch: Branch = cr.branch.parse().map_err(|e: String| invalid(e))?;
    let state = crystal::solve_equilibrium(&trap, cr.n_ions, None).map_err(err)?;
    let positions = ColumnarTable::positions(&state);
    let mut files = Vec::new();
    let mut csv = Vec::new();
    positions.write_csv(&mut csv).map_err(|e| runtime("crystal")(e.to_string()))?;
    files.push(Artifact::new("crystal_positions.csv", csv));
    let mut bin = Vec::new();
    positions.write_binary(&mut bin).map_err(|e| runtime("crystal")(e.to_string()))?;
    files.push(Artifact::new("crystal_positions.rqct", bin));
    let mut v = json!({
        "n_ions": cr.n_ions,
        "potential_energy_j": state.potential_energy,
        "residual_gradient_norm": state.residual_gradient_norm,
        "iterations": state.iterations,
        "is_linear": state.is_linear(&trap, 1e-6),
        "min_separation_m": state.min_separation(),
        "pair_spacing_m": trap.pair_spacing(),
    });
    if cr.n_ions <= CRYSTAL_DENSE_CAP {
        let spec = crystal::phonon_modes(&state, &trap).map_err(err)?;
        let stats = crystal::band_statistics(&spec, branch).map_err(err)?;
        let mut csv = Vec::new();
        ColumnarTable::spectrum(&spec).write_csv(&mut csv).map_err(|e| runtime("crystal")(e.to_string()))?;
        files.push(Artifact::new("crystal_spectrum.csv", csv));
        v["band"] = json!({
            "min_hz": spec.band_min / TWO_PI,
            "max_hz": spec.band_max / TWO_PI,
            "width_hz": spec.band_width / TWO_PI,
        });
        v["branch"] = json!({
            "name": cr.branch,
            "count": stats.count,
            "width_hz": stats.width / TWO_PI,
            "mean_spacing_hz": stats.mean_spacing / TWO_PI,
            "min_spacing_hz": stats.min_spacing / TWO_PI,
        });
    } else {
        let edges = crystal::band_edges(&state, &trap, 400).map_err(err)?;
        v["band"] = json!({
            "min_hz": edges.lowest / TWO_PI,
            "max_hz": edges.highest / TWO_PI,
            "width_hz": (edges.highest - edges.lowest) / TWO_PI,
            "lanczos_steps": edges.lanczos_steps,
        });
    }
    if cr.n_ions >= 3 {
        let z = crystal::zigzag_stability(&trap, cr.n_ions).map_err(err)?;
        v["zigzag"] = json!({
            "linear_chain_stable": z.is_linear_stable,
            "lowest_transverse_mode_hz": z.lowest_transverse_mode / TWO_PI,
        });
    }
    Ok((v, files))
}

fn cooling_setup(r: &Resolved) -> Result<(Simulator, CoolingRun), dynamics::DynamicsError> {
    let c = r.config.cooling.as_ref().expect("checked by caller");
    let mut ring = r.ring.clone();
    if let Some(circ) = c.circumference {
        ring.circumference = circ;
    }
    if let Some(s) = c.secular_hz {
        ring.secular_freq_x = TWO_PI * s[0];
        ring.secular_freq_y = TWO_PI * s[1];
        ring.secular_freq_z = TWO_PI * s[2];
    }
    ring.n_ions = c.n_ions as u64;
    let gamma = r.species.cooling_linewidth()?;
    let lambda = r.species.cooling_wavelength()?;
    let beams = dynamics::velocity_control_pair(lambda, c.detuning_linewidths * gamma, TWO_PI * c.split_hz, c.saturation);
    let options = DynamicsOptions { recoil: c.recoil, ..DynamicsOptions::default() };
    let stray = StrayFieldMap::none(ring.circumference);
    let sim = Simulator::new(r.species.clone(), ring, beams.to_vec(), stray)?.with_options(options);
    let run = CoolingRun {
        n_ions: c.n_ions,
        initial_velocity: c.initial_velocity,
        dt: c.dt,
        duration: c.duration,
        warmup: c.warmup,
        sample_every: c.sample_every,
        seed: r.seed ^ SEED_COOLING,
    };
    Ok((sim, run))
}

fn run_cooling(r: &Resolved) -> Result<(Value, Vec<Artifact>), CliError> {
    let c = r.config.cooling.as_ref().expect("checked by caller");
    let err = |e: dynamics::DynamicsError| runtime("cooling")(e.to_string());
    let (sim, run) = cooling_setup(r).map_err(err)?;
    let mut files = Vec::new();
    let outcome = if c.trajectory_decimation > 0 {
        let mut rec = TrajectoryRecorder::new(Vec::new(), c.trajectory_decimation);
        let out = dynamics::run_cooling(&sim, &run, Some(&mut rec)).map_err(err)?;
        files.push(Artifact::new("trajectory.csv", rec.into_inner()));
        files.push(Artifact::new("plot_trajectory.py", PLOT_STUB.as_bytes().to_vec()));
        out
    } else {
        dynamics::run_cooling::<Vec<u8>>(&sim, &run, None).map_err(err)?
    };
    let gamma = r.species.cooling_linewidth().map_err(|e| runtime("cooling")(e.to_string()))?;
    let lambda = r.species.cooling_wavelength().map_err(|e| runtime("cooling")(e.to_string()))?;
    let target = budget::doppler_control_velocity(TWO_PI * c.split_hz, lambda).map_err(|e| runtime("cooling")(e.to_string()))?;
    let e = outcome.estimate;
    let v = json!({
        "n_ions": run.n_ions,
        "steps": outcome.final_state.steps,
        "dt_s": run.dt,
        "duration_s": run.duration,
        "warmup_s": run.warmup,
        "mean_velocity_m_s": e.v_mean,
        "target_velocity_m_s": target,
        "t_long_k": e.t_long,
        "t_long_equipartition_k": e.t_long_equipartition,
        "t_trans_k": e.t_trans,
        "doppler_limit_k": dynamics::doppler_limit(gamma),
        "damping_rate_per_s": outcome.damping_rate,
        "samples": e.samples,
        "scatter_events": outcome.final_state.scatter_events,
        "expected_scatter_events": outcome.final_state.expected_scatter,
    });
    files.push(Artifact::json("cooling.json", &v));
    Ok((v, files))
}

const PLOT_STUB: &str = "\
# Plot the trajectory written by `ringqc cool`.
import sys

import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv(sys.argv[1] if len(sys.argv) > 1 else \"trajectory.csv\")
fig, ax = plt.subplots(2, 1, sharex=True)
for ion, g in df.groupby(\"ion\"):
    ax[0].plot(g.time_s * 1e3, g.vz_m_s, lw=0.5, label=f\"ion {ion}\")
    ax[1].plot(g.time_s * 1e3, g.x_m * 1e6, lw=0.5)
ax[0].set_ylabel(\"v_z (m/s)\")
ax[1].set_ylabel(\"x (um)\")
ax[1].set_xlabel(\"t (ms)\")
plt.savefig(\"trajectory.png\", dpi=150)
";

fn stray_map(r: &Resolved) -> StrayFieldMap {
    let s = r.config.stray.as_ref().expect("checked by caller");
    StrayFieldMap { circumference: r.ring.circumference, components: s.components.clone(), compensation: Vec::new() }
}

fn run_stray(r: &Resolved) -> Result<(Value, Vec<Artifact>), CliError> {
    let s = r.config.stray.as_ref().expect("checked by caller");
    let err = |e: dynamics::DynamicsError| runtime("stray")(e.to_string());
    let map = stray_map(r);
    let c = map.circumference;
    let sensors: Vec<f64> = (0..s.sensors).map(|i| c * i as f64 / s.sensors as f64).collect();
    let (raw_pos, raw_max) = map.max_residual();
    let (compensated, report) = dynamics::compensate_stray(&map, &sensors, s.target_residual).map_err(err)?;
    let dx = dynamics::residual_displacements(&compensated, &r.species, r.ring.secular_freq_x, &[report.worst_position])
        .map_err(err)?;
    let v = json!({
        "sensors": report.sensors,
        "uncompensated_max_field_v_m": raw_max,
        "uncompensated_worst_position_m": raw_pos,
        "max_residual_field_v_m": report.max_residual_field,
        "worst_position_m": report.worst_position,
        "worst_displacement_m": dx[0],
        "target_residual_v_m": report.target_residual,
        "meets_target": report.meets_target,
    });
    let mut csv = String::from("arc_m,field_x_v_m,field_y_v_m,field_z_v_m\n");
    for k in 0..512 {
        let sa = c * k as f64 / 512.0;
        let f = compensated.field(sa);
        csv.push_str(&format!("{sa},{},{},{}\n", f[0], f[1], f[2]));
    }
    Ok((v.clone(), vec![Artifact::json("stray.json", &v), Artifact::new("stray_residual.csv", csv.into_bytes())]))
}

fn run_gates(r: &Resolved) -> Result<(Value, Vec<Artifact>), CliError> {
    let g = r.config.gates.as_ref().expect("checked by caller");
    let err = |e: GateError| runtime("gates")(e.to_string());
    let velocity = physcore::beam_velocity(&r.ring, &r.species);
    let spacing = budget::ion_spacing(&r.species, r.ring.secular_freq_z).map_err(|e| runtime("gates")(e.to_string()))?;
    let mut files = Vec::new();
    let mut v = json!({});
    v["beam_velocity_m_s"] = json!(velocity);
    v["ion_spacing_m"] = json!(spacing);
    if r.species.reference_rabi().is_ok() {
        let waist = r.config.budget.as_ref().map_or(10e-6, |b| b.beam_waist);
        let sw = budget::switching_pulse_requirements(&r.species, g.switching_pulse_length)
            .map_err(|e| runtime("gates")(e.to_string()))?;
        let mut gate_times = serde_json::Map::new();
        for &n in &g.n_ions {
            let t = if velocity > 0.0 {
                let req = SwitchingRequest { pulse_length: g.switching_pulse_length, eta: g.eta, n_ions: n, velocity, spacing, waist };
                gates::switching_budget(&r.species, &req).map_err(err)?.n_ion_gate_time
            } else {
                budget::n_ion_gate_time(sw.rabi_freq, g.eta, n).map_err(|e| runtime("gates")(e.to_string()))?
            };
            gate_times.insert(format!("n{n}"), json!(t));
        }
        v["switching"] = json!({
            "pulse_length_s": g.switching_pulse_length,
            "rabi_frequency_rad_s": sw.rabi_freq,
            "rabi_frequency_hz": sw.rabi_freq / TWO_PI,
            "intensity_w_m2": sw.required_intensity,
            "eta": g.eta,
            "gate_time_s": gate_times,
        });
    } else {
        v["switching"] = json!(format!("skipped: species `{}` has no reference Rabi data", r.species.name));
    }
    let rate = match g.arrival_rate_hz {
        Some(f) => f,
        None if velocity > 0.0 => velocity / spacing,
        None => return Err(invalid("gates.arrival_rate_hz is required for a ring at rest")),
    };
    v["arrival_rate_hz"] = json!(rate);
    match gates::schedule_pulses(rate, &g.targets, g.pulse_length, g.rise_fall) {
        Ok(train) => {
            let mut csv = Vec::new();
            train.write_csv(&mut csv).map_err(|e| runtime("gates")(e.to_string()))?;
            files.push(Artifact::new("pulses.csv", csv));
            v["schedule"] = json!({
                "status": "ok",
                "period_s": train.period,
                "pulses": train.pulses.len(),
                "peak_rabi_rad_s": train.pulses.first().map_or(0.0, |p| p.peak_rabi),
            });
        }
        Err(GateError::Crosstalk { period, max_pulse_length, .. }) => {
            v["schedule"] = json!({
                "status": "crosstalk",
                "period_s": period,
                "max_pulse_length_s": max_pulse_length,
            });
        }
        Err(e) => return Err(err(e)),
    }
    if let Some(p) = &g.piecewise {
        let revolution = match p.revolution_period {
            Some(t) => t,
            None if velocity > 0.0 => r.ring.circumference / velocity,
            None => return Err(invalid("gates.piecewise.revolution_period is required for a ring at rest")),
        };
        let plan = gates::plan_piecewise_gate(p.target_angle, p.max_angle_per_pass, revolution)
            .map_err(err)?
            .with_coherence_time(p.coherence_time);
        let exec = plan.execute(gates::QubitState::ground(), Envelope::Rectangular { duration: 1e-6 }).map_err(err)?;
        v["piecewise"] = json!({
            "target_angle_rad": plan.target_angle,
            "passes": plan.passes,
            "fragment_rad": plan.fragments.first().copied().unwrap_or(0.0),
            "accumulated_rad": plan.accumulated.last().copied().unwrap_or(0.0),
            "wall_clock_s": plan.wall_clock,
            "contrast": exec.contrast,
            "excited_population": exec.excited_population,
        });
    }
    files.push(Artifact::json("gates.json", &v));
    Ok((v, files))
}

fn run_tracking(r: &Resolved) -> Result<(Value, Vec<Artifact>), CliError> {
    let t = r.config.tracking.as_ref().expect("checked by caller");
    let err = |e: tracking::TrackingError| runtime("tracking")(e.to_string());
    let seed = r.seed ^ SEED_TRACKING;
    let start = tracking::load_pattern(t.n_ions, t.dark_fraction, seed).map_err(err)?;
    let required = tracking::min_unique_window(start.pattern(), t.circular);
    let events = tracking::sample_events(t.n_ions, t.events, t.event_rate_hz, t.loss_fraction, seed.wrapping_add(1)).map_err(err)?;
    let mut believed = start.clone();
    let mut truth = start.clone();
    let mut detections = Vec::new();
    for e in &events {
        truth = truth.apply_event(e).map_err(err)?;
        let pos = match e.kind {
            tracking::EventKind::Loss { position } => position,
            tracking::EventKind::Reorder { a, .. } => a,
        };
        let window = required.map_or(truth.len(), |l| (l + t.window_margin).min(truth.len()));
        let first = pos.saturating_sub(window / 2).min(truth.len().saturating_sub(window));
        let frame = truth.observe(first, window, t.circular, e.time);
        let d = match tracking::detect_mismatch(&believed, &frame) {
            Ok(d) => d,
            Err(tracking::TrackingError::Ambiguous { .. }) => {
                detections.push(json!({"time_s": e.time, "event": e.to_string(), "status": "ambiguous"}));
                believed = truth.clone();
                continue;
            }
            Err(other) => return Err(err(other)),
        };
        let entry = match &d {
            Detection::Consistent => json!({"time_s": e.time, "event": e.to_string(), "status": "consistent"}),
            Detection::Mismatch { kind, affected, .. } => json!({
                "time_s": e.time,
                "event": e.to_string(),
                "status": "mismatch",
                "kind": kind,
                "affected": affected,
            }),
        };
        detections.push(entry);
        // a flagged mismatch resynchronizes the belief, with the affected
        // labels re-encoded; an unseen event stays in the truth only
        if let Detection::Mismatch { affected, .. } = d {
            believed = truth.reencode(&affected);
            truth = believed.clone();
        }
    }
    let mut v = json!({
        "n_ions": t.n_ions,
        "dark_fraction": t.dark_fraction,
        "dark_count": start.dark_count(),
        "min_unique_window": required,
        "events": events.len(),
        "final_generation": believed.generation(),
        "orphaned_labels": believed.orphaned(),
        "detections": detections,
    });
    if t.sweep_trials > 0 {
        let sweep = tracking::window_sweep(t.n_ions, t.dark_fraction, seed.wrapping_add(2), t.sweep_trials).map_err(err)?;
        v["window_sweep"] = json!({
            "trials": t.sweep_trials,
            "median": sweep.median,
            "entropy_floor": sweep.entropy_floor,
        });
    }
    let files = vec![
        Artifact::json("tracking.json", &v),
        Artifact::new("pattern.txt", format!("{}\n", tracking::pattern_to_text(start.pattern())).into_bytes()),
        Artifact::new("events.log", tracking::write_event_log(&events).into_bytes()),
    ];
    Ok((v, files))
}

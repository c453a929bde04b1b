//! Recomputes every quoted figure from the model functions and compares.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use ringqc::budget::{self, notes, RingTemperatures, PALLAS_TEMPERATURES};
use ringqc::physcore::{self, constants, load_species, IonSpecies, RingConfig};

use crate::CliError;

const TWO_PI: f64 = 2.0 * PI;
const UM: f64 = 1e-6;
const W_PER_MM2: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceProfile {
    Default,
    Strict,
}

impl ToleranceProfile {
    fn scale(self) -> f64 {
        match self {
            ToleranceProfile::Default => 1.0,
            ToleranceProfile::Strict => 0.5,
        }
    }
}

impl std::str::FromStr for ToleranceProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "default" => Ok(Self::Default),
            "strict" => Ok(Self::Strict),
            other => Err(format!("unknown tolerance profile `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Match { tolerance: f64, pass: bool },
    PaperDiscrepancy { note: String },
    NotReproducible { note: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperCheckRow {
    pub id: String,
    /// What is being checked, by topic.
    pub claim: String,
    pub unit: String,
    pub quoted: f64,
    pub computed: f64,
    pub relative_deviation: f64,
    #[serde(flatten)]
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl PaperCheckRow {
    pub fn failed(&self) -> bool {
        matches!(self.status, Status::Match { pass: false, .. })
    }
}

struct Table {
    rows: Vec<PaperCheckRow>,
    scale: f64,
}

impl Table {
    fn row(&mut self, id: &str, claim: &str, unit: &str, quoted: f64, computed: f64, status: Status) -> &mut PaperCheckRow {
        let relative_deviation = if quoted == 0.0 { computed.abs() } else { ((computed - quoted) / quoted).abs() };
        self.rows.push(PaperCheckRow {
            id: id.into(),
            claim: claim.into(),
            unit: unit.into(),
            quoted,
            computed,
            relative_deviation,
            status,
            detail: None,
        });
        self.rows.last_mut().expect("just pushed")
    }

    fn matches(&mut self, id: &str, claim: &str, unit: &str, quoted: f64, computed: f64, tolerance: f64) -> &mut PaperCheckRow {
        let tolerance = tolerance * self.scale;
        let r = self.row(id, claim, unit, quoted, computed, Status::Match { tolerance, pass: true });
        let pass = r.relative_deviation <= tolerance;
        r.status = Status::Match { tolerance, pass };
        r
    }

    fn discrepancy(&mut self, id: &str, claim: &str, unit: &str, quoted: f64, computed: f64, note: &str) {
        self.row(id, claim, unit, quoted, computed, Status::PaperDiscrepancy { note: note.into() });
    }
}

fn species(name: &str) -> Result<IonSpecies, CliError> {
    load_species(name).map_err(|e| CliError::Runtime(e.to_string()))
}

fn b<T>(r: Result<T, budget::BudgetError>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Runtime(format!("budget: {e}")))
}

/// The full reproduction table. Rows are in a fixed order.
pub fn paper_check(profile: ToleranceProfile) -> Result<Vec<PaperCheckRow>, CliError> {
    let ca = species("Ca-40")?;
    let ba = species("Ba-138")?;
    let mg = species("Mg-24")?;
    let mut t = Table { rows: Vec::new(), scale: profile.scale() };

    let w_x = TWO_PI * 200e3;
    let rf = TWO_PI * 10e6;
    let dx_ca = b(budget::micromotion_displacement(10.0, &ca, w_x))?;
    let dx_ba = b(budget::micromotion_displacement(10.0, &ba, w_x))?;
    t.matches("displacement_ca", "stray-field equilibrium shift, Ca-40, 10 V/m at 2pi x 200 kHz", "um", 15.0, dx_ca / UM, 0.05);
    t.matches("displacement_ba", "stray-field equilibrium shift, Ba-138, 10 V/m at 2pi x 200 kHz", "um", 4.5, dx_ba / UM, 0.05);

    let mm_ca = b(budget::micromotion_amplitude_energy(dx_ca, w_x, rf, ca.isotope_mass))?;
    let mm_ba = b(budget::micromotion_amplitude_energy(dx_ba, w_x, rf, ba.isotope_mass))?;
    t.matches("micromotion_amplitude_ca", "excess micromotion amplitude, Ca-40, 2pi x 10 MHz drive", "um", 0.45, mm_ca.amplitude / UM, 0.10);
    t.matches("micromotion_amplitude_ba", "excess micromotion amplitude, Ba-138, 2pi x 10 MHz drive", "um", 0.13, mm_ba.amplitude / UM, 0.10);

    let ring = RingConfig::pallas();
    let v = physcore::beam_velocity(&ring, &mg);
    t.matches("beam_velocity", "orbital velocity of Mg-24 at 1 eV", "km/s", 2.8, v / 1e3, 0.02);
    let spacing = b(budget::ion_spacing(&mg, TWO_PI * 180e3))?;
    t.matches("ion_spacing", "two-ion spacing, Mg-24 at w_z = 2pi x 180 kHz", "um", 20.0, spacing / UM, 0.10);
    let z_r = b(budget::rayleigh_range(10e-6, 397e-9))?;
    t.matches("rayleigh_range", "Rayleigh range of a 10 um waist at 397 nm", "mm", 0.8, z_r / 1e-3, 0.02);

    let quoted_timing = b(budget::pulse_timing(10e-6, 2.8e3, 20e-6))?;
    let model_timing = b(budget::pulse_timing(10e-6, v, spacing))?;
    t.matches("arrival_rate", "ion arrival rate at the gate beam, quoted 2.8 km/s and 20 um", "MHz", 140.0, quoted_timing.arrival_rate / 1e6, 0.02)
        .detail = Some(format!(
        "with the unrounded velocity {:.2} m/s and spacing {:.4} um the rate is {:.2} MHz",
        v,
        spacing / UM,
        model_timing.arrival_rate / 1e6
    ));

    let pi_ca = b(budget::reference_pi_time(&ca))?;
    let pi_ba = b(budget::reference_pi_time(&ba))?;
    t.matches("pi_time_ca", "reference pi time, Ca-40 at 5000 W/mm^2", "us", 0.5, pi_ca / UM, 0.01);
    t.matches("pi_time_ba", "reference pi time, Ba-138 at 250 mW/mm^2", "us", 11.6, pi_ba / UM, 0.01);
    let req_ca = b(budget::pi_pulse_requirements(&ca, 4.6e-9))?;
    let req_ba = b(budget::pi_pulse_requirements(&ba, 4.6e-9))?;
    t.matches("pi_intensity_ca", "intensity for a 4.6 ns pi pulse, Ca-40", "W/mm^2", 540_000.0, req_ca.required_intensity / W_PER_MM2, 0.03);
    t.matches("pi_intensity_ba", "intensity for a 4.6 ns pi pulse, Ba-138", "W/mm^2", 600.0, req_ba.required_intensity / W_PER_MM2, 0.10);

    let sw = b(budget::switching_pulse_requirements(&ca, 4.6e-9))?;
    t.matches("switching_rabi", "Rabi frequency of a 4.6 ns 2pi switching pulse", "MHz", 218.0, sw.rabi_freq / TWO_PI / 1e6, 0.01);
    let g100 = b(budget::n_ion_gate_time(sw.rabi_freq, 0.2, 100.0))?;
    let g1e5 = b(budget::n_ion_gate_time(sw.rabi_freq, 0.2, 1e5))?;
    t.matches("gate_time_n100", "sideband gate time for N = 100, eta = 0.2", "ns", 230.0, g100 / 1e-9, 0.03);
    t.matches("gate_time_n1e5", "sideband gate time for N = 1e5, eta = 0.2", "us", 7.3, g1e5 / UM, 0.03);

    let band = b(budget::phonon_band_budget(1e6, 100_000))?;
    t.matches("mode_spacing", "mean mode spacing, 1 MHz band over 1e5 modes", "Hz", 10.0, band.mode_spacing, 1e-12);
    t.matches("sideband_floor", "resolved-sideband time floor, 1 MHz band over 1e5 modes", "s", 0.1, band.min_resolved_sideband_time, 1e-12);

    let ident = b(budget::apparent_ring_temperatures(&ring, &ring, PALLAS_TEMPERATURES))?;
    t.matches("pallas_t_trans", "apparent transverse temperature of the reference ring", "mK", 1.0, ident.transverse / 1e-3, 1e-12);
    t.matches("pallas_t_long", "apparent longitudinal temperature of the reference ring", "mK", 0.2, ident.longitudinal / 1e-3, 1e-12);
    let mut scaled = ring.clone();
    scaled.horizontal_tune *= 2.0;
    scaled.cell_phase_advance *= 2.0;
    let s = b(budget::apparent_ring_temperatures(&scaled, &ring, PALLAS_TEMPERATURES))?;
    let expect = RingTemperatures {
        longitudinal: PALLAS_TEMPERATURES.longitudinal / 4.0,
        transverse: PALLAS_TEMPERATURES.transverse * 4.0,
    };
    t.matches("scaled_t_long", "longitudinal temperature with the tune doubled (1/Q^2)", "mK", expect.longitudinal / 1e-3, s.longitudinal / 1e-3, 1e-12);
    t.matches("scaled_t_trans", "transverse temperature with the cell phase advance doubled (mu^2)", "mK", expect.transverse / 1e-3, s.transverse / 1e-3, 1e-12);

    let loc = b(budget::localization_length(20e-6, ca.isotope_mass, TWO_PI * 1e6))?;
    t.discrepancy("localization", "thermal localization at 20 uK, Ca-40 at 1 MHz", "nm", 47.0, loc / 1e-9, notes::LOCALIZATION_47NM);
    let v80 = b(budget::doppler_control_velocity(TWO_PI * 80e6, 397e-9))?;
    t.discrepancy("doppler_split", "orbital velocity set by an 80 MHz cooler split at 397 nm", "m/s", 100.0, v80, notes::DOPPLER_SPLIT_80MHZ);
    t.discrepancy(
        "pulse_length",
        "transit pulse length w0/(2v), 10 um at 2.8 km/s",
        "ns",
        4.6,
        quoted_timing.formula_pulse_length / 1e-9,
        notes::PULSE_LENGTH_4P6NS,
    );
    let ke_mev = mm_ca.mean_kinetic_energy / constants::ELEMENTARY_CHARGE * 1e3;
    t.discrepancy("micromotion_energy", "mean micromotion kinetic energy, Ca-40", "meV", 16.0, ke_mev, notes::MICROMOTION_ENERGY);
    t.rows.last_mut().expect("pushed").detail = Some(format!(
        "quoted equivalent temperature 190 mK; model gives {:.4} K",
        mm_ca.equivalent_temperature
    ));

    let t28 = b(budget::transverse_temperature_from_size(7e-6, mg.isotope_mass, TWO_PI * 110e3))?;
    t.row(
        "transverse_28mk",
        "transverse temperature of a 7 um beam",
        "mK",
        28.0,
        t28 / 1e-3,
        Status::NotReproducible { note: notes::TRANSVERSE_28MK.into() },
    );
    Ok(t.rows)
}

/// Error out when any `match` row is outside its tolerance.
pub fn check(rows: &[PaperCheckRow]) -> Result<(), CliError> {
    let failed: Vec<&str> = rows.iter().filter(|r| r.failed()).map(|r| r.id.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("rows outside tolerance: {}", failed.join(", "))))
    }
}

pub fn to_json(rows: &[PaperCheckRow], profile: ToleranceProfile) -> serde_json::Value {
    serde_json::json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "tolerance_profile": profile,
        "rows": rows,
    })
}

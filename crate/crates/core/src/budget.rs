//! Closed-form feasibility estimates.
//!
//! Every function here is pure. Inputs are SI; the only failure mode is a
//! domain error on a nonpositive argument where the formula needs a
//! positive one.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physcore::constants::{
    BOLTZMANN, REDUCED_PLANCK, SPEED_OF_LIGHT, VACUUM_PERMITTIVITY,
};
use crate::physcore::{IonSpecies, PhysError, RingConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("domain error: {name} must be {requirement}, got {value}")]
    Domain {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Species(#[from] PhysError),
    #[error("report entry `{0}` is not finite")]
    NonFinite(String),
}

fn positive(name: &'static str, value: f64) -> Result<f64, BudgetError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(BudgetError::Domain {
            name,
            requirement: "positive",
            value,
        })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<f64, BudgetError> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(BudgetError::Domain {
            name,
            requirement: "non-negative",
            value,
        })
    }
}

/// Wavenumber 2π/λ.
pub fn wavenumber(wavelength: f64) -> f64 {
    2.0 * PI / wavelength
}

/// Thermal localization length Δz = sqrt(2 k_B T / (m ω²)).
pub fn localization_length(temperature: f64, mass: f64, mode_freq: f64) -> Result<f64, BudgetError> {
    let t = non_negative("temperature", temperature)?;
    let m = positive("mass", mass)?;
    let w = positive("mode_freq", mode_freq)?;
    Ok((2.0 * BOLTZMANN * t / (m * w * w)).sqrt())
}

/// Inverse of [`localization_length`]: T = m ω² Δz² / (2 k_B).
pub fn transverse_temperature_from_size(size: f64, mass: f64, mode_freq: f64) -> Result<f64, BudgetError> {
    let dz = non_negative("size", size)?;
    let m = positive("mass", mass)?;
    let w = positive("mode_freq", mode_freq)?;
    Ok(m * w * w * dz * dz / (2.0 * BOLTZMANN))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambDickeParams {
    /// ω_R = ħk²/(2m), rad/s
    pub recoil_freq: f64,
    pub mode_freq: f64,
    pub eta: f64,
    /// rad/m
    pub wavevector: f64,
}

impl LambDickeParams {
    /// A user-chosen η (e.g. 0.2 for gate-time scaling). The recoil
    /// frequency is back-filled so that η = sqrt(ω_R/ω_z) still holds.
    pub fn with_eta(eta: f64, mode_freq: f64) -> Result<Self, BudgetError> {
        let eta = positive("eta", eta)?;
        let w = positive("mode_freq", mode_freq)?;
        Ok(Self {
            recoil_freq: eta * eta * w,
            mode_freq: w,
            eta,
            wavevector: f64::NAN,
        })
    }
}

pub fn lamb_dicke(species: &IonSpecies, laser_wavelength: f64, mode_freq: f64) -> Result<LambDickeParams, BudgetError> {
    let lambda = positive("laser_wavelength", laser_wavelength)?;
    let w = positive("mode_freq", mode_freq)?;
    let k = wavenumber(lambda);
    let recoil = REDUCED_PLANCK * k * k / (2.0 * species.isotope_mass);
    Ok(LambDickeParams {
        recoil_freq: recoil,
        mode_freq: w,
        eta: (recoil / w).sqrt(),
        wavevector: k,
    })
}

/// Two-ion equilibrium separation Δ = ∛(q²/(2π ε₀ m ω_z²)).
pub fn ion_spacing(species: &IonSpecies, mode_freq_z: f64) -> Result<f64, BudgetError> {
    let w = positive("mode_freq_z", mode_freq_z)?;
    let q = species.charge;
    Ok((q * q / (2.0 * PI * VACUUM_PERMITTIVITY * species.isotope_mass * w * w)).cbrt())
}

/// Equilibrium shift Δx = qE/(m ω_x²) under a stray DC field.
pub fn micromotion_displacement(stray_field: f64, species: &IonSpecies, secular_freq_x: f64) -> Result<f64, BudgetError> {
    let w = positive("secular_freq_x", secular_freq_x)?;
    Ok(species.charge * stray_field / (species.isotope_mass * w * w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Micromotion {
    /// Mathieu q = 2√2 ω/Ω_RF
    pub q: f64,
    /// m
    pub amplitude: f64,
    /// J, time-averaged over one RF period
    pub mean_kinetic_energy: f64,
    /// ⟨KE⟩/k_B, K
    pub equivalent_temperature: f64,
}

/// Excess micromotion from a displaced equilibrium, lowest-order Mathieu
/// model: x_μ = qΔx/2 and ⟨KE⟩ = m x_μ² Ω_RF² / 4.
pub fn micromotion_amplitude_energy(
    displacement: f64,
    secular_freq: f64,
    rf_freq: f64,
    mass: f64,
) -> Result<Micromotion, BudgetError> {
    let w = positive("secular_freq", secular_freq)?;
    let rf = positive("rf_freq", rf_freq)?;
    let m = positive("mass", mass)?;
    if rf <= w {
        return Err(BudgetError::Domain {
            name: "rf_freq",
            requirement: "greater than the secular frequency",
            value: rf,
        });
    }
    let q = 2.0 * 2f64.sqrt() * w / rf;
    let amplitude = q * displacement.abs() / 2.0;
    let ke = m * amplitude * amplitude * rf * rf / 4.0;
    Ok(Micromotion {
        q,
        amplitude,
        mean_kinetic_energy: ke,
        equivalent_temperature: ke / BOLTZMANN,
    })
}

/// Orbital velocity set by two counter-propagating coolers split by Δω:
/// kv = Δω/2.
pub fn doppler_control_velocity(delta_omega: f64, cooling_wavelength: f64) -> Result<f64, BudgetError> {
    let lambda = positive("cooling_wavelength", cooling_wavelength)?;
    Ok(delta_omega / (2.0 * wavenumber(lambda)))
}

/// Detuning split needed for a target orbital velocity, Δω = 2kv.
pub fn doppler_split_for_velocity(velocity: f64, cooling_wavelength: f64) -> Result<f64, BudgetError> {
    let lambda = positive("cooling_wavelength", cooling_wavelength)?;
    Ok(2.0 * wavenumber(lambda) * velocity)
}

/// z_R = π w₀² / λ.
pub fn rayleigh_range(waist: f64, wavelength: f64) -> Result<f64, BudgetError> {
    let w0 = positive("waist", waist)?;
    let lambda = positive("wavelength", wavelength)?;
    Ok(PI * w0 * w0 / lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseTiming {
    /// w₀/(2v), s
    pub formula_pulse_length: f64,
    /// spacing / v, s
    pub arrival_period: f64,
    /// Hz
    pub arrival_rate: f64,
}

pub fn pulse_timing(waist: f64, velocity: f64, spacing: f64) -> Result<PulseTiming, BudgetError> {
    let w0 = positive("waist", waist)?;
    let v = positive("velocity", velocity)?;
    let d = positive("spacing", spacing)?;
    let period = d / v;
    Ok(PulseTiming {
        formula_pulse_length: w0 / (2.0 * v),
        arrival_period: period,
        arrival_rate: 1.0 / period,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseRequirement {
    /// rad/s
    pub rabi_freq: f64,
    /// W/m²
    pub required_intensity: f64,
}

/// Intensity for a target π-pulse duration, scaling the species' reference
/// Rabi measurement linearly with intensity (quadrupole transition).
pub fn pi_pulse_requirements(species: &IonSpecies, target_pulse: f64) -> Result<PulseRequirement, BudgetError> {
    let tau = positive("target_pulse", target_pulse)?;
    let reference = species.reference_rabi()?;
    let rabi = PI / tau;
    Ok(PulseRequirement {
        rabi_freq: rabi,
        required_intensity: reference.intensity * rabi / reference.rabi_frequency,
    })
}

/// Same scaling for a 2π (switching) pulse: Ω = 2π/τ.
pub fn switching_pulse_requirements(species: &IonSpecies, pulse_length: f64) -> Result<PulseRequirement, BudgetError> {
    let tau = positive("pulse_length", pulse_length)?;
    let reference = species.reference_rabi()?;
    let rabi = 2.0 * PI / tau;
    Ok(PulseRequirement {
        rabi_freq: rabi,
        required_intensity: reference.intensity * rabi / reference.rabi_frequency,
    })
}

/// π-time at the species' reference intensity.
pub fn reference_pi_time(species: &IonSpecies) -> Result<f64, BudgetError> {
    Ok(PI / species.reference_rabi()?.rabi_frequency)
}

/// Sideband-limited gate time for an N-ion crystal: Ω_N = ηΩ/√N, t = 2π/Ω_N.
pub fn n_ion_gate_time(single_ion_rabi: f64, eta: f64, n_ions: f64) -> Result<f64, BudgetError> {
    let rabi = positive("single_ion_rabi", single_ion_rabi)?;
    let eta = positive("eta", eta)?;
    let n = positive("n_ions", n_ions)?;
    Ok(2.0 * PI * n.sqrt() / (eta * rabi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandBudget {
    /// Hz
    pub mode_spacing: f64,
    /// s
    pub min_resolved_sideband_time: f64,
}

pub fn phonon_band_budget(band_width: f64, n_modes: u64) -> Result<BandBudget, BudgetError> {
    let width = positive("band_width", band_width)?;
    if n_modes == 0 {
        return Err(BudgetError::Domain {
            name: "n_modes",
            requirement: "at least 1",
            value: 0.0,
        });
    }
    let spacing = width / n_modes as f64;
    Ok(BandBudget {
        mode_spacing: spacing,
        min_resolved_sideband_time: 1.0 / spacing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingTemperatures {
    /// K
    pub longitudinal: f64,
    /// K
    pub transverse: f64,
}

/// Apparent temperatures of `cfg` relative to a reference machine whose
/// temperatures are known: T∥ ∝ 1/Q_x², T⊥ ∝ μ_cell².
pub fn apparent_ring_temperatures(
    cfg: &RingConfig,
    reference: &RingConfig,
    reference_temps: RingTemperatures,
) -> Result<RingTemperatures, BudgetError> {
    let q = positive("horizontal_tune", cfg.horizontal_tune)?;
    let q_ref = positive("reference horizontal_tune", reference.horizontal_tune)?;
    let mu = positive("cell_phase_advance", cfg.cell_phase_advance)?;
    let mu_ref = positive("reference cell_phase_advance", reference.cell_phase_advance)?;
    Ok(RingTemperatures {
        longitudinal: reference_temps.longitudinal * (q_ref / q).powi(2),
        transverse: reference_temps.transverse * (mu / mu_ref).powi(2),
    })
}

/// Reported apparent temperatures of the PALLAS crystalline beam.
pub const PALLAS_TEMPERATURES: RingTemperatures = RingTemperatures {
    longitudinal: 0.2e-3,
    transverse: 1e-3,
};

/// Transition frequency ν = c/λ, Hz.
pub fn transition_frequency(wavelength: f64) -> Result<f64, BudgetError> {
    Ok(SPEED_OF_LIGHT / positive("wavelength", wavelength)?)
}

/// Explanations attached to figures whose quoted value disagrees with the
/// expression it is quoted next to.
pub mod notes {
    pub const LOCALIZATION_47NM: &str = "quoted 47 nm is not reproduced by sqrt(2 k_B T/(m w_z^2)) \
        with T = 20 uK and the tabulated species frequencies (14.5 nm Ca-40 at 1 MHz, 31.3 nm \
        Ba-138 at 0.25 MHz); Ca-40 at w_z ~ 2pi x 0.31 MHz would give 47 nm but those inputs are \
        not stated";
    pub const DOPPLER_SPLIT_80MHZ: &str = "kv = dw/2 at 397 nm pairs 100 m/s with dw = 2pi x 504 MHz, \
        and 80 MHz with 15.9 m/s; the quoted 100 m/s <-> 80 MHz pairing contradicts the formula";
    pub const PULSE_LENGTH_4P6NS: &str = "tau = w0/(2v) with w0 = 10 um and v = 2.8 km/s is 1.79 ns, \
        not 4.6 ns; downstream gate estimates take the pulse length as an explicit input";
    pub const MICROMOTION_ENERGY: &str = "lowest-order Mathieu model gives <KE> = m x^2 W_rf^2/4 = \
        0.076 meV (0.89 K) for the 0.43 um Ca-40 amplitude, about 200x below the quoted 16 meV; \
        the quoted 16 meV and 190 mK are also mutually inconsistent (16 meV/k_B = 186 K)";
    pub const TRANSVERSE_28MK: &str = "28 mK for a 7 um beam depends on an unstated mass and \
        frequency; Mg-24 at 2pi x 110 kHz gives 33.8 mK";
}

/// One named scalar with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub formula: String,
    pub inputs: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paper_discrepancy: Option<String>,
}

/// Named scalar results. Serializes to a flat JSON object keyed by entry
/// name, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BudgetReport {
    entries: Vec<BudgetEntry>,
}

impl BudgetReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: &str,
        value: f64,
        unit: &str,
        formula: &str,
        inputs: String,
    ) -> Result<&mut BudgetEntry, BudgetError> {
        if !value.is_finite() {
            return Err(BudgetError::NonFinite(name.to_string()));
        }
        self.entries.push(BudgetEntry {
            name: name.to_string(),
            value,
            unit: unit.to_string(),
            formula: formula.to_string(),
            inputs,
            paper_discrepancy: None,
        });
        Ok(self.entries.last_mut().expect("just pushed"))
    }

    pub fn entries(&self) -> &[BudgetEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&BudgetEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for e in &self.entries {
            let mut obj = serde_json::Map::new();
            obj.insert("value".into(), e.value.into());
            obj.insert("unit".into(), e.unit.clone().into());
            obj.insert("formula".into(), e.formula.clone().into());
            obj.insert("inputs".into(), e.inputs.clone().into());
            if let Some(note) = &e.paper_discrepancy {
                obj.insert("paper_discrepancy".into(), note.clone().into());
            }
            map.insert(e.name.clone(), obj.into());
        }
        map.into()
    }
}

impl Serialize for BudgetReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

/// Inputs for the standard feasibility report of one species on one ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetInputs {
    /// Lamb-Dicke temperature used for the localization estimate, K.
    pub ld_temperature: f64,
    /// Stray DC field, V/m.
    pub stray_field: f64,
    /// Gate beam waist, m.
    pub beam_waist: f64,
    /// Single-qubit gate pulse length, s.
    pub gate_pulse_length: f64,
    /// Lamb-Dicke parameter used for N-ion scaling; computed from the
    /// qubit wavelength and ω_z when absent.
    pub eta: Option<f64>,
    /// Crystal sizes at which to evaluate the N-ion gate time.
    pub gate_ion_counts: Vec<u64>,
    /// Phonon band width, Hz.
    pub band_width: f64,
    /// Detuning split between the two tangential coolers, rad/s.
    pub cooler_split: f64,
}

impl Default for BudgetInputs {
    fn default() -> Self {
        Self {
            ld_temperature: 20e-6,
            stray_field: 10.0,
            beam_waist: 10e-6,
            gate_pulse_length: 4.6e-9,
            eta: None,
            gate_ion_counts: vec![100, 100_000],
            band_width: 1e6,
            cooler_split: 2.0 * PI * 80e6,
        }
    }
}

/// Evaluate every closed-form estimate that applies to `species` on `ring`.
/// Entries that need optical data the species lacks are skipped.
pub fn standard_report(species: &IonSpecies, ring: &RingConfig, inputs: &BudgetInputs) -> Result<BudgetReport, BudgetError> {
    let mut r = BudgetReport::new();
    let m = species.isotope_mass;
    let wx = ring.secular_freq_x;
    let wz = ring.secular_freq_z;
    let fmt_hz = |w: f64| format!("{:.6e} Hz", w / (2.0 * PI));

    let v = crate::physcore::beam_velocity(ring, species);
    r.push("beam_velocity", v, "m/s", "sqrt(2 E_kin / m)",
        format!("E_kin = {:.6e} J, m = {:.6e} kg", ring.kinetic_energy, m))?;

    let dz = localization_length(inputs.ld_temperature, m, wz)?;
    r.push("localization_length", dz, "m", "sqrt(2 k_B T / (m w_z^2))",
        format!("T = {:e} K, w_z/2pi = {}", inputs.ld_temperature, fmt_hz(wz)))?
        .paper_discrepancy = Some(notes::LOCALIZATION_47NM.into());

    let spacing = ion_spacing(species, wz)?;
    r.push("ion_spacing", spacing, "m", "cbrt(q^2 / (2 pi eps0 m w_z^2))",
        format!("w_z/2pi = {}", fmt_hz(wz)))?;

    let dx = micromotion_displacement(inputs.stray_field, species, wx)?;
    r.push("micromotion_displacement", dx, "m", "q E / (m w_x^2)",
        format!("E = {} V/m, w_x/2pi = {}", inputs.stray_field, fmt_hz(wx)))?;

    let mm = micromotion_amplitude_energy(dx, wx, ring.rf_drive_freq, m)?;
    let rf_in = format!("dx = {dx:.6e} m, W_rf/2pi = {}", fmt_hz(ring.rf_drive_freq));
    r.push("micromotion_q", mm.q, "1", "2 sqrt(2) w_x / W_rf", rf_in.clone())?;
    r.push("micromotion_amplitude", mm.amplitude, "m", "q dx / 2", rf_in.clone())?;
    r.push("micromotion_kinetic_energy", mm.mean_kinetic_energy, "J", "m x_mu^2 W_rf^2 / 4", rf_in.clone())?
        .paper_discrepancy = Some(notes::MICROMOTION_ENERGY.into());
    r.push("micromotion_equivalent_temperature", mm.equivalent_temperature, "K", "<KE> / k_B", rf_in)?
        .paper_discrepancy = Some(notes::MICROMOTION_ENERGY.into());

    if v > 0.0 {
        let timing = pulse_timing(inputs.beam_waist, v, spacing)?;
        let t_in = format!("w0 = {:e} m, v = {v:.6e} m/s, spacing = {spacing:.6e} m", inputs.beam_waist);
        r.push("formula_pulse_length", timing.formula_pulse_length, "s", "w0 / (2 v)", t_in.clone())?
            .paper_discrepancy = Some(notes::PULSE_LENGTH_4P6NS.into());
        r.push("arrival_period", timing.arrival_period, "s", "spacing / v", t_in.clone())?;
        r.push("arrival_rate", timing.arrival_rate, "Hz", "v / spacing", t_in)?;
    }

    let apparent = apparent_ring_temperatures(ring, &RingConfig::pallas(), PALLAS_TEMPERATURES)?;
    let a_in = format!("Q_x = {}, mu_cell = {:.6} rad, reference PALLAS", ring.horizontal_tune, ring.cell_phase_advance);
    r.push("apparent_longitudinal_temperature", apparent.longitudinal, "K", "T_ref (Q_ref/Q_x)^2", a_in.clone())?;
    r.push("apparent_transverse_temperature", apparent.transverse, "K", "T_ref (mu/mu_ref)^2", a_in)?;

    let band = phonon_band_budget(inputs.band_width, ring.n_ions.saturating_mul(3).max(1))?;
    let b_in = format!("band = {:e} Hz, modes = 3N = {}", inputs.band_width, ring.n_ions.saturating_mul(3));
    r.push("phonon_mode_spacing", band.mode_spacing, "Hz", "band / n_modes", b_in.clone())?;
    r.push("min_resolved_sideband_time", band.min_resolved_sideband_time, "s", "1 / spacing", b_in)?;

    if let Ok(lambda) = species.cooling_wavelength() {
        let vel = doppler_control_velocity(inputs.cooler_split, lambda)?;
        r.push("doppler_control_velocity", vel, "m/s", "dw / (2k)",
            format!("dw/2pi = {}, lambda = {lambda:e} m", fmt_hz(inputs.cooler_split)))?
            .paper_discrepancy = Some(notes::DOPPLER_SPLIT_80MHZ.into());
        r.push("cooling_rayleigh_range", rayleigh_range(inputs.beam_waist, lambda)?, "m", "pi w0^2 / lambda",
            format!("w0 = {:e} m, lambda = {lambda:e} m", inputs.beam_waist))?;
        if let Ok(gamma) = species.cooling_linewidth() {
            r.push("doppler_limit_temperature", REDUCED_PLANCK * gamma / (2.0 * BOLTZMANN), "K",
                "hbar Gamma / (2 k_B)", format!("Gamma = {gamma:.6e} rad/s (external data)"))?;
        }
    }

    if let Ok(lambda) = species.qubit_wavelength() {
        r.push("qubit_transition_frequency", transition_frequency(lambda)?, "Hz", "c / lambda",
            format!("lambda = {lambda:e} m"))?;
        r.push("qubit_rayleigh_range", rayleigh_range(inputs.beam_waist, lambda)?, "m", "pi w0^2 / lambda",
            format!("w0 = {:e} m, lambda = {lambda:e} m", inputs.beam_waist))?;
        let ld = lamb_dicke(species, lambda, wz)?;
        r.push("lamb_dicke_eta", ld.eta, "1", "sqrt(hbar k^2 / (2 m w_z))",
            format!("lambda = {lambda:e} m, w_z/2pi = {}", fmt_hz(wz)))?;
    }

    if species.reference_rabi.is_some() {
        let tau = inputs.gate_pulse_length;
        r.push("reference_pi_time", reference_pi_time(species)?, "s", "pi / W_ref", "reference Rabi pair".into())?;
        let pi_req = pi_pulse_requirements(species, tau)?;
        r.push("pi_pulse_intensity", pi_req.required_intensity, "W/m^2", "I_ref (pi/tau) / W_ref",
            format!("tau = {tau:e} s"))?;
        let sw = switching_pulse_requirements(species, tau)?;
        r.push("switching_rabi_frequency", sw.rabi_freq, "rad/s", "2 pi / tau", format!("tau = {tau:e} s"))?;
        r.push("switching_intensity", sw.required_intensity, "W/m^2", "I_ref (2pi/tau) / W_ref",
            format!("tau = {tau:e} s"))?;
        let eta = match inputs.eta {
            Some(eta) => eta,
            None => lamb_dicke(species, species.qubit_wavelength()?, wz)?.eta,
        };
        for &n in &inputs.gate_ion_counts {
            let t = n_ion_gate_time(sw.rabi_freq, eta, n as f64)?;
            r.push(&format!("gate_time_n{n}"), t, "s", "2 pi sqrt(N) / (eta W)",
                format!("eta = {eta}, N = {n}, W = 2pi/tau"))?;
        }
    }
    Ok(r)
}

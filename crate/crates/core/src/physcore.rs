//! Physical constants, ion species and storage-ring configurations.
//!
//! Everything in here is SI. Conversions to eV, MHz, nm and friends happen
//! only at the command-line boundary.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// CODATA 2018 SI values.
pub mod constants {
    pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
    pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
    pub const BOLTZMANN: f64 = 1.380_649e-23;
    pub const REDUCED_PLANCK: f64 = 1.054_571_817e-34;
    pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
    pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
    /// Coulomb constant 1/(4πε₀).
    pub const COULOMB: f64 = 1.0 / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY);
}

/// The constant set as a value, for code that wants to carry it around.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub elementary_charge: f64,
    pub vacuum_permittivity: f64,
    pub boltzmann: f64,
    pub reduced_planck: f64,
    pub atomic_mass_unit: f64,
}

impl PhysicalConstants {
    pub const CODATA_2018: Self = Self {
        elementary_charge: constants::ELEMENTARY_CHARGE,
        vacuum_permittivity: constants::VACUUM_PERMITTIVITY,
        boltzmann: constants::BOLTZMANN,
        reduced_planck: constants::REDUCED_PLANCK,
        atomic_mass_unit: constants::ATOMIC_MASS_UNIT,
    };
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::CODATA_2018
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysError {
    #[error("unknown species `{0}`")]
    UnknownSpecies(String),
    #[error("invalid species `{name}`: {reason}")]
    InvalidSpecies { name: String, reason: String },
    #[error("invalid ring configuration `{name}`: {reason}")]
    InvalidRing { name: String, reason: String },
    #[error("species `{0}` carries no {1} data")]
    MissingData(String, &'static str),
    #[error("record parse error: {0}")]
    Parse(String),
}

/// A measured Rabi frequency of the qubit transition at a stated intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRabi {
    /// rad/s
    pub rabi_frequency: f64,
    /// W/m²
    pub intensity: f64,
}

/// An ion species. Optical fields are optional so that mass-only records
/// (dark admixture isotopes, Mg-24 in PALLAS) fit the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    pub name: String,
    pub mass_number: u32,
    /// kg
    pub isotope_mass: f64,
    /// C
    pub charge: f64,
    /// Does not fluoresce under the qubit species' cooling light.
    #[serde(default)]
    pub dark: bool,
    /// m
    pub cooling_wavelength: Option<f64>,
    /// m
    pub qubit_wavelength: Option<f64>,
    /// Natural linewidth Γ of the cooling transition, rad/s.
    pub cooling_linewidth: Option<f64>,
    /// s
    pub shelved_lifetime: Option<f64>,
    pub reference_rabi: Option<ReferenceRabi>,
    /// Typical (transverse, longitudinal) secular frequencies, rad/s.
    pub typical_secular: Option<(f64, f64)>,
    /// Where non-trivial data came from.
    #[serde(default)]
    pub provenance: String,
}

impl IonSpecies {
    /// A mass-only, singly charged record.
    pub fn mass_only(name: &str, mass_number: u32, dark: bool) -> Self {
        Self {
            name: name.to_string(),
            mass_number,
            isotope_mass: mass_number as f64 * constants::ATOMIC_MASS_UNIT,
            charge: constants::ELEMENTARY_CHARGE,
            dark,
            cooling_wavelength: None,
            qubit_wavelength: None,
            cooling_linewidth: None,
            shelved_lifetime: None,
            reference_rabi: None,
            typical_secular: None,
            provenance: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), PhysError> {
        let bad = |reason: String| PhysError::InvalidSpecies {
            name: self.name.clone(),
            reason,
        };
        if !(self.isotope_mass > 0.0) || !self.isotope_mass.is_finite() {
            return Err(bad(format!("mass must be positive, got {}", self.isotope_mass)));
        }
        let z = self.charge / constants::ELEMENTARY_CHARGE;
        if !(z >= 0.5) || (z - z.round()).abs() > 1e-9 {
            return Err(bad(format!(
                "charge must be a positive integer multiple of e, got {z} e"
            )));
        }
        for (what, wl) in [
            ("cooling wavelength", self.cooling_wavelength),
            ("qubit wavelength", self.qubit_wavelength),
        ] {
            if let Some(wl) = wl {
                if !(wl > 100e-9 && wl < 10e-6) {
                    return Err(bad(format!("{what} {wl} m outside (100 nm, 10 μm)")));
                }
            }
        }
        if let Some(g) = self.cooling_linewidth {
            if !(g > 0.0) {
                return Err(bad(format!("linewidth must be positive, got {g}")));
            }
        }
        if let Some(r) = self.reference_rabi {
            if !(r.intensity > 0.0) || !(r.rabi_frequency > 0.0) {
                return Err(bad("reference Rabi pair must be positive".into()));
            }
        }
        Ok(())
    }

    /// Integer charge state.
    pub fn charge_number(&self) -> i32 {
        (self.charge / constants::ELEMENTARY_CHARGE).round() as i32
    }

    pub fn cooling_wavelength(&self) -> Result<f64, PhysError> {
        self.cooling_wavelength
            .ok_or_else(|| PhysError::MissingData(self.name.clone(), "cooling wavelength"))
    }

    pub fn qubit_wavelength(&self) -> Result<f64, PhysError> {
        self.qubit_wavelength
            .ok_or_else(|| PhysError::MissingData(self.name.clone(), "qubit wavelength"))
    }

    pub fn cooling_linewidth(&self) -> Result<f64, PhysError> {
        self.cooling_linewidth
            .ok_or_else(|| PhysError::MissingData(self.name.clone(), "cooling linewidth"))
    }

    pub fn reference_rabi(&self) -> Result<ReferenceRabi, PhysError> {
        self.reference_rabi
            .ok_or_else(|| PhysError::MissingData(self.name.clone(), "reference Rabi"))
    }
}

const TWO_PI: f64 = 2.0 * PI;
const LINEWIDTH_NOTE: &str = "cooling linewidth is external data, not from the reference \
     feasibility study (P1/2 lifetime literature value)";

fn calcium40() -> IonSpecies {
    IonSpecies {
        cooling_wavelength: Some(397e-9),
        qubit_wavelength: Some(792e-9),
        // 1/τ(P1/2), τ = 6.924 ns
        cooling_linewidth: Some(1.0 / 6.924e-9),
        shelved_lifetime: Some(1.0),
        reference_rabi: Some(ReferenceRabi {
            rabi_frequency: TWO_PI * 1000e3,
            intensity: 5000.0e6,
        }),
        typical_secular: Some((TWO_PI * 2.5e6, TWO_PI * 1.0e6)),
        provenance: LINEWIDTH_NOTE.to_string(),
        ..IonSpecies::mass_only("Ca-40", 40, false)
    }
}

fn barium138() -> IonSpecies {
    IonSpecies {
        cooling_wavelength: Some(493e-9),
        qubit_wavelength: Some(1762e-9),
        // 1/τ(P1/2), τ = 7.92 ns
        cooling_linewidth: Some(1.0 / 7.92e-9),
        shelved_lifetime: Some(32.0),
        reference_rabi: Some(ReferenceRabi {
            rabi_frequency: TWO_PI * 43e3,
            intensity: 0.25e6,
        }),
        typical_secular: Some((TWO_PI * 1.0e6, TWO_PI * 0.25e6)),
        provenance: LINEWIDTH_NOTE.to_string(),
        ..IonSpecies::mass_only("Ba-138", 138, false)
    }
}

/// Names of the built-in species, in registry order.
pub const BUILTIN_SPECIES: [&str; 5] = ["Ca-40", "Ba-138", "Mg-24", "Ca-43", "Ba-136"];

fn builtin(name: &str) -> Option<IonSpecies> {
    match name {
        "Ca-40" => Some(calcium40()),
        "Ba-138" => Some(barium138()),
        "Mg-24" => Some(IonSpecies::mass_only("Mg-24", 24, false)),
        "Ca-43" => Some(IonSpecies::mass_only("Ca-43", 43, true)),
        "Ba-136" => Some(IonSpecies::mass_only("Ba-136", 136, true)),
        _ => None,
    }
}

/// Look up a built-in species.
pub fn load_species(name: &str) -> Result<IonSpecies, PhysError> {
    builtin(name).ok_or_else(|| PhysError::UnknownSpecies(name.to_string()))
}

/// Built-in species plus user-supplied records, which shadow built-ins of
/// the same name.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    user: BTreeMap<String, IonSpecies>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, species: IonSpecies) -> Result<(), PhysError> {
        species.validate()?;
        self.user.insert(species.name.clone(), species);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<IonSpecies, PhysError> {
        match self.user.get(name) {
            Some(sp) => Ok(sp.clone()),
            None => load_species(name),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = BUILTIN_SPECIES.iter().map(|s| s.to_string()).collect();
        for k in self.user.keys() {
            if !out.contains(k) {
                out.push(k.clone());
            }
        }
        out
    }
}

/// Machine parameters of a storage ring (or a linear trap, with infinite
/// radius standing in as a very long circumference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingConfig {
    pub name: String,
    /// m
    pub circumference: f64,
    pub n_ions: u64,
    /// J per ion
    pub kinetic_energy: f64,
    /// rad/s
    pub secular_freq_x: f64,
    pub secular_freq_y: f64,
    pub secular_freq_z: f64,
    /// rad/s
    pub rf_drive_freq: f64,
    pub horizontal_tune: f64,
    pub periodicity: u32,
    /// Betatron phase advance per cell, rad.
    pub cell_phase_advance: f64,
}

impl RingConfig {
    /// PALLAS-like RFQ ring: Mg-24 at 1 eV, ω_z = 2π·180 kHz,
    /// ω_x,y = 2π·110 kHz, Q_x = 50, P = 800, 36 cm orbit, 10⁴ ions.
    pub fn pallas() -> Self {
        let tune = 50.0;
        let periodicity = 800;
        Self {
            name: "PALLAS".into(),
            circumference: 0.36,
            n_ions: 10_000,
            kinetic_energy: constants::ELEMENTARY_CHARGE,
            secular_freq_x: TWO_PI * 110e3,
            secular_freq_y: TWO_PI * 110e3,
            secular_freq_z: TWO_PI * 180e3,
            rf_drive_freq: TWO_PI * 10e6,
            horizontal_tune: tune,
            periodicity,
            cell_phase_advance: smooth_cell_phase_advance(tune, periodicity),
        }
    }

    /// Radius of the orbit, treating it as a circle.
    pub fn radius(&self) -> f64 {
        self.circumference / TWO_PI
    }

    pub fn validate(&self, species: &IonSpecies) -> Result<(), PhysError> {
        let bad = |reason: String| PhysError::InvalidRing {
            name: self.name.clone(),
            reason,
        };
        if !(self.circumference > 0.0) {
            return Err(bad("circumference must be positive".into()));
        }
        if self.n_ions == 0 {
            return Err(bad("n_ions must be at least 1".into()));
        }
        if !(self.kinetic_energy >= 0.0) {
            return Err(bad("kinetic energy must be non-negative".into()));
        }
        for (what, f) in [
            ("secular_freq_x", self.secular_freq_x),
            ("secular_freq_y", self.secular_freq_y),
            ("secular_freq_z", self.secular_freq_z),
            ("rf_drive_freq", self.rf_drive_freq),
        ] {
            if !(f > 0.0) || !f.is_finite() {
                return Err(bad(format!("{what} must be positive, got {f}")));
            }
        }
        let v = beam_velocity(self, species);
        if !v.is_finite() || v >= 1e6 {
            return Err(bad(format!(
                "beam velocity {v} m/s is outside the nonrelativistic regime"
            )));
        }
        Ok(())
    }
}

/// Smooth-focusing estimate μ_cell = 2πQ/P.
pub fn smooth_cell_phase_advance(tune: f64, periodicity: u32) -> f64 {
    TWO_PI * tune / periodicity as f64
}

/// v = sqrt(2 E_kin / m).
pub fn beam_velocity(cfg: &RingConfig, species: &IonSpecies) -> f64 {
    (2.0 * cfg.kinetic_energy.max(0.0) / species.isotope_mass).sqrt()
}

/// Species and ring records as stored in a key-value record file:
///
/// ```toml
/// [species.Sr-88]
/// name = "Sr-88"
/// mass_number = 88
/// isotope_mass = 1.46e-25
/// ...
/// [ring.Mini]
/// ...
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordFile {
    #[serde(default)]
    pub species: BTreeMap<String, IonSpecies>,
    #[serde(default)]
    pub ring: BTreeMap<String, RingConfig>,
}

impl RecordFile {
    pub fn parse(text: &str) -> Result<Self, PhysError> {
        let file: RecordFile = toml::from_str(text).map_err(|e| PhysError::Parse(e.to_string()))?;
        for sp in file.species.values() {
            sp.validate()?;
        }
        Ok(file)
    }

    pub fn to_text(&self) -> Result<String, PhysError> {
        toml::to_string(self).map_err(|e| PhysError::Parse(e.to_string()))
    }
}

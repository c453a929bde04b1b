//! Stochastic laser cooling of ions circulating on the ring orbit.
//!
//! Each ion lives in a local frame: arc coordinate `s` along the orbit
//! (periodic in the circumference), transverse offsets `x` (radial) and
//! `y` (vertical), and a velocity (v_x, v_y, v_z) with z tangential.
//! Beams are described in the same frame.
//!
//! The scattering force is the two-level Lorentzian
//!
//! ```text
//! F = ħk (Γ/2) s₀ / (1 + s₀ + (2δ/Γ)²) · n̂,    δ = Δ − k n̂·v
//! ```
//!
//! with independent beams. Recoil noise is Poisson: per step each beam
//! scatters n ~ Poisson(R dt) photons, giving an absorption kick
//! (n − R dt)ħk n̂ (the mean is already in the deterministic force) and n
//! isotropic emission kicks of ħk each.

use std::f64::consts::PI;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{self, BudgetError};
use crate::physcore::constants::{BOLTZMANN, COULOMB, REDUCED_PLANCK};
use crate::physcore::{IonSpecies, PhysError, RingConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("time step {dt:e} s violates the resolution guard dt < {limit:e} s")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("invalid beam: {0}")]
    InvalidBeam(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("invalid stray-field map: {0}")]
    InvalidStray(String),
    #[error(transparent)]
    Species(#[from] PhysError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BeamProfile {
    Round,
    /// Vertical waist = aspect × horizontal waist.
    Elliptical { aspect: f64 },
}

/// Part of the orbit a beam illuminates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Footprint {
    FullRing,
    /// Arc of `length` metres centred on arc position `center`.
    Arc { center: f64, length: f64 },
}

impl Footprint {
    pub fn contains(&self, s: f64, circumference: f64) -> bool {
        match *self {
            Footprint::FullRing => true,
            Footprint::Arc { center, length } => {
                let d = wrap_signed(s - center, circumference);
                d.abs() <= 0.5 * length
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserBeam {
    /// m
    pub wavelength: f64,
    /// Lab-frame detuning from the cooling transition, rad/s.
    pub detuning: f64,
    /// s₀ = I/I_sat
    pub saturation: f64,
    /// Unit vector in the local (x, y, z) frame.
    pub direction: [f64; 3],
    /// m
    pub waist: f64,
    pub profile: BeamProfile,
    pub footprint: Footprint,
}

impl LaserBeam {
    /// Beam along ±z covering the whole orbit.
    pub fn tangential(wavelength: f64, detuning: f64, saturation: f64, forward: bool) -> Self {
        Self {
            wavelength,
            detuning,
            saturation,
            direction: [0.0, 0.0, if forward { 1.0 } else { -1.0 }],
            waist: 10e-6,
            profile: BeamProfile::Round,
            footprint: Footprint::FullRing,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let norm = self.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(DynamicsError::InvalidBeam(format!("direction norm is {norm}, expected 1")));
        }
        if !(self.saturation >= 0.0 && self.saturation.is_finite()) {
            return Err(DynamicsError::InvalidBeam("saturation must be non-negative".into()));
        }
        if !(self.waist > 0.0) {
            return Err(DynamicsError::InvalidBeam("waist must be positive".into()));
        }
        if !(self.wavelength > 0.0) {
            return Err(DynamicsError::InvalidBeam("wavelength must be positive".into()));
        }
        if let BeamProfile::Elliptical { aspect } = self.profile {
            if !(aspect > 0.0) {
                return Err(DynamicsError::InvalidBeam("aspect ratio must be positive".into()));
            }
        }
        if !self.detuning.is_finite() {
            return Err(DynamicsError::InvalidBeam("detuning must be finite".into()));
        }
        Ok(())
    }

    /// Local saturation at transverse offset (x, y) from the beam axis,
    /// Gaussian in both directions.
    pub fn local_saturation(&self, x: f64, y: f64) -> f64 {
        let wx = self.waist;
        let wy = match self.profile {
            BeamProfile::Round => self.waist,
            BeamProfile::Elliptical { aspect } => self.waist * aspect,
        };
        self.saturation * (-2.0 * (x * x / (wx * wx) + y * y / (wy * wy))).exp()
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Photon scattering rate (Γ/2) s₀/(1 + s₀ + (2δ/Γ)²), 1/s.
pub fn scattering_rate(beam: &LaserBeam, saturation: f64, velocity: &[f64; 3], linewidth: f64, wavelength: f64) -> f64 {
    let k = 2.0 * PI / wavelength;
    let delta = beam.detuning - k * dot(&beam.direction, velocity);
    let x = 2.0 * delta / linewidth;
    0.5 * linewidth * saturation / (1.0 + saturation + x * x)
}

/// Mean radiation-pressure force of one beam on an ion on the beam axis, N.
pub fn scattering_force(beam: &LaserBeam, velocity: &[f64; 3], linewidth: f64, wavelength: f64) -> [f64; 3] {
    let k = 2.0 * PI / wavelength;
    let f = REDUCED_PLANCK * k * scattering_rate(beam, beam.saturation, velocity, linewidth, wavelength);
    [f * beam.direction[0], f * beam.direction[1], f * beam.direction[2]]
}

/// Sum of mean forces of all beams at velocity `v` (beam axis, inside
/// footprints).
pub fn net_beam_force(beams: &[LaserBeam], velocity: &[f64; 3], linewidth: f64) -> [f64; 3] {
    let mut f = [0.0; 3];
    for b in beams {
        let fb = scattering_force(b, velocity, linewidth, b.wavelength);
        for k in 0..3 {
            f[k] += fb[k];
        }
    }
    f
}

/// Longitudinal velocity at which the net tangential beam force vanishes,
/// bracketed in [lo, hi] and refined by bisection.
pub fn velocity_equilibrium(beams: &[LaserBeam], linewidth: f64, lo: f64, hi: f64) -> Option<f64> {
    let f = |v: f64| net_beam_force(beams, &[0.0, 0.0, v], linewidth)[2];
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a), f(b));
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 || (b - a).abs() <= 1e-15 * m.abs().max(1e-300) {
            return Some(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

/// Two tangential beams of equal intensity whose detunings differ by
/// `split`, centred so that both sit at `detuning` in the frame moving at
/// the controlled velocity split/(2k).
pub fn velocity_control_pair(wavelength: f64, detuning: f64, split: f64, saturation: f64) -> [LaserBeam; 2] {
    [
        LaserBeam::tangential(wavelength, detuning + 0.5 * split, saturation, true),
        LaserBeam::tangential(wavelength, detuning - 0.5 * split, saturation, false),
    ]
}

/// One contribution to the DC stray field along the orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrayComponent {
    /// Same field everywhere, V/m.
    Uniform { field: [f64; 3] },
    /// Field confined to an arc of `length` centred on `center`.
    Patch { center: f64, length: f64, field: [f64; 3] },
    /// amplitude · sin(2π h s/C + phase).
    Harmonic { amplitude: [f64; 3], harmonic: u32, phase: f64 },
}

/// DC field as a function of arc position, minus compensation. The
/// compensation field is the periodic piecewise-linear interpolation of
/// the entries (constant with a single entry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrayFieldMap {
    /// m
    pub circumference: f64,
    pub components: Vec<StrayComponent>,
    /// (arc position m, applied compensation field V/m), sorted by arc.
    pub compensation: Vec<(f64, [f64; 3])>,
}

impl StrayFieldMap {
    pub fn none(circumference: f64) -> Self {
        Self { circumference, components: Vec::new(), compensation: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.circumference > 0.0 && self.circumference.is_finite()) {
            return Err(DynamicsError::InvalidStray("circumference must be positive".into()));
        }
        let finite3 = |v: &[f64; 3]| v.iter().all(|x| x.is_finite());
        for c in &self.components {
            let ok = match c {
                StrayComponent::Uniform { field } => finite3(field),
                StrayComponent::Patch { center, length, field } => {
                    finite3(field) && center.is_finite() && *length >= 0.0
                }
                StrayComponent::Harmonic { amplitude, phase, .. } => finite3(amplitude) && phase.is_finite(),
            };
            if !ok {
                return Err(DynamicsError::InvalidStray(format!("non-finite component {c:?}")));
            }
        }
        if self.compensation.iter().any(|(s, f)| !s.is_finite() || !finite3(f)) {
            return Err(DynamicsError::InvalidStray("non-finite compensation entry".into()));
        }
        Ok(())
    }

    /// Uncompensated field at arc position `s`, V/m.
    pub fn raw_field(&self, s: f64) -> [f64; 3] {
        let c = self.circumference;
        let mut e = [0.0; 3];
        for comp in &self.components {
            match *comp {
                StrayComponent::Uniform { field } => {
                    for k in 0..3 {
                        e[k] += field[k];
                    }
                }
                StrayComponent::Patch { center, length, field } => {
                    if wrap_signed(s - center, c).abs() <= 0.5 * length {
                        for k in 0..3 {
                            e[k] += field[k];
                        }
                    }
                }
                StrayComponent::Harmonic { amplitude, harmonic, phase } => {
                    let w = (2.0 * PI * harmonic as f64 * s / c + phase).sin();
                    for k in 0..3 {
                        e[k] += amplitude[k] * w;
                    }
                }
            }
        }
        e
    }

    pub fn compensation_field(&self, s: f64) -> [f64; 3] {
        let entries = &self.compensation;
        match entries.len() {
            0 => [0.0; 3],
            1 => entries[0].1,
            n => {
                let c = self.circumference;
                let s = wrap(s, c);
                // first entry with position > s
                let hi = entries.partition_point(|(p, _)| *p <= s);
                let (lo_i, hi_i) = if hi == 0 || hi == n { (n - 1, 0) } else { (hi - 1, hi) };
                let (p0, f0) = entries[lo_i];
                let (p1, f1) = entries[hi_i];
                let span = wrap(p1 - p0, c);
                let span = if span == 0.0 { c } else { span };
                let t = wrap(s - p0, c) / span;
                [
                    f0[0] + t * (f1[0] - f0[0]),
                    f0[1] + t * (f1[1] - f0[1]),
                    f0[2] + t * (f1[2] - f0[2]),
                ]
            }
        }
    }

    /// Residual field the ions feel.
    pub fn field(&self, s: f64) -> [f64; 3] {
        let raw = self.raw_field(s);
        let comp = self.compensation_field(s);
        [raw[0] - comp[0], raw[1] - comp[1], raw[2] - comp[2]]
    }

    fn knots(&self) -> Vec<f64> {
        let mut k: Vec<f64> = self.compensation.iter().map(|(s, _)| *s).collect();
        for comp in &self.components {
            if let StrayComponent::Patch { center, length, .. } = *comp {
                k.push(wrap(center - 0.5 * length, self.circumference));
                k.push(wrap(center + 0.5 * length, self.circumference));
            }
        }
        k.push(0.0);
        k.sort_by(f64::total_cmp);
        k.dedup();
        k
    }

    /// Largest residual field magnitude along the whole orbit. Each interval
    /// between knots is sampled and the best sample refined by golden-section
    /// search, so smooth maps are resolved to rounding level.
    pub fn max_residual(&self) -> (f64, f64) {
        let c = self.circumference;
        let mag = |s: f64| {
            let e = self.field(s);
            dot(&e, &e).sqrt()
        };
        let knots = self.knots();
        let mut best = (0.0, 0.0);
        for (i, &a) in knots.iter().enumerate() {
            let b = if i + 1 < knots.len() { knots[i + 1] } else { c };
            let samples = 64;
            let h = (b - a) / samples as f64;
            let mut arg = a;
            let mut val = -1.0;
            for j in 0..=samples {
                let s = a + j as f64 * h;
                let v = mag(s);
                if v > val {
                    val = v;
                    arg = s;
                }
            }
            let (mut lo, mut hi) = ((arg - h).max(a), (arg + h).min(b));
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..80 {
                let m1 = hi - g * (hi - lo);
                let m2 = lo + g * (hi - lo);
                if mag(m1) > mag(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let mid = 0.5 * (lo + hi);
            for (s, v) in [(arg, val), (mid, mag(mid))] {
                if v > best.1 {
                    best = (s, v);
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationReport {
    pub sensors: usize,
    /// V/m
    pub max_residual_field: f64,
    /// Arc position of the worst residual, m.
    pub worst_position: f64,
    pub target_residual: f64,
    pub meets_target: bool,
}

/// Cancel the sampled field at each sensor with a compensation entry. The
/// residual between sensors is the error of linear interpolation.
pub fn compensate_stray(
    stray: &StrayFieldMap,
    sensors: &[f64],
    target_residual: f64,
) -> Result<(StrayFieldMap, CompensationReport), DynamicsError> {
    stray.validate()?;
    let c = stray.circumference;
    let mut positions: Vec<f64> = sensors.iter().map(|s| wrap(*s, c)).collect();
    positions.sort_by(f64::total_cmp);
    if positions.windows(2).any(|w| w[1] - w[0] <= 1e-12 * c) {
        return Err(DynamicsError::InvalidStray("sensor positions must be distinct".into()));
    }
    if positions.is_empty() {
        return Err(DynamicsError::InvalidStray("at least one sensor is required".into()));
    }
    let mut out = stray.clone();
    let existing = stray.clone();
    let mut entries: Vec<(f64, [f64; 3])> = positions
        .iter()
        .map(|&s| {
            let residual = existing.field(s);
            let prior = existing.compensation_field(s);
            (s, [prior[0] + residual[0], prior[1] + residual[1], prior[2] + residual[2]])
        })
        .collect();
    // earlier entries are superseded: the new knots sample the total field
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.compensation = entries;
    let (worst_position, max_residual_field) = out.max_residual();
    Ok((
        out,
        CompensationReport {
            sensors: positions.len(),
            max_residual_field,
            worst_position,
            target_residual,
            meets_target: max_residual_field <= target_residual,
        },
    ))
}

/// Residual equilibrium displacement Δx = qE_x/(mω_x²) at the given arc
/// positions (e.g. laser interaction points), m.
pub fn residual_displacements(
    stray: &StrayFieldMap,
    species: &IonSpecies,
    secular_freq_x: f64,
    positions: &[f64],
) -> Result<Vec<f64>, DynamicsError> {
    positions
        .iter()
        .map(|&s| Ok(budget::micromotion_displacement(stray.field(s)[0], species, secular_freq_x)?))
        .collect()
}

fn wrap(s: f64, c: f64) -> f64 {
    let r = s.rem_euclid(c);
    if r >= c {
        0.0
    } else {
        r
    }
}

fn wrap_signed(d: f64, c: f64) -> f64 {
    let r = wrap(d, c);
    if r >= 0.5 * c {
        r - c
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoulombMode {
    Off,
    /// All pairs up to 512 ions, then the `neighbors` closest on each side.
    Auto { neighbors: usize },
    Full,
    Nearest { neighbors: usize },
}

pub const FULL_COULOMB_CAP: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsOptions {
    pub recoil: bool,
    /// Explicit RF drive. When on, the transverse force is the a = 0
    /// Mathieu force m(Ω²/2) q cos(Ωt) x with q = ±2√2 ω/Ω, replacing the
    /// static harmonic term (its lowest-order secular frequency is ω).
    pub rf_drive: bool,
    /// Ring dispersion force F_x = −ΔE/R with ΔE = m v₀ (v_z − v₀).
    pub dispersion: bool,
    pub nominal_velocity: f64,
    pub coulomb: CoulombMode,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        Self {
            recoil: true,
            rf_drive: false,
            dispersion: false,
            nominal_velocity: 0.0,
            coulomb: CoulombMode::Off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// Arc coordinate of each ion, m, in [0, C).
    pub arc: Vec<f64>,
    /// (x, y) offsets from the orbit, m.
    pub transverse: Vec<[f64; 2]>,
    /// (v_x, v_y, v_z), m/s.
    pub velocity: Vec<[f64; 3]>,
    /// s
    pub time: f64,
    pub steps: u64,
    /// Photons scattered so far.
    pub scatter_events: u64,
    /// Time integral of the scattering rate, the expectation of
    /// `scatter_events`.
    pub expected_scatter: f64,
    rng: ChaCha8Rng,
}

impl SimState {
    /// Ions evenly spaced on the orbit, at rest transversally, all moving
    /// at `v_long`.
    pub fn evenly_spaced(n_ions: usize, circumference: f64, v_long: f64, seed: u64) -> Self {
        let arc = (0..n_ions).map(|i| circumference * i as f64 / n_ions as f64).collect();
        Self {
            arc,
            transverse: vec![[0.0; 2]; n_ions],
            velocity: vec![[0.0, 0.0, v_long]; n_ions],
            time: 0.0,
            steps: 0,
            scatter_events: 0,
            expected_scatter: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.arc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arc.is_empty()
    }

    pub fn validate(&self, circumference: f64) -> Result<(), DynamicsError> {
        let n = self.arc.len();
        if self.transverse.len() != n || self.velocity.len() != n {
            return Err(DynamicsError::InvalidState("per-ion vectors differ in length".into()));
        }
        if self.arc.iter().any(|s| !(*s >= 0.0 && *s < circumference)) {
            return Err(DynamicsError::InvalidState("arc coordinate outside [0, C)".into()));
        }
        if self.velocity.iter().flatten().any(|v| !v.is_finite())
            || self.transverse.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(DynamicsError::InvalidState("non-finite coordinate".into()));
        }
        Ok(())
    }

    /// Idealized sub-Doppler stage: redraw velocities from thermal
    /// distributions at the given temperatures (half-variance convention for T∥,
    /// so σ_z² = 2k_B T∥/m) about the current mean longitudinal velocity.
    pub fn thermalize(&mut self, mass: f64, t_long: f64, t_trans: f64) {
        let n = self.velocity.len().max(1) as f64;
        let mean_vz = self.velocity.iter().map(|v| v[2]).sum::<f64>() / n;
        let sz = (2.0 * BOLTZMANN * t_long.max(0.0) / mass).sqrt();
        let st = (BOLTZMANN * t_trans.max(0.0) / mass).sqrt();
        for v in self.velocity.iter_mut() {
            let g: [f64; 3] = [
                Normal::new(0.0, 1.0).expect("unit normal").sample(&mut self.rng),
                Normal::new(0.0, 1.0).expect("unit normal").sample(&mut self.rng),
                Normal::new(0.0, 1.0).expect("unit normal").sample(&mut self.rng),
            ];
            *v = [st * g[0], st * g[1], mean_vz + sz * g[2]];
        }
    }
}

/// Everything that stays fixed during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulator {
    pub species: IonSpecies,
    pub ring: RingConfig,
    pub beams: Vec<LaserBeam>,
    pub stray: StrayFieldMap,
    pub options: DynamicsOptions,
    /// Ions that do not fluoresce (saturation forced to zero).
    pub dark: Vec<bool>,
}

impl Simulator {
    pub fn new(species: IonSpecies, ring: RingConfig, beams: Vec<LaserBeam>, stray: StrayFieldMap) -> Result<Self, DynamicsError> {
        species.validate()?;
        ring.validate(&species)?;
        stray.validate()?;
        for b in &beams {
            b.validate()?;
        }
        if !beams.is_empty() {
            species.cooling_linewidth()?;
        }
        Ok(Self {
            species,
            ring,
            beams,
            stray,
            options: DynamicsOptions::default(),
            dark: Vec::new(),
        })
    }

    pub fn with_options(mut self, options: DynamicsOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_dark_mask(mut self, dark: Vec<bool>) -> Self {
        self.dark = dark;
        self
    }

    fn linewidth(&self) -> f64 {
        self.species.cooling_linewidth.unwrap_or(0.0)
    }

    /// dt must stay below 0.05 / max(Γ, ω_x, ω_y, Ω_RF).
    pub fn max_step(&self) -> f64 {
        let mut fastest = self.ring.secular_freq_x.max(self.ring.secular_freq_y);
        if !self.beams.is_empty() {
            fastest = fastest.max(self.linewidth());
        }
        if self.options.rf_drive {
            fastest = fastest.max(self.ring.rf_drive_freq);
        }
        0.05 / fastest
    }

    fn is_dark(&self, i: usize) -> bool {
        self.dark.get(i).copied().unwrap_or(false) || self.species.dark
    }

    /// Deterministic force on every ion (no recoil noise), N.
    pub fn forces(&self, arc: &[f64], transverse: &[[f64; 2]], velocity: &[[f64; 3]], time: f64) -> Vec<[f64; 3]> {
        let m = self.species.isotope_mass;
        let q = self.species.charge;
        let (wx, wy) = (self.ring.secular_freq_x, self.ring.secular_freq_y);
        let c = self.ring.circumference;
        let gamma = self.linewidth();
        let n = arc.len();
        let mut out = vec![[0.0; 3]; n];
        let rf = self.ring.rf_drive_freq;
        let drive = if self.options.rf_drive {
            Some(0.5 * rf * rf * (rf * time).cos())
        } else {
            None
        };
        for i in 0..n {
            let [x, y] = transverse[i];
            let f = &mut out[i];
            match drive {
                Some(d) => {
                    let qx = 2.0 * 2f64.sqrt() * wx / rf;
                    let qy = 2.0 * 2f64.sqrt() * wy / rf;
                    f[0] += m * d * qx * x;
                    f[1] -= m * d * qy * y;
                }
                None => {
                    f[0] -= m * wx * wx * x;
                    f[1] -= m * wy * wy * y;
                }
            }
            let e = self.stray.field(arc[i]);
            for k in 0..3 {
                f[k] += q * e[k];
            }
            if self.options.dispersion {
                let v0 = self.options.nominal_velocity;
                f[0] -= m * v0 * (velocity[i][2] - v0) / self.ring.radius();
            }
            if !self.is_dark(i) {
                for b in &self.beams {
                    if !b.footprint.contains(arc[i], c) {
                        continue;
                    }
                    let s0 = b.local_saturation(x, y);
                    if s0 == 0.0 {
                        continue;
                    }
                    let k = 2.0 * PI / b.wavelength;
                    let r = scattering_rate(b, s0, &velocity[i], gamma, b.wavelength);
                    for a in 0..3 {
                        f[a] += REDUCED_PLANCK * k * r * b.direction[a];
                    }
                }
            }
        }
        self.add_coulomb(arc, transverse, &mut out);
        out
    }

    fn add_coulomb(&self, arc: &[f64], transverse: &[[f64; 2]], out: &mut [[f64; 3]]) {
        let n = arc.len();
        let neighbors = match self.options.coulomb {
            CoulombMode::Off => return,
            CoulombMode::Full => None,
            CoulombMode::Auto { neighbors } if n > FULL_COULOMB_CAP => Some(neighbors),
            CoulombMode::Auto { .. } => None,
            CoulombMode::Nearest { neighbors } => Some(neighbors),
        };
        let c = self.ring.circumference;
        let kq2 = COULOMB * self.species.charge * self.species.charge;
        let pair = |i: usize, j: usize, out: &mut [[f64; 3]]| {
            let d = [
                transverse[i][0] - transverse[j][0],
                transverse[i][1] - transverse[j][1],
                wrap_signed(arc[i] - arc[j], c),
            ];
            let r2 = dot(&d, &d);
            let inv3 = kq2 / (r2 * r2.sqrt());
            for k in 0..3 {
                out[i][k] += d[k] * inv3;
                out[j][k] -= d[k] * inv3;
            }
        };
        match neighbors {
            None => {
                for i in 0..n {
                    for j in 0..i {
                        pair(i, j, out);
                    }
                }
            }
            Some(k) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| arc[a].total_cmp(&arc[b]));
                let reach = k.min((n - 1) / 2);
                for (rank, &i) in order.iter().enumerate() {
                    for off in 1..=reach {
                        pair(i, order[(rank + off) % n], out);
                    }
                }
            }
        }
    }

    /// One velocity-Verlet step followed by recoil kicks.
    pub fn step(&self, state: &mut SimState, dt: f64) -> Result<(), DynamicsError> {
        let limit = self.max_step();
        if !(dt > 0.0 && dt < limit) {
            return Err(DynamicsError::StepTooLarge { dt, limit });
        }
        let m = self.species.isotope_mass;
        let n = state.len();
        let c = self.ring.circumference;
        let f0 = self.forces(&state.arc, &state.transverse, &state.velocity, state.time);
        let v_start = state.velocity.clone();
        for i in 0..n {
            for k in 0..3 {
                state.velocity[i][k] += 0.5 * dt * f0[i][k] / m;
            }
            state.transverse[i][0] += dt * state.velocity[i][0];
            state.transverse[i][1] += dt * state.velocity[i][1];
            state.arc[i] = wrap(state.arc[i] + dt * state.velocity[i][2], c);
        }
        let t1 = state.time + dt;
        let f1 = self.forces(&state.arc, &state.transverse, &state.velocity, t1);
        for i in 0..n {
            for k in 0..3 {
                state.velocity[i][k] += 0.5 * dt * f1[i][k] / m;
            }
        }
        if !self.beams.is_empty() {
            self.recoil(state, &v_start, dt);
        }
        state.time = t1;
        state.steps += 1;
        Ok(())
    }

    fn recoil(&self, state: &mut SimState, v_start: &[[f64; 3]], dt: f64) {
        let m = self.species.isotope_mass;
        let gamma = self.linewidth();
        let c = self.ring.circumference;
        for i in 0..state.len() {
            if self.is_dark(i) {
                continue;
            }
            for b in &self.beams {
                if !b.footprint.contains(state.arc[i], c) {
                    continue;
                }
                let [x, y] = state.transverse[i];
                let s0 = b.local_saturation(x, y);
                if s0 == 0.0 {
                    continue;
                }
                let mean = scattering_rate(b, s0, &v_start[i], gamma, b.wavelength) * dt;
                state.expected_scatter += mean;
                if !self.options.recoil {
                    continue;
                }
                let events = poisson(&mut state.rng, mean);
                state.scatter_events += events;
                let dv = REDUCED_PLANCK * 2.0 * PI / b.wavelength / m;
                let absorb = (events as f64 - mean) * dv;
                for k in 0..3 {
                    state.velocity[i][k] += absorb * b.direction[k];
                }
                for _ in 0..events {
                    let u: [f64; 3] = UnitSphere.sample(&mut state.rng);
                    for k in 0..3 {
                        state.velocity[i][k] += dv * u[k];
                    }
                }
            }
        }
    }

    /// Advance `steps` steps, sampling velocities every `sample_every` steps
    /// after the first `warmup` steps and streaming every step that passes
    /// the recorder's decimation.
    pub fn run<W: Write>(
        &self,
        state: &mut SimState,
        dt: f64,
        steps: u64,
        warmup: u64,
        sample_every: u64,
        mut recorder: Option<&mut TrajectoryRecorder<W>>,
    ) -> Result<History, DynamicsError> {
        state.validate(self.ring.circumference)?;
        let mut history = History { samples: Vec::new() };
        let every = sample_every.max(1);
        for k in 0..steps {
            self.step(state, dt)?;
            if let Some(r) = recorder.as_deref_mut() {
                r.record(state).map_err(|e| DynamicsError::InvalidState(format!("record file: {e}")))?;
            }
            if k >= warmup && (k - warmup) % every == 0 {
                history.samples.push(Snapshot {
                    time: state.time,
                    velocity: state.velocity.clone(),
                    transverse: state.transverse.clone(),
                });
            }
        }
        Ok(history)
    }

    /// Total transverse energy ½m(v_x² + v_y²) + ½m(ω_x²x² + ω_y²y²), J.
    pub fn transverse_energy(&self, state: &SimState) -> f64 {
        let m = self.species.isotope_mass;
        let (wx, wy) = (self.ring.secular_freq_x, self.ring.secular_freq_y);
        state
            .velocity
            .iter()
            .zip(&state.transverse)
            .map(|(v, p)| 0.5 * m * (v[0] * v[0] + v[1] * v[1] + wx * wx * p[0] * p[0] + wy * wy * p[1] * p[1]))
            .sum()
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    if mean >= 30.0 {
        return Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0);
    }
    // inverse transform
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf && k < 1000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub velocity: Vec<[f64; 3]>,
    pub transverse: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub samples: Vec<Snapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureEstimate {
    /// k_B T∥ = m⟨Δv_z²⟩/2, K
    pub t_long: f64,
    /// The same spread in the 1D equipartition convention, m⟨Δv_z²⟩/k_B.
    pub t_long_equipartition: f64,
    /// k_B T⊥ = m(⟨Δv_x²⟩ + ⟨Δv_y²⟩)/2, K
    pub t_trans: f64,
    /// Mean longitudinal velocity over ions and samples, m/s.
    pub v_mean: f64,
    pub samples: usize,
}

/// Temperatures from a velocity history. `min_span`, if given, is the
/// shortest acceptable time span (e.g. ten damping times).
pub fn estimate_temperatures(history: &History, mass: f64, min_span: Option<f64>) -> Result<TemperatureEstimate, DynamicsError> {
    let samples = &history.samples;
    if samples.len() < 2 {
        return Err(DynamicsError::InsufficientHistory(format!("{} samples", samples.len())));
    }
    if let Some(span) = min_span {
        let have = samples[samples.len() - 1].time - samples[0].time;
        if have < span {
            return Err(DynamicsError::InsufficientHistory(format!(
                "history spans {have:e} s, need {span:e} s"
            )));
        }
    }
    let mut count = 0.0;
    let mut mean = [0.0; 3];
    for s in samples {
        for v in &s.velocity {
            count += 1.0;
            for k in 0..3 {
                mean[k] += v[k];
            }
        }
    }
    if count == 0.0 {
        return Err(DynamicsError::InsufficientHistory("no ions in history".into()));
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = [0.0; 3];
    for s in samples {
        for v in &s.velocity {
            for k in 0..3 {
                var[k] += (v[k] - mean[k]).powi(2);
            }
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    Ok(TemperatureEstimate {
        t_long: mass * var[2] / (2.0 * BOLTZMANN),
        t_long_equipartition: mass * var[2] / BOLTZMANN,
        t_trans: mass * (var[0] + var[1]) / (2.0 * BOLTZMANN),
        v_mean: mean[2],
        samples: samples.len(),
    })
}

/// Doppler limit ħΓ/(2k_B), K.
pub fn doppler_limit(linewidth: f64) -> f64 {
    REDUCED_PLANCK * linewidth / (2.0 * BOLTZMANN)
}

/// Velocity damping rate −(dF/dv)/m at the longitudinal equilibrium of the
/// beam set (v = 0 for a symmetric pair), 1/s.
pub fn damping_rate(species: &IonSpecies, beams: &[LaserBeam]) -> Result<f64, DynamicsError> {
    let gamma = species.cooling_linewidth()?;
    let k = beams
        .first()
        .map(|b| 2.0 * PI / b.wavelength)
        .ok_or_else(|| DynamicsError::InvalidBeam("no beams".into()))?;
    let span = beams.iter().fold(50.0 * gamma, |m, b| m.max(4.0 * b.detuning.abs())) / k;
    let v0 = velocity_equilibrium(beams, gamma, -span, span).unwrap_or(0.0);
    let h = 1e-4 * (gamma / k);
    let fp = net_beam_force(beams, &[0.0, 0.0, v0 + h], gamma)[2];
    let fm = net_beam_force(beams, &[0.0, 0.0, v0 - h], gamma)[2];
    Ok(-(fp - fm) / (2.0 * h) / species.isotope_mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoolingRun {
    pub n_ions: usize,
    /// Initial longitudinal velocity, m/s.
    pub initial_velocity: f64,
    pub dt: f64,
    /// s
    pub duration: f64,
    /// Discarded transient, s.
    pub warmup: f64,
    pub sample_every: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoolingOutcome {
    pub estimate: TemperatureEstimate,
    pub final_state: SimState,
    /// 1/s, zero when no beams act.
    pub damping_rate: f64,
}

/// Run a cooling simulation and estimate the steady-state temperatures
/// over the post-warmup window.
pub fn run_cooling<W: Write>(
    sim: &Simulator,
    run: &CoolingRun,
    recorder: Option<&mut TrajectoryRecorder<W>>,
) -> Result<CoolingOutcome, DynamicsError> {
    if !(run.duration > run.warmup && run.warmup >= 0.0) {
        return Err(DynamicsError::InvalidState("duration must exceed warmup".into()));
    }
    let mut state = SimState::evenly_spaced(run.n_ions, sim.ring.circumference, run.initial_velocity, run.seed);
    let steps = (run.duration / run.dt).ceil() as u64;
    let warmup = (run.warmup / run.dt).ceil() as u64;
    let history = sim.run(&mut state, run.dt, steps, warmup, run.sample_every, recorder)?;
    let estimate = estimate_temperatures(&history, sim.species.isotope_mass, None)?;
    let damping = if sim.beams.is_empty() { 0.0 } else { damping_rate(&sim.species, &sim.beams)? };
    Ok(CoolingOutcome { estimate, final_state: state, damping_rate: damping })
}

/// Append-only trajectory record file, CSV:
///
/// ```text
/// time_s,ion,arc_m,x_m,y_m,vx_m_s,vy_m_s,vz_m_s
/// ```
///
/// one row per ion for every `decimation`-th recorded step.
pub struct TrajectoryRecorder<W: Write> {
    out: W,
    decimation: u64,
    seen: u64,
    header_written: bool,
}

impl<W: Write> TrajectoryRecorder<W> {
    pub fn new(out: W, decimation: u64) -> Self {
        Self { out, decimation: decimation.max(1), seen: 0, header_written: false }
    }

    pub fn record(&mut self, state: &SimState) -> io::Result<()> {
        let take = self.seen % self.decimation == 0;
        self.seen += 1;
        if !take {
            return Ok(());
        }
        if !self.header_written {
            writeln!(self.out, "time_s,ion,arc_m,x_m,y_m,vx_m_s,vy_m_s,vz_m_s")?;
            self.header_written = true;
        }
        for i in 0..state.len() {
            let v = state.velocity[i];
            let p = state.transverse[i];
            writeln!(
                self.out,
                "{},{},{},{},{},{},{},{}",
                state.time, i, state.arc[i], p[0], p[1], v[0], v[1], v[2]
            )?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

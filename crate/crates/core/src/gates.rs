//! Pulsed single-ion addressing of a moving chain.
//!
//! Only the carrier transition is evolved. In the frame rotating with the
//! laser the Hamiltonian is
//!
//! ```text
//! H/ħ = −(Δ/2) σ_z + (Ω(t)/2) (cos φ σ_x + sin φ σ_y),    Δ = ω_L − ω₀
//! ```
//!
//! Sideband physics enters only through the η/√N derating of the
//! switching budget.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::budget::{self, BudgetError};
use crate::physcore::IonSpecies;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error(
        "pulses overlap neighbouring ions: pulse {pulse_length:e} s + 2 × {rise_fall:e} s edges exceeds the \
         {period:e} s arrival period; longest feasible flat top is {max_pulse_length:e} s"
    )]
    Crosstalk {
        pulse_length: f64,
        rise_fall: f64,
        period: f64,
        max_pulse_length: f64,
    },
    #[error("hardware limit: {0}")]
    Hardware(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitState {
    pub c_g: Complex64,
    pub c_e: Complex64,
}

impl QubitState {
    pub fn ground() -> Self {
        Self { c_g: Complex64::new(1.0, 0.0), c_e: Complex64::new(0.0, 0.0) }
    }

    pub fn excited() -> Self {
        Self { c_g: Complex64::new(0.0, 0.0), c_e: Complex64::new(1.0, 0.0) }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.c_g.norm_sqr() + self.c_e.norm_sqr()
    }

    pub fn excited_population(&self) -> f64 {
        self.c_e.norm_sqr()
    }

    /// max component distance, including global phase
    pub fn distance(&self, other: &QubitState) -> f64 {
        (self.c_g - other.c_g).norm().max((self.c_e - other.c_e).norm())
    }

    fn check(&self) -> Result<(), GateError> {
        if (self.norm_sqr() - 1.0).abs() > 1e-9 {
            return Err(GateError::InvalidInput(format!("state norm² is {}", self.norm_sqr())));
        }
        Ok(())
    }
}

/// Normalized pulse shape on [0, duration], peak value 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    Rectangular { duration: f64 },
    /// Linear ramps around a flat top.
    Trapezoid { rise: f64, flat: f64, fall: f64 },
    /// sin²(πt/T)
    Hann { duration: f64 },
    /// exp(−(t − T/2)²/(2σ²)) truncated to [0, T].
    Gaussian { sigma: f64, duration: f64 },
}

impl Envelope {
    /// Rabi-frequency profile of an ion crossing a Gaussian waist w₀ at
    /// speed v: Ω ∝ sqrt(I) ∝ exp(−v²t²/w₀²), i.e. σ = w₀/(√2 v), cut off
    /// at ±`half_widths` σ.
    pub fn transit(waist: f64, velocity: f64, half_widths: f64) -> Self {
        let sigma = waist / (2f64.sqrt() * velocity);
        Envelope::Gaussian { sigma, duration: 2.0 * half_widths * sigma }
    }

    pub fn duration(&self) -> f64 {
        match *self {
            Envelope::Rectangular { duration } | Envelope::Hann { duration } | Envelope::Gaussian { duration, .. } => {
                duration
            }
            Envelope::Trapezoid { rise, flat, fall } => rise + flat + fall,
        }
    }

    pub fn validate(&self) -> Result<(), GateError> {
        let ok = match *self {
            Envelope::Rectangular { duration } | Envelope::Hann { duration } => duration > 0.0,
            Envelope::Trapezoid { rise, flat, fall } => rise >= 0.0 && flat >= 0.0 && fall >= 0.0 && rise + flat + fall > 0.0,
            Envelope::Gaussian { sigma, duration } => sigma > 0.0 && duration > 0.0,
        };
        if ok && self.duration().is_finite() {
            Ok(())
        } else {
            Err(GateError::InvalidInput(format!("bad envelope {self:?}")))
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let d = self.duration();
        if !(0.0..=d).contains(&t) {
            return 0.0;
        }
        match *self {
            Envelope::Rectangular { .. } => 1.0,
            Envelope::Trapezoid { rise, flat, fall } => {
                if t < rise {
                    t / rise
                } else if t <= rise + flat {
                    1.0
                } else if fall > 0.0 {
                    ((d - t) / fall).max(0.0)
                } else {
                    0.0
                }
            }
            Envelope::Hann { duration } => (PI * t / duration).sin().powi(2),
            Envelope::Gaussian { sigma, duration } => (-(t - 0.5 * duration).powi(2) / (2.0 * sigma * sigma)).exp(),
        }
    }

    /// ∫₀^t shape, exact.
    pub fn cumulative(&self, t: f64) -> f64 {
        let d = self.duration();
        let t = t.clamp(0.0, d);
        match *self {
            Envelope::Rectangular { .. } => t,
            Envelope::Trapezoid { rise, flat, fall } => {
                let mut a = 0.0;
                if rise > 0.0 {
                    let tr = t.min(rise);
                    a += 0.5 * tr * tr / rise;
                }
                if t > rise {
                    a += (t - rise).min(flat);
                }
                if t > rise + flat && fall > 0.0 {
                    let u = (t - rise - flat).min(fall);
                    a += u - 0.5 * u * u / fall;
                }
                a
            }
            Envelope::Hann { duration } => 0.5 * t - duration * (2.0 * PI * t / duration).sin() / (4.0 * PI),
            Envelope::Gaussian { sigma, duration } => {
                let s = sigma * 2f64.sqrt();
                let c = 0.5 * duration;
                sigma * (PI / 2.0).sqrt() * (erf((t - c) / s) - erf(-c / s))
            }
        }
    }

    /// ∫ shape over the whole pulse.
    pub fn area(&self) -> f64 {
        self.cumulative(self.duration())
    }
}

/// An envelope with its peak Rabi frequency (rad/s) and laser phase (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapedPulse {
    pub envelope: Envelope,
    pub peak_rabi: f64,
    pub phase: f64,
}

impl ShapedPulse {
    /// Peak chosen so that ∫Ω dt = `area`.
    pub fn with_area(envelope: Envelope, area: f64, phase: f64) -> Result<Self, GateError> {
        envelope.validate()?;
        Ok(Self { envelope, peak_rabi: area / envelope.area(), phase })
    }

    pub fn area(&self) -> f64 {
        self.peak_rabi * self.envelope.area()
    }
}

/// Exact propagator of a constant Hamiltonian over `dt`.
fn propagate(state: QubitState, rabi: f64, phase: f64, detuning: f64, dt: f64) -> QubitState {
    let w = (rabi * rabi + detuning * detuning).sqrt();
    if w == 0.0 {
        return state;
    }
    let theta = 0.5 * w * dt;
    let (s, c) = theta.sin_cos();
    let nx = rabi * phase.cos() / w;
    let ny = rabi * phase.sin() / w;
    let nz = -detuning / w;
    let i = Complex64::new(0.0, 1.0);
    // U = cos θ I − i sin θ (n·σ)
    let u00 = Complex64::new(c, 0.0) - i * s * nz;
    let u11 = Complex64::new(c, 0.0) + i * s * nz;
    let u01 = -i * s * Complex64::new(nx, -ny);
    let u10 = -i * s * Complex64::new(nx, ny);
    QubitState {
        c_g: u00 * state.c_g + u01 * state.c_e,
        c_e: u10 * state.c_g + u11 * state.c_e,
    }
}

/// Evolve for `duration` from the start of the pulse. Each slice uses the
/// exact propagator of the slice-averaged Rabi frequency (exact slice area),
/// so resonant evolution depends on the pulse only through its area. Time
/// past the end of the envelope is free precession, propagated exactly.
pub fn rabi_evolve(state: QubitState, pulse: &ShapedPulse, detuning: f64, duration: f64) -> Result<QubitState, GateError> {
    let driven = duration.min(pulse.envelope.duration()).max(0.0);
    let fastest = pulse.peak_rabi.abs().max(detuning.abs());
    let slices = ((driven * fastest / 1e-4).ceil() as usize).clamp(64, 4_000_000);
    rabi_evolve_sliced(state, pulse, detuning, duration, slices)
}

/// As [`rabi_evolve`] with an explicit slice count for the driven part.
pub fn rabi_evolve_sliced(
    state: QubitState,
    pulse: &ShapedPulse,
    detuning: f64,
    duration: f64,
    slices: usize,
) -> Result<QubitState, GateError> {
    state.check()?;
    pulse.envelope.validate()?;
    if !(duration >= 0.0 && duration.is_finite()) || slices == 0 {
        return Err(GateError::InvalidInput("duration must be finite and non-negative".into()));
    }
    let driven = duration.min(pulse.envelope.duration());
    let dt = driven / slices as f64;
    let mut s = state;
    let mut prev = 0.0;
    let mut t_prev = 0.0;
    for k in 1..=slices {
        let t = if k == slices { driven } else { k as f64 * dt };
        let cum = pulse.envelope.cumulative(t);
        let h = t - t_prev;
        if h > 0.0 {
            s = propagate(s, pulse.peak_rabi * (cum - prev) / h, pulse.phase, detuning, h);
        }
        prev = cum;
        t_prev = t;
    }
    s = propagate(s, 0.0, 0.0, detuning, duration - driven);
    let n = s.norm_sqr().sqrt();
    Ok(QubitState { c_g: s.c_g / n, c_e: s.c_e / n })
}

/// Resonant rotation by an angle about the equatorial axis at `phase`.
pub fn rotate(state: QubitState, angle: f64, phase: f64) -> QubitState {
    propagate(state, angle, phase, 0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareLimits {
    /// Shortest modulator rise or fall time, s.
    pub min_edge: f64,
    /// Highest pulse repetition rate the modulator supports, Hz.
    pub max_repetition_rate: f64,
}

impl Default for HardwareLimits {
    fn default() -> Self {
        Self { min_edge: 2e-9, max_repetition_rate: 1e9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    /// s, envelope start
    pub start: f64,
    /// s
    pub flat: f64,
    pub rise: f64,
    pub fall: f64,
    /// rad/s
    pub peak_rabi: f64,
    /// rad
    pub phase: f64,
    pub target: u64,
}

impl Pulse {
    pub fn end(&self) -> f64 {
        self.start + self.rise + self.flat + self.fall
    }

    pub fn envelope(&self) -> Envelope {
        Envelope::Trapezoid { rise: self.rise, flat: self.flat, fall: self.fall }
    }

    /// Rabi frequency at absolute time t.
    pub fn rabi_at(&self, t: f64) -> f64 {
        self.peak_rabi * self.envelope().value(t - self.start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseTrain {
    /// Ion arrival period, s. Ion i crosses the waist centre at i × period.
    pub period: f64,
    pub pulses: Vec<Pulse>,
}

impl PulseTrain {
    /// Total drive at absolute time t.
    pub fn rabi_at(&self, t: f64) -> f64 {
        self.pulses.iter().map(|p| p.rabi_at(t)).sum()
    }

    /// Largest drive anywhere in [t0, t1]; zero iff no pulse overlaps the
    /// window's interior.
    pub fn max_in_window(&self, t0: f64, t1: f64) -> f64 {
        self.pulses
            .iter()
            .filter(|p| p.start < t1 && p.end() > t0)
            .map(|p| {
                let lo = t0.max(p.start);
                let hi = t1.min(p.end());
                let flat_lo = p.start + p.rise;
                let flat_hi = flat_lo + p.flat;
                if hi >= flat_lo && lo <= flat_hi {
                    p.peak_rabi
                } else {
                    p.rabi_at(lo).max(p.rabi_at(hi))
                }
            })
            .fold(0.0, f64::max)
    }

    /// Documented CSV, ns and MHz at the boundary:
    ///
    /// ```text
    /// target,start_ns,rise_ns,flat_ns,fall_ns,peak_rabi_mhz,phase_rad
    /// ```
    ///
    /// `peak_rabi_mhz` is Ω/2π.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "target,start_ns,rise_ns,flat_ns,fall_ns,peak_rabi_mhz,phase_rad")?;
        for p in &self.pulses {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                p.target,
                p.start * 1e9,
                p.rise * 1e9,
                p.flat * 1e9,
                p.fall * 1e9,
                p.peak_rabi / (2.0 * PI) / 1e6,
                p.phase
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    pub limits: HardwareLimits,
    /// Pulse area ∫Ω dt, rad (π for a flip).
    pub area: f64,
    pub phase: f64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self { limits: HardwareLimits::default(), area: PI, phase: 0.0 }
    }
}

/// One trapezoidal π pulse per target, centred on its transit, with default
/// hardware limits.
pub fn schedule_pulses(arrival_rate: f64, targets: &[u64], pulse_length: f64, rise_fall: f64) -> Result<PulseTrain, GateError> {
    schedule_pulses_with(arrival_rate, targets, pulse_length, rise_fall, &ScheduleOptions::default())
}

pub fn schedule_pulses_with(
    arrival_rate: f64,
    targets: &[u64],
    pulse_length: f64,
    rise_fall: f64,
    options: &ScheduleOptions,
) -> Result<PulseTrain, GateError> {
    if !(arrival_rate > 0.0 && arrival_rate.is_finite()) {
        return Err(GateError::InvalidInput("arrival rate must be positive".into()));
    }
    if !(pulse_length >= 0.0 && rise_fall >= 0.0) || pulse_length + rise_fall <= 0.0 {
        return Err(GateError::InvalidInput("pulse length and edges must be non-negative".into()));
    }
    let period = 1.0 / arrival_rate;
    let total = pulse_length + 2.0 * rise_fall;
    if total > period * (1.0 + 1e-12) {
        return Err(GateError::Crosstalk {
            pulse_length,
            rise_fall,
            period,
            max_pulse_length: (period - 2.0 * rise_fall).max(0.0),
        });
    }
    if rise_fall < options.limits.min_edge * (1.0 - 1e-12) {
        return Err(GateError::Hardware(format!(
            "edge {rise_fall:e} s is faster than the {:e} s modulator minimum",
            options.limits.min_edge
        )));
    }
    let mut sorted = targets.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(GateError::InvalidInput("duplicate target".into()));
    }
    if let Some(gap) = sorted.windows(2).map(|w| w[1] - w[0]).min() {
        let rate = arrival_rate / gap as f64;
        if rate > options.limits.max_repetition_rate {
            return Err(GateError::Hardware(format!(
                "repetition rate {rate:e} Hz exceeds the {:e} Hz modulator cap",
                options.limits.max_repetition_rate
            )));
        }
    }
    let effective = pulse_length + rise_fall;
    let peak = options.area / effective;
    let pulses = sorted
        .iter()
        .map(|&i| Pulse {
            start: i as f64 * period - 0.5 * total,
            flat: pulse_length,
            rise: rise_fall,
            fall: rise_fall,
            peak_rabi: peak,
            phase: options.phase,
            target: i,
        })
        .collect();
    Ok(PulseTrain { period, pulses })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingRequest {
    /// s
    pub pulse_length: f64,
    pub eta: f64,
    pub n_ions: f64,
    /// Orbital velocity, m/s.
    pub velocity: f64,
    /// Ion spacing, m.
    pub spacing: f64,
    /// m
    pub waist: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingBudget {
    /// 2π/τ, rad/s
    pub single_ion_rabi: f64,
    /// W/m²
    pub intensity: f64,
    /// s
    pub n_ion_gate_time: f64,
    /// Ion arrival rate the modulator must follow, Hz.
    pub modulator_rate: f64,
    /// w₀/(2v), s
    pub formula_pulse_length: f64,
}

pub fn switching_budget(species: &IonSpecies, request: &SwitchingRequest) -> Result<SwitchingBudget, GateError> {
    let sw = budget::switching_pulse_requirements(species, request.pulse_length)?;
    let gate = budget::n_ion_gate_time(sw.rabi_freq, request.eta, request.n_ions)?;
    let timing = budget::pulse_timing(request.waist, request.velocity, request.spacing)?;
    Ok(SwitchingBudget {
        single_ion_rabi: sw.rabi_freq,
        intensity: sw.required_intensity,
        n_ion_gate_time: gate,
        modulator_rate: timing.arrival_rate,
        formula_pulse_length: timing.formula_pulse_length,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatePlan {
    /// Rotation axis as an equatorial phase, rad.
    pub axis_phase: f64,
    pub target_angle: f64,
    pub passes: usize,
    /// Rotation angle per pass.
    pub fragments: Vec<f64>,
    /// Running total after each pass.
    pub accumulated: Vec<f64>,
    /// s
    pub wall_clock: f64,
    pub revolution_period: f64,
    /// Exponential contrast decay time between passes; `None` = coherent.
    pub coherence_time: Option<f64>,
}

/// Split a rotation into ⌈target/max⌉ equal passes, one per revolution.
pub fn plan_piecewise_gate(target_angle: f64, max_angle_per_pass: f64, revolution_period: f64) -> Result<GatePlan, GateError> {
    if !(max_angle_per_pass > 0.0 && max_angle_per_pass.is_finite()) {
        return Err(GateError::InvalidInput("max angle per pass must be positive".into()));
    }
    if !(revolution_period > 0.0) || !target_angle.is_finite() {
        return Err(GateError::InvalidInput("revolution period must be positive and the angle finite".into()));
    }
    let ratio = target_angle.abs() / max_angle_per_pass;
    let passes = if target_angle == 0.0 { 0 } else { (ratio - 1e-12).ceil().max(1.0) as usize };
    let fragment = if passes == 0 { 0.0 } else { target_angle / passes as f64 };
    let fragments = vec![fragment; passes];
    let mut acc = 0.0;
    let accumulated = fragments
        .iter()
        .map(|f| {
            acc += f;
            acc
        })
        .collect();
    Ok(GatePlan {
        axis_phase: 0.0,
        target_angle,
        passes,
        fragments,
        accumulated,
        wall_clock: passes as f64 * revolution_period,
        revolution_period,
        coherence_time: None,
    })
}

impl GatePlan {
    pub fn with_axis(mut self, phase: f64) -> Self {
        self.axis_phase = phase;
        self
    }

    pub fn with_coherence_time(mut self, t: Option<f64>) -> Self {
        self.coherence_time = t;
        self
    }

    /// Contrast remaining after the plan, exp(−T_wall/T_c).
    pub fn contrast(&self) -> f64 {
        match self.coherence_time {
            Some(tc) if tc > 0.0 => (-self.wall_clock / tc).exp(),
            _ => 1.0,
        }
    }

    /// Run each fragment as a resonant pulse of the given envelope shape.
    pub fn execute(&self, state: QubitState, envelope: Envelope) -> Result<ExecutedPlan, GateError> {
        let mut s = state;
        for &f in &self.fragments {
            let pulse = ShapedPulse::with_area(envelope, f, self.axis_phase)?;
            s = rabi_evolve(s, &pulse, 0.0, envelope.duration())?;
        }
        let contrast = self.contrast();
        let p = s.excited_population();
        let p0 = state.excited_population();
        Ok(ExecutedPlan {
            state: s,
            contrast,
            excited_population: p0 + contrast * (p - p0) + (1.0 - contrast) * (0.5 - p0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutedPlan {
    /// Coherent (phase-continuous) result.
    pub state: QubitState,
    pub contrast: f64,
    /// Population after mixing towards ½ by the lost contrast.
    pub excited_population: f64,
}

//! Coulomb-crystal statics and normal modes in an anisotropic harmonic trap.
//!
//! Internally everything runs in the natural units of the problem: length
//! ℓ = (k_e q² / (m ω_z²))^(1/3) and energy m ω_z² ℓ². In those units the
//! potential is
//!
//! ```text
//! U = Σ_i ½ (a_x x_i² + a_y y_i² + z_i²) + Σ_{i<j} 1/|r_i − r_j|,   a = (ω/ω_z)²
//! ```
//!
//! so solutions for different species and trap strengths are the same
//! dimensionless configuration rescaled. Ring curvature is ignored: the
//! chain is treated as locally straight.

use std::cmp::Ordering;
use std::io::{self, Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physcore::constants::COULOMB;
use crate::physcore::IonSpecies;

/// Dense eigensolves are refused above this many ions (6000×6000).
pub const DENSE_ION_CAP: usize = 2000;

/// Closest allowed approach of two ions, m.
pub const COLLISION_GUARD: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrystalError {
    #[error("invalid trap: {0}")]
    InvalidTrap(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("equilibrium solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("configuration is not a minimum: {} negative Hessian eigenvalue(s), modes {modes:?}", modes.len())]
    Unstable { modes: Vec<usize>, eigenvalues: Vec<f64> },
    #[error("{n} ions exceeds the dense eigensolver cap of {cap}; use band_edges")]
    TooLarge { n: usize, cap: usize },
    #[error("ions {0} and {1} collided")]
    Collision(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapPotential {
    pub omega_x: f64,
    pub omega_y: f64,
    pub omega_z: f64,
    pub mass: f64,
    pub charge: f64,
}

impl TrapPotential {
    pub fn new(omega_x: f64, omega_y: f64, omega_z: f64, mass: f64, charge: f64) -> Result<Self, CrystalError> {
        let t = Self { omega_x, omega_y, omega_z, mass, charge };
        t.validate()?;
        Ok(t)
    }

    pub fn for_species(species: &IonSpecies, omega_x: f64, omega_y: f64, omega_z: f64) -> Result<Self, CrystalError> {
        Self::new(omega_x, omega_y, omega_z, species.isotope_mass, species.charge)
    }

    pub fn validate(&self) -> Result<(), CrystalError> {
        for (name, v) in [
            ("omega_x", self.omega_x),
            ("omega_y", self.omega_y),
            ("omega_z", self.omega_z),
            ("mass", self.mass),
            ("charge", self.charge),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CrystalError::InvalidTrap(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// ℓ = (k_e q² / (m ω_z²))^(1/3)
    pub fn length_scale(&self) -> f64 {
        (COULOMB * self.charge * self.charge / (self.mass * self.omega_z * self.omega_z)).cbrt()
    }

    /// m ω_z² ℓ²
    pub fn energy_scale(&self) -> f64 {
        let l = self.length_scale();
        self.mass * self.omega_z * self.omega_z * l * l
    }

    /// Two-ion spacing, 2^(1/3) ℓ.
    pub fn pair_spacing(&self) -> f64 {
        2f64.cbrt() * self.length_scale()
    }

    /// Characteristic Coulomb force k_e q²/Δ² at the pair spacing, N.
    pub fn force_scale(&self) -> f64 {
        let d = self.pair_spacing();
        COULOMB * self.charge * self.charge / (d * d)
    }

    fn anisotropy(&self) -> [f64; 3] {
        let ax = self.omega_x / self.omega_z;
        let ay = self.omega_y / self.omega_z;
        [ax * ax, ay * ay, 1.0]
    }

    /// Same trap with all three frequencies multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            omega_x: self.omega_x * factor,
            omega_y: self.omega_y * factor,
            omega_z: self.omega_z * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Gradient ∞-norm tolerance relative to [`TrapPotential::force_scale`].
    pub relative_tolerance: f64,
    /// Amplitude of the deterministic transverse jitter in the default
    /// seed, relative to the pair spacing. Breaks the axial symmetry so the
    /// solver can leave the linear chain when it is unstable.
    pub seed_jitter: f64,
    /// Extra pseudo-random starting layouts tried for crystals of at most
    /// [`SolverSettings::random_start_cap`] ions.
    pub random_starts: usize,
    pub random_start_cap: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            relative_tolerance: 1e-10,
            seed_jitter: 1e-3,
            random_starts: 12,
            random_start_cap: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalState {
    /// Equilibrium coordinates (x, y, z), m.
    pub positions: Vec<[f64; 3]>,
    /// ∞-norm of the force residual at the returned positions, N.
    pub residual_gradient_norm: f64,
    /// J
    pub potential_energy: f64,
    pub iterations: usize,
}

impl CrystalState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn center_of_mass(&self) -> [f64; 3] {
        let n = self.positions.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }

    pub fn min_separation(&self) -> f64 {
        min_separation(&self.positions)
    }

    /// True when every ion sits on the z axis to within `tol` of the pair
    /// spacing.
    pub fn is_linear(&self, trap: &TrapPotential, tol: f64) -> bool {
        let scale = trap.pair_spacing();
        self.positions
            .iter()
            .all(|p| p[0].abs() <= tol * scale && p[1].abs() <= tol * scale)
    }
}

fn min_separation(positions: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..positions.len() {
        for j in 0..i {
            best = best.min(dist(&positions[i], &positions[j]));
        }
    }
    best
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Dimensionless potential energy.
fn energy(r: &[f64], a: [f64; 3]) -> f64 {
    let n = r.len() / 3;
    let mut u = 0.0;
    for i in 0..n {
        for k in 0..3 {
            u += 0.5 * a[k] * r[3 * i + k] * r[3 * i + k];
        }
        for j in 0..i {
            let d = [r[3 * i] - r[3 * j], r[3 * i + 1] - r[3 * j + 1], r[3 * i + 2] - r[3 * j + 2]];
            u += 1.0 / (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
    }
    u
}

/// Dimensionless gradient.
fn gradient(r: &[f64], a: [f64; 3]) -> Vec<f64> {
    let n = r.len() / 3;
    let mut g = vec![0.0; r.len()];
    for i in 0..n {
        for k in 0..3 {
            g[3 * i + k] += a[k] * r[3 * i + k];
        }
        for j in 0..i {
            let d = [r[3 * i] - r[3 * j], r[3 * i + 1] - r[3 * j + 1], r[3 * i + 2] - r[3 * j + 2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let inv3 = 1.0 / (r2 * r2.sqrt());
            for k in 0..3 {
                g[3 * i + k] -= d[k] * inv3;
                g[3 * j + k] += d[k] * inv3;
            }
        }
    }
    g
}

/// Second derivative of 1/|d| with respect to r_i: (3 d dᵀ − |d|² I)/|d|⁵.
fn coulomb_block(d: [f64; 3]) -> [[f64; 3]; 3] {
    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let r = r2.sqrt();
    let inv5 = 1.0 / (r2 * r2 * r);
    let mut b = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            b[p][q] = 3.0 * d[p] * d[q] * inv5;
        }
        b[p][p] -= r2 * inv5;
    }
    b
}

/// Dimensionless Hessian, each block evaluated from its own row's
/// perspective (block (j,i) uses r_j − r_i).
fn hessian(r: &[f64], a: [f64; 3]) -> DMatrix<f64> {
    let n = r.len() / 3;
    let mut h = DMatrix::<f64>::zeros(3 * n, 3 * n);
    for i in 0..n {
        for k in 0..3 {
            h[(3 * i + k, 3 * i + k)] += a[k];
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = [r[3 * i] - r[3 * j], r[3 * i + 1] - r[3 * j + 1], r[3 * i + 2] - r[3 * j + 2]];
            let b = coulomb_block(d);
            for p in 0..3 {
                for q in 0..3 {
                    h[(3 * i + p, 3 * i + q)] += b[p][q];
                    h[(3 * i + p, 3 * j + q)] -= b[p][q];
                }
            }
        }
    }
    h
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn flatten(positions: &[[f64; 3]], scale: f64) -> Vec<f64> {
    positions.iter().flat_map(|p| p.iter().map(move |x| x / scale)).collect()
}

/// Deterministic starting layouts tried when no seed is given: the relaxed
/// axial chain with a small alternating offset along the softer transverse
/// axis (a zigzag germ), and the same chain with a pseudo-random transverse
/// jitter. The lowest-energy converged result wins.
pub fn default_seeds(trap: &TrapPotential, n_ions: usize, settings: &SolverSettings) -> Vec<Vec<[f64; 3]>> {
    let scale = trap.length_scale();
    let spacing = trap.pair_spacing();
    let z: Vec<f64> = match axial_chain(n_ions, 200) {
        Ok(z) => z.iter().map(|x| x * scale).collect(),
        Err(_) => {
            let mid = (n_ions as f64 - 1.0) / 2.0;
            (0..n_ions).map(|i| (i as f64 - mid) * spacing).collect()
        }
    };
    if n_ions == 1 {
        return vec![vec![[0.0, 0.0, z[0]]]];
    }
    let amp = settings.seed_jitter * spacing;
    let soft = if trap.omega_x <= trap.omega_y { 0 } else { 1 };
    let zigzag = z
        .iter()
        .enumerate()
        .map(|(i, &zi)| {
            let mut p = [0.0, 0.0, zi];
            p[soft] = if i % 2 == 0 { amp } else { -amp };
            p[1 - soft] = 0.1 * amp * if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
            p
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    let jitter = z
        .iter()
        .map(|&zi| {
            let jx: f64 = rng.random_range(-1.0..1.0);
            let jy: f64 = rng.random_range(-1.0..1.0);
            [jx * amp, jy * amp, zi]
        })
        .collect();
    let mut seeds = vec![zigzag, jitter];
    if n_ions <= settings.random_start_cap {
        let half = z.iter().fold(spacing, |m, x| m.max(x.abs()));
        let extent = [
            (half * trap.omega_z / trap.omega_x).max(spacing),
            (half * trap.omega_z / trap.omega_y).max(spacing),
            half,
        ];
        for _ in 0..settings.random_starts {
            seeds.push(
                (0..n_ions)
                    .map(|_| {
                        let mut p = [0.0; 3];
                        for k in 0..3 {
                            p[k] = rng.random_range(-1.0..1.0) * extent[k];
                        }
                        p
                    })
                    .collect(),
            );
        }
    }
    seeds
}

/// Minimize the trap + Coulomb energy with default solver settings.
pub fn solve_equilibrium(
    trap: &TrapPotential,
    n_ions: usize,
    seed_layout: Option<&[[f64; 3]]>,
) -> Result<CrystalState, CrystalError> {
    solve_equilibrium_with(trap, n_ions, seed_layout, &SolverSettings::default())
}

/// Damped Newton minimization. Steps are Newton directions on a shifted
/// Hessian (the shift grows until the system is positive definite, which
/// degrades towards gradient descent far from the minimum), capped so no
/// ion moves more than a quarter of the current nearest-neighbour distance,
/// then backtracked on the energy.
pub fn solve_equilibrium_with(
    trap: &TrapPotential,
    n_ions: usize,
    seed_layout: Option<&[[f64; 3]]>,
    settings: &SolverSettings,
) -> Result<CrystalState, CrystalError> {
    trap.validate()?;
    if n_ions == 0 {
        return Err(CrystalError::InvalidRequest("n_ions must be at least 1".into()));
    }
    match seed_layout {
        Some(s) if s.len() != n_ions => Err(CrystalError::InvalidRequest(format!(
            "seed layout has {} ions, expected {n_ions}",
            s.len()
        ))),
        Some(s) => minimize(trap, s, settings),
        None => {
            let mut best: Option<CrystalState> = None;
            let mut first_err = None;
            for seed in default_seeds(trap, n_ions, settings) {
                match minimize(trap, &seed, settings) {
                    Ok(st) => {
                        // degenerate mirror images must not flip on rounding
                        let better = |b: &CrystalState| {
                            st.potential_energy < b.potential_energy - 1e-10 * b.potential_energy.abs()
                        };
                        if best.as_ref().is_none_or(better) {
                            best = Some(st);
                        }
                    }
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            best.ok_or_else(|| first_err.expect("at least one seed"))
        }
    }
}

fn minimize(trap: &TrapPotential, seed: &[[f64; 3]], settings: &SolverSettings) -> Result<CrystalState, CrystalError> {
    let n_ions = seed.len();
    let scale = trap.length_scale();
    if n_ions > 1 && min_separation(seed) < COLLISION_GUARD {
        return Err(CrystalError::InvalidRequest("seed layout has coincident ions".into()));
    }
    let a = trap.anisotropy();
    let mut r = flatten(seed, scale);
    // dimensionless force scale is 2^(-2/3)
    let tol = settings.relative_tolerance * 2f64.powf(-2.0 / 3.0);
    let mut g = gradient(&r, a);
    let mut u = energy(&r, a);
    let mut iterations = 0;

    while inf_norm(&g) >= tol {
        if iterations >= settings.max_iterations {
            return Err(CrystalError::NotConverged {
                iterations,
                residual: inf_norm(&g) * trap.energy_scale() / scale,
            });
        }
        iterations += 1;
        let h = hessian(&r, a);
        let step = newton_direction(&h, &g);
        let slope: f64 = step.iter().zip(&g).map(|(s, gi)| s * gi).sum();

        let mut alpha = step_cap(&r, &step);
        let g_norm = inf_norm(&g);
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = r.iter().zip(&step).map(|(x, s)| x + alpha * s).collect();
            let u_trial = energy(&trial, a);
            let sufficient = u_trial <= u + 1e-4 * alpha * slope;
            // near the minimum energy differences drown in rounding; fall
            // back to requiring a smaller residual
            let flat = (u_trial - u).abs() <= 1e-13 * u.abs().max(1.0);
            let g_trial = if sufficient || flat { Some(gradient(&trial, a)) } else { None };
            if let Some(gt) = g_trial {
                if sufficient || inf_norm(&gt) < g_norm {
                    r = trial;
                    u = u_trial;
                    g = gt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(CrystalError::NotConverged {
                iterations,
                residual: inf_norm(&g) * trap.energy_scale() / scale,
            });
        }
    }

    let positions: Vec<[f64; 3]> = r
        .chunks(3)
        .map(|c| [c[0] * scale, c[1] * scale, c[2] * scale])
        .collect();
    if n_ions > 1 {
        if let Some((i, j)) = first_collision(&positions) {
            return Err(CrystalError::Collision(i, j));
        }
    }
    Ok(CrystalState {
        positions,
        residual_gradient_norm: inf_norm(&g) * trap.energy_scale() / scale,
        potential_energy: u * trap.energy_scale(),
        iterations,
    })
}

fn first_collision(positions: &[[f64; 3]]) -> Option<(usize, usize)> {
    for i in 0..positions.len() {
        for j in 0..i {
            if dist(&positions[i], &positions[j]) < COLLISION_GUARD {
                return Some((j, i));
            }
        }
    }
    None
}

fn newton_direction(h: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let n = h.nrows();
    let rhs = DVector::from_iterator(n, g.iter().map(|x| -x));
    let diag_max = (0..n).map(|i| h[(i, i)].abs()).fold(0.0f64, f64::max).max(1.0);
    let mut shift = 0.0;
    loop {
        let mut m = h.clone();
        for i in 0..n {
            m[(i, i)] += shift;
        }
        if let Some(chol) = m.cholesky() {
            return chol.solve(&rhs).iter().copied().collect();
        }
        shift = if shift == 0.0 { 1e-6 * diag_max } else { shift * 10.0 };
        if shift > 1e12 * diag_max {
            return rhs.iter().copied().collect();
        }
    }
}

/// Largest step fraction such that no ion moves more than a quarter of the
/// current closest-pair distance.
fn step_cap(r: &[f64], step: &[f64]) -> f64 {
    let n = r.len() / 3;
    if n < 2 {
        return 1.0;
    }
    let mut dmin = f64::INFINITY;
    for i in 0..n {
        for j in 0..i {
            let d2: f64 = (0..3).map(|k| (r[3 * i + k] - r[3 * j + k]).powi(2)).sum();
            dmin = dmin.min(d2);
        }
    }
    let dmin = dmin.sqrt();
    let max_move = step
        .chunks(3)
        .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
        .fold(0.0f64, f64::max);
    if max_move <= 0.25 * dmin {
        1.0
    } else {
        0.25 * dmin / max_move
    }
}

/// Potential energy of an arbitrary configuration, J.
pub fn potential_energy(trap: &TrapPotential, positions: &[[f64; 3]]) -> f64 {
    let scale = trap.length_scale();
    energy(&flatten(positions, scale), trap.anisotropy()) * trap.energy_scale()
}

/// Coulomb force on each ion from all the others, N.
pub fn coulomb_forces(trap: &TrapPotential, positions: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let kq2 = COULOMB * trap.charge * trap.charge;
    let n = positions.len();
    let mut f = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = [
                positions[i][0] - positions[j][0],
                positions[i][1] - positions[j][1],
                positions[i][2] - positions[j][2],
            ];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let inv3 = 1.0 / (r2 * r2.sqrt());
            for k in 0..3 {
                f[i][k] += kq2 * d[k] * inv3;
            }
        }
    }
    f
}

/// Hessian of the potential in SI units (N/m), as assembled (before any
/// symmetrization).
pub fn hessian_si(trap: &TrapPotential, positions: &[[f64; 3]]) -> DMatrix<f64> {
    let scale = trap.length_scale();
    let h = hessian(&flatten(positions, scale), trap.anisotropy());
    h * (trap.mass * trap.omega_z * trap.omega_z)
}

/// Which part of the spectrum a mode belongs to, by dominant displacement
/// axis of its eigenvector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Axial,
    TransverseX,
    TransverseY,
    /// Both transverse axes.
    Transverse,
    All,
}

impl Branch {
    fn admits(self, axis: usize) -> bool {
        match self {
            Branch::Axial => axis == 2,
            Branch::TransverseX => axis == 0,
            Branch::TransverseY => axis == 1,
            Branch::Transverse => axis != 2,
            Branch::All => true,
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "axial" => Ok(Branch::Axial),
            "transverse_x" | "x" => Ok(Branch::TransverseX),
            "transverse_y" | "y" => Ok(Branch::TransverseY),
            "transverse" => Ok(Branch::Transverse),
            "all" => Ok(Branch::All),
            other => Err(format!("unknown branch `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhononSpectrum {
    /// Mode frequencies ω_i, rad/s, ascending.
    pub frequencies: Vec<f64>,
    /// Column i is the mass-weighted eigenvector of mode i.
    pub eigenvectors: DMatrix<f64>,
    /// Dominant axis (0 = x, 1 = y, 2 = z) of each mode.
    pub dominant_axis: Vec<usize>,
    pub band_min: f64,
    pub band_max: f64,
    pub band_width: f64,
}

impl PhononSpectrum {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn branch(&self, branch: Branch) -> Vec<f64> {
        self.frequencies
            .iter()
            .zip(&self.dominant_axis)
            .filter(|(_, &ax)| branch.admits(ax))
            .map(|(&w, _)| w)
            .collect()
    }

    /// max |VᵀV − I|
    pub fn orthonormality_residual(&self) -> f64 {
        let v = &self.eigenvectors;
        let p = v.transpose() * v;
        let mut worst = 0.0f64;
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Normal modes of a single-species crystal.
pub fn phonon_modes(state: &CrystalState, trap: &TrapPotential) -> Result<PhononSpectrum, CrystalError> {
    phonon_modes_with_masses(state, trap, None)
}

/// Normal modes with per-ion masses (mixed isotopes). The trap's spring
/// constants m_ref ω² are shared by all ions; only the inertia differs.
pub fn phonon_modes_with_masses(
    state: &CrystalState,
    trap: &TrapPotential,
    masses: Option<&[f64]>,
) -> Result<PhononSpectrum, CrystalError> {
    trap.validate()?;
    let n = state.positions.len();
    if n == 0 {
        return Err(CrystalError::InvalidRequest("empty crystal".into()));
    }
    if n > DENSE_ION_CAP {
        return Err(CrystalError::TooLarge { n, cap: DENSE_ION_CAP });
    }
    if let Some(m) = masses {
        if m.len() != n || m.iter().any(|x| !(*x > 0.0)) {
            return Err(CrystalError::InvalidRequest("masses must be positive, one per ion".into()));
        }
    }
    let scale = trap.length_scale();
    let mut h = hessian(&flatten(&state.positions, scale), trap.anisotropy());
    // mass weighting relative to the trap mass
    if let Some(m) = masses {
        let w: Vec<f64> = (0..3 * n).map(|i| (trap.mass / m[i / 3]).sqrt()).collect();
        for i in 0..3 * n {
            for j in 0..3 * n {
                h[(i, j)] *= w[i] * w[j];
            }
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    let eig = h.symmetric_eigen();

    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut order: Vec<usize> = (0..3 * n).collect();
    let cols: Vec<Vec<f64>> = (0..3 * n)
        .map(|c| orient(eig.eigenvectors.column(c).iter().copied().collect()))
        .collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .unwrap_or(Ordering::Equal)
            .then_with(|| lexicographic(&cols[i], &cols[j]))
    });

    let unstable: Vec<usize> = order
        .iter()
        .enumerate()
        .filter(|(_, &c)| eig.eigenvalues[c] < -1e-9 * lambda_max)
        .map(|(rank, _)| rank)
        .collect();
    if !unstable.is_empty() {
        return Err(CrystalError::Unstable {
            eigenvalues: unstable.iter().map(|&k| eig.eigenvalues[order[k]]).collect(),
            modes: unstable,
        });
    }

    let mut frequencies = Vec::with_capacity(3 * n);
    let mut dominant_axis = Vec::with_capacity(3 * n);
    let mut vectors = DMatrix::<f64>::zeros(3 * n, 3 * n);
    for (rank, &c) in order.iter().enumerate() {
        frequencies.push(trap.omega_z * eig.eigenvalues[c].max(0.0).sqrt());
        let v = &cols[c];
        let mut weight = [0.0; 3];
        for (k, x) in v.iter().enumerate() {
            weight[k % 3] += x * x;
        }
        let axis = (0..3)
            .max_by(|&a, &b| weight[a].partial_cmp(&weight[b]).unwrap_or(Ordering::Equal))
            .unwrap_or(2);
        dominant_axis.push(axis);
        for (k, x) in v.iter().enumerate() {
            vectors[(k, rank)] = *x;
        }
    }
    let band_min = frequencies[0];
    let band_max = *frequencies.last().expect("non-empty");
    Ok(PhononSpectrum {
        frequencies,
        eigenvectors: vectors,
        dominant_axis,
        band_min,
        band_max,
        band_width: band_max - band_min,
    })
}

/// Flip the sign so the first non-negligible component is positive.
fn orient(mut v: Vec<f64>) -> Vec<f64> {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match y.partial_cmp(x) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

/// Equilibrium of a chain constrained to the z axis, dimensionless
/// coordinates, ascending.
fn axial_chain(n: usize, max_iterations: usize) -> Result<Vec<f64>, CrystalError> {
    let spacing = 2f64.cbrt();
    let mid = (n as f64 - 1.0) / 2.0;
    let mut z: Vec<f64> = (0..n).map(|i| (i as f64 - mid) * spacing).collect();
    let tol = 1e-13 * (n as f64).max(1.0);
    for it in 0..=max_iterations {
        let mut g = z.clone();
        let mut h = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = z[i] - z[j];
                g[i] -= d.signum() / (d * d);
                let k = 2.0 / d.abs().powi(3);
                h[(i, i)] += k;
                h[(i, j)] -= k;
            }
        }
        if inf_norm(&g) < tol {
            return Ok(z);
        }
        if it == max_iterations {
            return Err(CrystalError::NotConverged { iterations: it, residual: inf_norm(&g) });
        }
        let step = newton_direction(&h, &g);
        // keep the ordering: never move an ion past half the gap to a neighbour
        let mut alpha = 1.0f64;
        for i in 0..n.saturating_sub(1) {
            let gap = z[i + 1] - z[i];
            let closing = step[i] - step[i + 1];
            if closing > 0.0 {
                alpha = alpha.min(0.5 * gap / closing);
            }
        }
        for i in 0..n {
            z[i] += alpha * step[i];
        }
    }
    unreachable!()
}

/// Dimensionless transverse Coulomb matrix of an axial chain: the part of
/// the x (or y) Hessian block that does not depend on the confinement.
fn transverse_coulomb(z: &[f64]) -> DMatrix<f64> {
    let n = z.len();
    let mut c = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let k = 1.0 / (z[i] - z[j]).abs().powi(3);
                c[(i, i)] -= k;
                c[(i, j)] += k;
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZigzagCheck {
    pub is_linear_stable: bool,
    /// Lowest transverse mode of the linear chain, rad/s. Negative values
    /// encode an imaginary frequency −sqrt(|λ|/m).
    pub lowest_transverse_mode: f64,
    /// Smallest eigenvalue of the transverse Hessian block, N/m.
    pub lowest_transverse_eigenvalue: f64,
}

/// Stability of the linear chain against buckling into a zigzag.
pub fn zigzag_stability(trap: &TrapPotential, n_ions: usize) -> Result<ZigzagCheck, CrystalError> {
    trap.validate()?;
    if n_ions < 3 {
        return Err(CrystalError::InvalidRequest("zigzag check needs at least 3 ions".into()));
    }
    let z = axial_chain(n_ions, 200)?;
    let c = transverse_coulomb(&z);
    let a = trap.anisotropy();
    let mut lowest = f64::INFINITY;
    for axis in 0..2 {
        let k = DMatrix::<f64>::identity(n_ions, n_ions) * a[axis] + &c;
        let k = (&k + k.transpose()) * 0.5;
        let min = k.symmetric_eigenvalues().iter().fold(f64::INFINITY, |m, &x| m.min(x));
        lowest = lowest.min(min);
    }
    let spring = trap.mass * trap.omega_z * trap.omega_z;
    let mode = trap.omega_z * lowest.abs().sqrt() * lowest.signum();
    Ok(ZigzagCheck {
        is_linear_stable: lowest > 0.0,
        lowest_transverse_mode: mode,
        lowest_transverse_eigenvalue: lowest * spring,
    })
}

/// Bisect on ω_x/ω_z (with ω_y = ω_x) for the anisotropy at which the
/// lowest transverse eigenvalue of an N-ion chain crosses zero.
pub fn critical_anisotropy(n_ions: usize, lo: f64, hi: f64, rel_tol: f64) -> Result<f64, CrystalError> {
    let trap_at = |ratio: f64| TrapPotential {
        omega_x: ratio,
        omega_y: ratio,
        omega_z: 1.0,
        mass: 1.0,
        charge: 1.0,
    };
    let stable = |ratio: f64| zigzag_stability(&trap_at(ratio), n_ions).map(|c| c.is_linear_stable);
    let (mut lo, mut hi) = (lo, hi);
    if stable(lo)? || !stable(hi)? {
        return Err(CrystalError::InvalidRequest(format!(
            "bracket [{lo}, {hi}] does not straddle the zigzag transition"
        )));
    }
    while (hi - lo) > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if stable(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub count: usize,
    /// rad/s
    pub width: f64,
    /// width/(count − 1); zero for a single mode.
    pub mean_spacing: f64,
    /// Smallest adjacent gap; zero for a single mode.
    pub min_spacing: f64,
}

pub fn band_statistics(spectrum: &PhononSpectrum, branch: Branch) -> Result<BandStats, CrystalError> {
    let f = spectrum.branch(branch);
    if f.is_empty() {
        return Err(CrystalError::InvalidRequest(format!("no modes in branch {branch:?}")));
    }
    let width = f[f.len() - 1] - f[0];
    let min_spacing = f
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    Ok(BandStats {
        count: f.len(),
        width,
        mean_spacing: if f.len() > 1 { width / (f.len() - 1) as f64 } else { 0.0 },
        min_spacing: if f.len() > 1 { min_spacing } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandEdges {
    /// rad/s
    pub lowest: f64,
    pub highest: f64,
    pub lanczos_steps: usize,
}

/// Extremal mode frequencies by Lanczos iteration on the matrix-free
/// Hessian, for crystals beyond the dense cap.
pub fn band_edges(state: &CrystalState, trap: &TrapPotential, max_steps: usize) -> Result<BandEdges, CrystalError> {
    trap.validate()?;
    let n = state.positions.len();
    if n == 0 {
        return Err(CrystalError::InvalidRequest("empty crystal".into()));
    }
    let r = flatten(&state.positions, trap.length_scale());
    let a = trap.anisotropy();
    let dim = 3 * n;
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out: Vec<f64> = (0..dim).map(|k| a[k % 3] * v[k]).collect();
        for i in 0..n {
            for j in 0..i {
                let d = [r[3 * i] - r[3 * j], r[3 * i + 1] - r[3 * j + 1], r[3 * i + 2] - r[3 * j + 2]];
                let b = coulomb_block(d);
                for p in 0..3 {
                    let mut acc = 0.0;
                    for q in 0..3 {
                        acc += b[p][q] * (v[3 * i + q] - v[3 * j + q]);
                    }
                    out[3 * i + p] += acc;
                    out[3 * j + p] -= acc;
                }
            }
        }
        out
    };

    let steps_cap = max_steps.min(dim).max(1);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps_cap);
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    // deterministic start vector with weight on every coordinate
    let mut v: Vec<f64> = (0..dim).map(|k| 1.0 + 0.1 * ((k * 7919) % 13) as f64).collect();
    normalize(&mut v);
    let mut prev = (f64::NAN, f64::NAN);
    let mut edges = (0.0, 0.0);
    for step in 0..steps_cap {
        basis.push(v.clone());
        let mut w = apply(&v);
        let alpha: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        alphas.push(alpha);
        // full reorthogonalization, twice
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let beta = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let k = alphas.len();
        let mut t = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alphas[i];
            if i + 1 < k {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let ev = t.symmetric_eigenvalues();
        let lo = ev.iter().fold(f64::INFINITY, |m, &x| m.min(x));
        let hi = ev.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        edges = (lo, hi);
        let converged = (lo - prev.0).abs() <= 1e-13 * hi.abs() && (hi - prev.1).abs() <= 1e-13 * hi.abs();
        if beta <= 1e-12 * hi.abs().max(1.0) || (converged && step > 10) {
            break;
        }
        prev = (lo, hi);
        betas.push(beta);
        v = w.iter().map(|x| x / beta).collect();
    }
    if edges.0 < -1e-9 * edges.1.abs() {
        return Err(CrystalError::Unstable { modes: vec![0], eigenvalues: vec![edges.0] });
    }
    Ok(BandEdges {
        lowest: trap.omega_z * edges.0.max(0.0).sqrt(),
        highest: trap.omega_z * edges.1.max(0.0).sqrt(),
        lanczos_steps: alphas.len(),
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Column-oriented table written either as CSV or as a small binary file:
///
/// ```text
/// magic  b"RQCT"      4 bytes
/// version u32 LE      = 1
/// ncols   u32 LE
/// nrows   u64 LE
/// ncols × (name_len u32 LE, name UTF-8)
/// ncols × nrows f64 LE, column-major
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnarTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

const TABLE_MAGIC: &[u8; 4] = b"RQCT";

impl ColumnarTable {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn positions(state: &CrystalState) -> Self {
        let mut cols = vec![Vec::new(); 4];
        for (i, p) in state.positions.iter().enumerate() {
            cols[0].push(i as f64);
            for k in 0..3 {
                cols[k + 1].push(p[k]);
            }
        }
        Self {
            names: ["ion", "x_m", "y_m", "z_m"].map(String::from).to_vec(),
            columns: cols,
        }
    }

    pub fn spectrum(spectrum: &PhononSpectrum) -> Self {
        let mut cols = vec![Vec::new(); 4];
        for (i, (&w, &axis)) in spectrum.frequencies.iter().zip(&spectrum.dominant_axis).enumerate() {
            cols[0].push(i as f64);
            cols[1].push(w);
            cols[2].push(w / (2.0 * std::f64::consts::PI));
            cols[3].push(axis as f64);
        }
        Self {
            names: ["mode", "omega_rad_s", "freq_hz", "axis"].map(String::from).to_vec(),
            columns: cols,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", self.names.join(","))?;
        for r in 0..self.rows() {
            let row: Vec<String> = self.columns.iter().map(|c| format!("{}", c[r])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.columns.len() as u32).to_le_bytes())?;
        w.write_all(&(self.rows() as u64).to_le_bytes())?;
        for name in &self.names {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        for c in &self.columns {
            for x in c {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(bad("not a columnar table"));
        }
        let mut u4 = [0u8; 4];
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u4)?;
        if u32::from_le_bytes(u4) != 1 {
            return Err(bad("unsupported table version"));
        }
        r.read_exact(&mut u4)?;
        let ncols = u32::from_le_bytes(u4) as usize;
        r.read_exact(&mut u8b)?;
        let nrows = u64::from_le_bytes(u8b) as usize;
        let mut names = Vec::with_capacity(ncols);
        for _ in 0..ncols {
            r.read_exact(&mut u4)?;
            let mut buf = vec![0u8; u32::from_le_bytes(u4) as usize];
            r.read_exact(&mut buf)?;
            names.push(String::from_utf8(buf).map_err(|_| bad("column name is not UTF-8"))?);
        }
        let mut columns = Vec::with_capacity(ncols);
        for _ in 0..ncols {
            let mut col = Vec::with_capacity(nrows);
            for _ in 0..nrows {
                r.read_exact(&mut u8b)?;
                col.push(f64::from_le_bytes(u8b));
            }
            columns.push(col);
        }
        Ok(Self { names, columns })
    }
}

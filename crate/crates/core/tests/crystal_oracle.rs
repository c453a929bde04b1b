//! Crystal solver against independent oracles: multi-start gradient
//! minimization, finite-difference Hessians and a transverse eigen-scan.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringqc::crystal::*;
use ringqc::physcore::constants::COULOMB;

/// Trap in natural units: ω_z = m = k_e q² = 1, so lengths come out in ℓ.
fn unit_trap(ax: f64, ay: f64) -> TrapPotential {
    TrapPotential::new(ax, ay, 1.0, 1.0, (1.0 / COULOMB).sqrt()).unwrap()
}

fn energy(r: &[f64], a: [f64; 3]) -> f64 {
    let n = r.len() / 3;
    let mut u = 0.0;
    for i in 0..n {
        for k in 0..3 {
            u += 0.5 * a[k] * r[3 * i + k].powi(2);
        }
        for j in (i + 1)..n {
            let d2: f64 = (0..3).map(|k| (r[3 * i + k] - r[3 * j + k]).powi(2)).sum();
            u += 1.0 / d2.sqrt();
        }
    }
    u
}

fn gradient(r: &[f64], a: [f64; 3]) -> Vec<f64> {
    let n = r.len() / 3;
    let mut g: Vec<f64> = (0..r.len()).map(|i| a[i % 3] * r[i]).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d: Vec<f64> = (0..3).map(|k| r[3 * i + k] - r[3 * j + k]).collect();
                let r3 = d.iter().map(|x| x * x).sum::<f64>().powf(1.5);
                for k in 0..3 {
                    g[3 * i + k] -= d[k] / r3;
                }
            }
        }
    }
    g
}

/// Barzilai–Borwein descent from `starts` random configurations; returns
/// the lowest energy found.
fn brute_force_min(n: usize, a: [f64; 3], starts: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let box_half = (n as f64).cbrt() * 2.0;
    let mut best = f64::INFINITY;
    for _ in 0..starts {
        let mut r: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-box_half..box_half)).collect();
        let mut g = gradient(&r, a);
        let mut step: f64 = 1e-3;
        for _ in 0..40_000 {
            let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if gmax < 1e-11 {
                break;
            }
            let limit = 0.05 / gmax;
            let s_len = step.min(limit);
            let new_r: Vec<f64> = r.iter().zip(&g).map(|(x, gi)| x - s_len * gi).collect();
            let new_g = gradient(&new_r, a);
            let s: Vec<f64> = new_r.iter().zip(&r).map(|(x, y)| x - y).collect();
            let y: Vec<f64> = new_g.iter().zip(&g).map(|(x, y)| x - y).collect();
            let sy: f64 = s.iter().zip(&y).map(|(p, q)| p * q).sum();
            let ss: f64 = s.iter().map(|p| p * p).sum();
            step = if sy > 0.0 { ss / sy } else { 1e-3 };
            r = new_r;
            g = new_g;
        }
        best = best.min(energy(&r, a));
    }
    best
}

#[test]
fn newton_matches_multistart_minimum() {
    // linear chains and planar zigzags
    let cases: [(usize, f64, f64); 8] = [
        (2, 4.0, 4.5),
        (3, 3.0, 3.3),
        (4, 4.0, 4.4),
        (5, 1.0, 6.0),
        (6, 8.0, 8.5),
        (8, 1.2, 6.0),
        (10, 9.0, 9.5),
        (12, 1.5, 8.0),
    ];
    for (n, ax, ay) in cases {
        let trap = unit_trap(ax, ay);
        let state = solve_equilibrium(&trap, n, None).unwrap();
        let newton = state.potential_energy;
        let brute = brute_force_min(n, [ax * ax, ay * ay, 1.0], 50, n as u64);
        assert!(
            ((newton - brute) / brute).abs() < 1e-6,
            "N={n} ax={ax}: newton {newton} brute {brute}"
        );
    }
}

fn finite_difference_hessian(r: &[f64], a: [f64; 3]) -> DMatrix<f64> {
    let dim = r.len();
    let h = 1e-5;
    let mut m = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut p = r.to_vec();
        let mut q = r.to_vec();
        p[j] += h;
        q[j] -= h;
        let gp = gradient(&p, a);
        let gq = gradient(&q, a);
        for i in 0..dim {
            m[(i, j)] = (gp[i] - gq[i]) / (2.0 * h);
        }
    }
    (&m + m.transpose()) * 0.5
}

#[test]
fn three_ion_spectrum_matches_numeric_hessian() {
    let trap = unit_trap(5.0, 5.5);
    let state = solve_equilibrium(&trap, 3, None).unwrap();
    let spectrum = phonon_modes(&state, &trap).unwrap();
    let r: Vec<f64> = state.positions.iter().flatten().copied().collect();
    let mut numeric: Vec<f64> = finite_difference_hessian(&r, [25.0, 30.25, 1.0])
        .symmetric_eigenvalues()
        .iter()
        .map(|l| l.sqrt())
        .collect();
    numeric.sort_by(f64::total_cmp);
    for (w, o) in spectrum.frequencies.iter().zip(&numeric) {
        assert!((w - o).abs() / o < 1e-6, "{w} vs {o}");
    }
    let axial = spectrum.branch(Branch::Axial);
    for (w, e) in axial.iter().zip([1.0, 3f64.sqrt(), (29.0f64 / 5.0).sqrt()]) {
        assert!((w - e).abs() / e < 1e-6);
    }
}

/// Critical ω_x/ω_z from an independently relaxed axial chain: the top
/// eigenvalue of the transverse Coulomb coupling matrix.
fn eigen_scan_threshold(n: usize) -> f64 {
    let mut z: Vec<f64> = (0..n).map(|i| i as f64 - (n as f64 - 1.0) / 2.0).collect();
    for _ in 0..200_000 {
        let g: Vec<f64> = (0..n)
            .map(|i| {
                z[i] - (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (z[i] - z[j]).signum() / (z[i] - z[j]).powi(2))
                    .sum::<f64>()
            })
            .collect();
        if g.iter().all(|x| x.abs() < 1e-14) {
            break;
        }
        for i in 0..n {
            z[i] -= 0.05 * g[i];
        }
    }
    let mut c = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let k = 1.0 / (z[i] - z[j]).abs().powi(3);
                c[(i, i)] += k;
                c[(i, j)] -= k;
            }
        }
    }
    c.symmetric_eigenvalues().iter().fold(0.0f64, |m, &x| m.max(x)).sqrt()
}

#[test]
fn zigzag_threshold_single_flip_and_oracle() {
    for n in [3usize, 5, 10] {
        let crit = critical_anisotropy(n, 1.0, 20.0, 1e-12).unwrap();
        let oracle = eigen_scan_threshold(n);
        assert!((crit - oracle).abs() / oracle < 1e-4, "N={n}: {crit} vs {oracle}");
        let mut flips = 0;
        let mut last = None;
        for k in 0..400 {
            let ratio = 1.0 + 19.0 * k as f64 / 399.0;
            let s = zigzag_stability(&unit_trap(ratio, ratio), n).unwrap().is_linear_stable;
            if let Some(prev) = last {
                if prev != s {
                    flips += 1;
                }
            }
            last = Some(s);
        }
        assert_eq!(flips, 1, "N={n}");
    }
}

#[test]
fn lanczos_handles_large_chain() {
    let trap = unit_trap(40.0, 41.0);
    let state = solve_equilibrium(&trap, 150, None).unwrap();
    let dense = phonon_modes(&state, &trap).unwrap();
    let edges = band_edges(&state, &trap, 600).unwrap();
    assert!((edges.lowest - dense.band_min).abs() / dense.band_min < 1e-8);
    assert!((edges.highest - dense.band_max).abs() / dense.band_max < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equilibrium_invariants(n in 1usize..9, ax in 1.1f64..6.0, extra in 0.0f64..2.0) {
        let trap = unit_trap(ax, ax + extra);
        let state = solve_equilibrium(&trap, n, None).unwrap();
        let com = state.center_of_mass();
        for c in com {
            prop_assert!(c.abs() < 1e-9);
        }
        let forces = coulomb_forces(&trap, &state.positions);
        let scale = trap.force_scale();
        for k in 0..3 {
            let total: f64 = forces.iter().map(|f| f[k]).sum();
            prop_assert!(total.abs() < 1e-12 * scale * n as f64);
        }
        let h = hessian_si(&trap, &state.positions);
        let hmax = h.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..h.nrows() {
            for j in 0..i {
                prop_assert!((h[(i, j)] - h[(j, i)]).abs() <= 1e-12 * hmax);
            }
        }
    }

    #[test]
    fn frequency_scaling_law(n in 2usize..8, alpha in 0.2f64..5.0) {
        let trap = TrapPotential::new(2.0 * 6e6, 2.3 * 6e6, 6e6, 6.6e-26, 1.602176634e-19).unwrap();
        let scaled = trap.scaled(alpha);
        let a = solve_equilibrium(&trap, n, None).unwrap();
        let b = solve_equilibrium(&scaled, n, None).unwrap();
        let len = alpha.powf(-2.0 / 3.0);
        let spacing = trap.pair_spacing();
        for (p, q) in a.positions.iter().zip(&b.positions) {
            for k in 0..3 {
                prop_assert!((q[k] - p[k] * len).abs() < 1e-8 * spacing * len);
            }
        }
        let fa = phonon_modes(&a, &trap).unwrap();
        let fb = phonon_modes(&b, &scaled).unwrap();
        for (x, y) in fa.frequencies.iter().zip(&fb.frequencies) {
            prop_assert!((y - alpha * x).abs() <= 1e-8 * alpha * x);
        }
    }

    #[test]
    fn linear_chain_blocks_decouple(n in 2usize..10) {
        let trap = unit_trap(12.0, 13.0);
        let state = solve_equilibrium(&trap, n, None).unwrap();
        prop_assert!(state.is_linear(&trap, 1e-9));
        let h = hessian_si(&trap, &state.positions);
        let hmax = h.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                if (i % 3 == 2) != (j % 3 == 2) {
                    prop_assert!(h[(i, j)].abs() <= 1e-10 * hmax);
                }
            }
        }
        let spec = phonon_modes(&state, &trap).unwrap();
        prop_assert!(spec.orthonormality_residual() < 1e-10);
        prop_assert_eq!(spec.branch(Branch::Axial).len(), n);
    }
}

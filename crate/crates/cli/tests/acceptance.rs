//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Quantitative rows come from the reproduction table; the rest
//! re-run compact independent oracles against the library.

use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ringqc::budget;
use ringqc::crystal::{self, Branch, TrapPotential};
use ringqc::dynamics::{self, CoolingRun, SimState, Simulator, StrayFieldMap};
use ringqc::gates::{self, Envelope, QubitState, ShapedPulse};
use ringqc::physcore::{constants::COULOMB, load_species, RingConfig};
use ringqc::tracking::{self, CollisionEvent, Detection, EventKind, MismatchKind, ObservationFrame, QubitLedger, Site};
use ringqc_cli::paper_check::{paper_check, PaperCheckRow, Status, ToleranceProfile};

const TWO_PI: f64 = 2.0 * PI;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rows_pass(rows: &[PaperCheckRow], ids: &[&str]) -> Outcome {
    let mut parts = Vec::new();
    for id in ids {
        let r = rows.iter().find(|r| r.id == *id).ok_or(format!("missing row {id}"))?;
        match r.status {
            Status::Match { tolerance, pass } => {
                let line = format!("{id} {:.5} vs {} {} (dev {:.2e}, tol {:.0e})", r.computed, r.quoted, r.unit, r.relative_deviation, tolerance);
                ensure(pass, format!("{line} out of tolerance"))?;
                parts.push(line);
            }
            _ => return Err(format!("{id} is not a match row")),
        }
    }
    Ok(parts.join("; "))
}

fn criterion_11(rows: &[PaperCheckRow]) -> Outcome {
    let mut parts = Vec::new();
    for id in ["localization", "doppler_split", "pulse_length", "micromotion_energy"] {
        let r = rows.iter().find(|r| r.id == id).ok_or(format!("missing row {id}"))?;
        let Status::PaperDiscrepancy { note } = &r.status else {
            return Err(format!("{id} is not a paper_discrepancy row"));
        };
        ensure(!note.is_empty(), format!("{id} has no note"))?;
        ensure(r.relative_deviation > 0.1, format!("{id} silently matches the quoted value"))?;
        parts.push(format!("{id} quoted {} computed {:.4} {}", r.quoted, r.computed, r.unit));
    }
    Ok(parts.join("; "))
}

// crystal oracles, natural units ω_z = m = k_e q² = 1

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

/// Barzilai–Borwein descent from random starts; lowest energy found.
fn multistart_min(n: usize, a: [f64; 3], starts: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (n as f64).cbrt() * 2.0;
    let mut best = f64::INFINITY;
    for _ in 0..starts {
        let mut r: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-half..half)).collect();
        let mut g = gradient(&r, a);
        let mut step: f64 = 1e-3;
        for _ in 0..40_000 {
            let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if gmax < 1e-11 {
                break;
            }
            let len = step.min(0.05 / gmax);
            let nr: Vec<f64> = r.iter().zip(&g).map(|(x, gi)| x - len * gi).collect();
            let ng = gradient(&nr, a);
            let sy: f64 = nr.iter().zip(&r).zip(ng.iter().zip(&g)).map(|((p, q), (u, v))| (p - q) * (u - v)).sum();
            let ss: f64 = nr.iter().zip(&r).map(|(p, q)| (p - q).powi(2)).sum();
            step = if sy > 0.0 { ss / sy } else { 1e-3 };
            r = nr;
            g = ng;
        }
        best = best.min(energy(&r, a));
    }
    best
}

fn fd_hessian(r: &[f64], a: [f64; 3]) -> DMatrix<f64> {
    let dim = r.len();
    let h = 1e-5;
    let mut m = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let (mut p, mut q) = (r.to_vec(), r.to_vec());
        p[j] += h;
        q[j] -= h;
        let (gp, gq) = (gradient(&p, a), gradient(&q, a));
        for i in 0..dim {
            m[(i, j)] = (gp[i] - gq[i]) / (2.0 * h);
        }
    }
    (&m + m.transpose()) * 0.5
}

fn criterion_12() -> Outcome {
    let ca = load_species("Ca-40").unwrap();
    let wz = TWO_PI * 0.5e6;
    let trap = TrapPotential::for_species(&ca, TWO_PI * 3e6, TWO_PI * 3.2e6, wz).unwrap();
    let pair = crystal::solve_equilibrium(&trap, 2, None).unwrap();
    let d = pair.min_separation();
    let formula = budget::ion_spacing(&ca, wz).unwrap();
    let pair_err = (d - formula).abs() / formula;
    ensure(pair_err < 1e-9, format!("2-ion spacing error {pair_err:e}"))?;

    let t3 = unit_trap(5.0, 5.5);
    let s3 = crystal::solve_equilibrium(&t3, 3, None).unwrap();
    let spec = crystal::phonon_modes(&s3, &t3).unwrap();
    let r: Vec<f64> = s3.positions.iter().flatten().copied().collect();
    let mut numeric: Vec<f64> = fd_hessian(&r, [25.0, 30.25, 1.0]).symmetric_eigenvalues().iter().map(|l| l.sqrt()).collect();
    numeric.sort_by(f64::total_cmp);
    let mut spec_err = 0.0f64;
    for (w, o) in spec.frequencies.iter().zip(&numeric) {
        spec_err = spec_err.max((w - o).abs() / o);
    }
    for (w, e) in spec.branch(Branch::Axial).iter().zip([1.0, 3f64.sqrt(), (29.0f64 / 5.0).sqrt()]) {
        spec_err = spec_err.max((w - e).abs() / e);
    }
    ensure(spec_err < 1e-6, format!("3-ion spectrum error {spec_err:e}"))?;

    let mut worst = 0.0f64;
    for (n, ax, ay) in [(2, 4.0, 4.5), (4, 4.0, 4.4), (5, 1.0, 6.0), (8, 1.2, 6.0), (10, 9.0, 9.5), (12, 1.5, 8.0)] {
        let newton = crystal::solve_equilibrium(&unit_trap(ax, ay), n, None).unwrap().potential_energy;
        let brute = multistart_min(n, [ax * ax, ay * ay, 1.0], 50, n as u64);
        worst = worst.max(((newton - brute) / brute).abs());
    }
    ensure(worst < 1e-6, format!("multistart energy mismatch {worst:e}"))?;
    Ok(format!("pair {pair_err:.1e}, 3-ion spectrum {spec_err:.1e}, N<=12 energies {worst:.1e}"))
}

/// Top eigenvalue of the transverse coupling of a relaxed axial chain.
fn eigen_scan_threshold(n: usize) -> f64 {
    let mut z: Vec<f64> = (0..n).map(|i| i as f64 - (n as f64 - 1.0) / 2.0).collect();
    for _ in 0..200_000 {
        let g: Vec<f64> = (0..n)
            .map(|i| z[i] - (0..n).filter(|&j| j != i).map(|j| (z[i] - z[j]).signum() / (z[i] - z[j]).powi(2)).sum::<f64>())
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

fn criterion_13() -> Outcome {
    let mut parts = Vec::new();
    for n in [3usize, 5, 10] {
        let crit = crystal::critical_anisotropy(n, 1.0, 20.0, 1e-12).unwrap();
        let oracle = eigen_scan_threshold(n);
        let err = (crit - oracle).abs() / oracle;
        ensure(err < 1e-4, format!("N={n}: {crit} vs {oracle}"))?;
        let signs: Vec<bool> = (0..400)
            .map(|k| crystal::zigzag_stability(&unit_trap(1.0 + 19.0 * k as f64 / 399.0, 1.0 + 19.0 * k as f64 / 399.0), n).unwrap().is_linear_stable)
            .collect();
        let flips = signs.windows(2).filter(|w| w[0] != w[1]).count();
        ensure(flips == 1, format!("N={n}: {flips} sign flips"))?;
        parts.push(format!("N={n} {crit:.6} (oracle dev {err:.1e})"));
    }
    Ok(parts.join("; "))
}

fn bench_ring() -> RingConfig {
    RingConfig {
        name: "bench".into(),
        circumference: 1e-3,
        n_ions: 1,
        kinetic_energy: 0.0,
        secular_freq_x: TWO_PI * 1e6,
        secular_freq_y: TWO_PI * 1.1e6,
        secular_freq_z: TWO_PI * 0.2e6,
        rf_drive_freq: TWO_PI * 20e6,
        horizontal_tune: 1.0,
        periodicity: 1,
        cell_phase_advance: 1.0,
    }
}

fn criterion_14() -> Outcome {
    let ca = load_species("Ca-40").unwrap();
    let gamma = ca.cooling_linewidth.unwrap();
    let sim = |split: f64| {
        let beams = dynamics::velocity_control_pair(397e-9, -gamma / 2.0, split, 0.1).to_vec();
        Simulator::new(ca.clone(), bench_ring(), beams, StrayFieldMap::none(1e-3)).unwrap()
    };
    let run = |seed| CoolingRun { n_ions: 1, initial_velocity: 0.0, dt: 3e-10, duration: 6e-3, warmup: 0.3e-3, sample_every: 200, seed };

    let split = TWO_PI * 40e6;
    let t0 = Instant::now();
    let r1 = run(7);
    let out = dynamics::run_cooling::<Vec<u8>>(&sim(split), &r1, None).unwrap();
    let case1 = t0.elapsed();
    let damping_times = (r1.duration - r1.warmup) * out.damping_rate;
    ensure(damping_times >= 10.0, format!("only {damping_times:.1} damping times"))?;
    let target = budget::doppler_control_velocity(split, 397e-9).unwrap();
    let v_err = (out.estimate.v_mean - target).abs() / target;
    ensure(v_err < 0.05, format!("v_mean {} vs {target}", out.estimate.v_mean))?;

    let t1 = Instant::now();
    let sym = dynamics::run_cooling::<Vec<u8>>(&sim(0.0), &run(11), None).unwrap();
    let case2 = t1.elapsed();
    let ratio = sym.estimate.t_long_equipartition / dynamics::doppler_limit(gamma);
    ensure((0.5..=2.0).contains(&ratio), format!("T/T_D = {ratio}"))?;
    let limit = Duration::from_secs(300);
    ensure(case1 < limit && case2 < limit, "a cooling case exceeded 5 min")?;
    Ok(format!(
        "v_mean {:.3} vs {target:.3} m/s over {damping_times:.0} damping times; T/T_D = {ratio:.3}; {:.1} s + {:.1} s",
        out.estimate.v_mean,
        case1.as_secs_f64(),
        case2.as_secs_f64()
    ))
}

fn criterion_15() -> Outcome {
    let ca = load_species("Ca-40").unwrap();
    let sim = Simulator::new(ca, bench_ring(), vec![], StrayFieldMap::none(1e-3)).unwrap();
    let mut st = SimState::evenly_spaced(2, 1e-3, 50.0, 1);
    st.velocity[0] = [0.3, -0.2, 50.0];
    st.velocity[1] = [-0.1, 0.4, 50.0];
    st.transverse[0] = [1e-7, 0.0];
    let e0 = sim.transverse_energy(&st);
    let dt = 1e-3 / sim.ring.secular_freq_y;
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        sim.step(&mut st, dt).unwrap();
        worst = worst.max((sim.transverse_energy(&st) - e0).abs() / e0);
    }
    ensure(worst < 1e-6, format!("drift {worst:e}"))?;
    Ok(format!("max relative drift {worst:.1e} over 10^4 steps"))
}

fn criterion_16() -> Outcome {
    let t = 2e-6;
    let shapes = [
        Envelope::Rectangular { duration: t },
        Envelope::Trapezoid { rise: 0.3 * t, flat: 0.4 * t, fall: 0.3 * t },
        Envelope::Hann { duration: t },
        Envelope::Gaussian { sigma: 0.2 * t, duration: t },
    ];
    let mut area_err = 0.0f64;
    for env in shapes {
        for k in 0..=24 {
            let area = 0.5 * k as f64;
            let p = ShapedPulse::with_area(env, area, 0.3).unwrap();
            let s = gates::rabi_evolve(QubitState::ground(), &p, 0.0, t).unwrap();
            area_err = area_err.max((s.excited_population() - (area / 2.0).sin().powi(2)).abs());
        }
    }
    ensure(area_err < 1e-9, format!("area theorem error {area_err:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut leaks = 0;
    let mut checked = 0;
    for _ in 0..200 {
        let rate: f64 = rng.random_range(1e6..2e8);
        let period = 1.0 / rate;
        let rise = rng.random_range(2e-9..(0.4 * period).max(2.1e-9));
        if 2.0 * rise >= period {
            continue;
        }
        let len = rng.random_range(0.05..1.0) * (period - 2.0 * rise);
        let mask: Vec<bool> = (0..30).map(|_| rng.random::<f64>() < 0.4).collect();
        let targets: Vec<u64> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i as u64).collect();
        let Ok(train) = gates::schedule_pulses(rate, &targets, len, rise) else { continue };
        let total = len + 2.0 * rise;
        for (i, hit) in mask.iter().enumerate() {
            if !hit {
                let tc = i as f64 * period;
                checked += 1;
                leaks += usize::from(train.max_in_window(tc - 0.5 * total, tc + 0.5 * total) != 0.0);
            }
        }
    }
    ensure(leaks == 0, format!("{leaks} non-target transits saw light"))?;

    let mut comp_err = 0.0f64;
    for k in 0..40 {
        let target = 0.25 * k as f64;
        let phase = -PI + 0.157 * k as f64;
        let plan = gates::plan_piecewise_gate(target, 0.7, 1e-4).unwrap().with_axis(phase);
        let out = plan.execute(QubitState::ground(), Envelope::Hann { duration: 5e-8 }).unwrap();
        comp_err = comp_err.max(out.state.distance(&gates::rotate(QubitState::ground(), target, phase)));
    }
    ensure(comp_err < 1e-9, format!("piecewise composition error {comp_err:e}"))?;
    Ok(format!("area {area_err:.1e}; 0 leaks over {checked} non-target transits; composition {comp_err:.1e}"))
}

fn brute_unique_window(p: &[Site], circular: bool) -> Option<usize> {
    let n = p.len();
    let max = if circular { n } else { n.saturating_sub(1) };
    let window = |i: usize, l: usize| -> Vec<Site> { (0..l).map(|k| p[(i + k) % n]).collect() };
    (1..=max).find(|&l| {
        let count = if circular { n } else { n - l + 1 };
        (0..count).all(|i| (i + 1..count).all(|j| window(i, l) != window(j, l)))
    })
}

/// Kind and labels from scoring every single event by direct observation.
fn exhaustive(believed: &QubitLedger, frame: &ObservationFrame) -> Option<(MismatchKind, Vec<u64>)> {
    if believed.observe(frame.start, frame.length, frame.circular, 0.0).sites == frame.sites {
        return None;
    }
    let n = believed.len();
    let mut exact = Vec::new();
    for p in 0..n {
        for e in std::iter::once(CollisionEvent::loss(p, 0.0)).chain((p + 1..n).map(|q| CollisionEvent::reorder(p, q, 0.0))) {
            let after = believed.apply_event(&e).unwrap();
            if frame.start >= after.len() {
                continue;
            }
            if after.observe(frame.start, frame.length, frame.circular, 0.0).sites == frame.sites {
                exact.push(e.kind);
            }
        }
    }
    let whole: Vec<u64> = believed.window_labels(frame.start, frame.length, frame.circular).into_iter().collect();
    let describe = |k: &EventKind| -> (MismatchKind, Vec<u64>) {
        let (kind, pos) = match *k {
            EventKind::Loss { position } => (MismatchKind::Loss, vec![position]),
            EventKind::Reorder { a, b } => (MismatchKind::Reorder, vec![a, b]),
        };
        let mut labels: Vec<u64> = pos.into_iter().filter_map(|p| believed.labels()[p]).collect();
        labels.sort();
        (kind, labels)
    };
    match exact.first() {
        None => Some((MismatchKind::Unknown, whole)),
        Some(first) => {
            let d = describe(first);
            if exact.iter().all(|k| describe(k) == d) {
                Some(d)
            } else {
                Some((MismatchKind::Unknown, whole))
            }
        }
    }
}

fn criterion_17() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..200 {
        let n = rng.random_range(1..=200);
        let ledger = tracking::load_pattern(n, [0.05, 0.1, 0.3, 0.5][k % 4], rng.random()).unwrap();
        for circular in [false, true] {
            let got = tracking::min_unique_window(ledger.pattern(), circular);
            let want = brute_unique_window(ledger.pattern(), circular);
            ensure(got == want, format!("window {got:?} vs oracle {want:?} for {}", tracking::pattern_to_text(ledger.pattern())))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut injected, mut visible, mut agree) = (0, 0, 0);
    while injected < 1000 {
        let n = rng.random_range(30..120);
        let believed = tracking::load_pattern(n, rng.random_range(0.1..0.35), rng.random()).unwrap();
        let Some(required) = tracking::min_unique_window(believed.pattern(), false) else { continue };
        let window = (required + rng.random_range(0..10)).min(n);
        let start = rng.random_range(0..=n - window);
        let event = if rng.random::<bool>() {
            CollisionEvent::loss(rng.random_range(0..n), 1.0)
        } else {
            let a = rng.random_range(0..n - 1);
            let b = if rng.random::<f64>() < 0.7 { a + 1 } else { rng.random_range(0..n) };
            if a == b {
                continue;
            }
            CollisionEvent::reorder(a, b, 1.0)
        };
        let truth = believed.apply_event(&event).unwrap();
        if start >= truth.len() {
            continue;
        }
        injected += 1;
        let frame = truth.observe(start, window, false, 1.0);
        let got = tracking::detect_mismatch(&believed, &frame).unwrap();
        if believed.observe(start, window, false, 0.0).sites != frame.sites {
            visible += 1;
            ensure(!got.is_consistent(), format!("false negative for {event}"))?;
        }
        let mine = match got {
            Detection::Consistent => None,
            Detection::Mismatch { kind, affected, .. } => Some((kind, affected.into_iter().collect::<Vec<_>>())),
        };
        ensure(mine == exhaustive(&believed, &frame), format!("classification differs from the oracle for {event}"))?;
        agree += 1;
    }
    Ok(format!("200 instances match brute force; 0 false negatives over {visible} visible of {injected} injected; {agree} classifications agree"))
}

fn criterion_18() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_ringqc");
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/demo.toml");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let status = Command::new(bin)
            .args(["run", "--config"])
            .arg(&scenario)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), format!("run {k} failed: {}", String::from_utf8_lossy(&status.stderr)))?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        outputs.push((files, status.stdout));
    }
    ensure(outputs[0] == outputs[1], "outputs differ between runs")?;
    Ok(format!("{} files and stdout byte-identical", outputs[0].0.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let rows = paper_check(ToleranceProfile::Default).expect("reproduction table");
    let table_time = t0.elapsed();
    let timed = |r: Outcome| -> Outcome {
        r.and_then(|s| {
            ensure(table_time < Duration::from_secs(60), "reproduction table took over a minute")?;
            Ok(s)
        })
    };
    let quantitative: [&[&str]; 10] = [
        &["displacement_ca", "displacement_ba"],
        &["micromotion_amplitude_ca", "micromotion_amplitude_ba"],
        &["beam_velocity"],
        &["ion_spacing"],
        &["rayleigh_range"],
        &["arrival_rate"],
        &["pi_time_ca", "pi_time_ba", "pi_intensity_ca", "pi_intensity_ba"],
        &["switching_rabi", "gate_time_n100", "gate_time_n1e5"],
        &["mode_spacing", "sideband_floor"],
        &["pallas_t_trans", "pallas_t_long", "scaled_t_long", "scaled_t_trans"],
    ];
    let mut results: Vec<Outcome> = quantitative.iter().map(|ids| timed(rows_pass(&rows, ids))).collect();
    results.push(timed(criterion_11(&rows)));
    let suites: [fn() -> Outcome; 7] = [criterion_12, criterion_13, criterion_14, criterion_15, criterion_16, criterion_17, criterion_18];
    for f in suites {
        results.push(guarded(f));
    }
    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("criterion {}: PASS {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

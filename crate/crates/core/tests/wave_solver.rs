use lifespan_core::functional::star_transform_at;
use lifespan_core::wave::{
    detect_lifespan, make_initial_data, read_snapshot_csv, run_wave, write_snapshot_csv,
    DataProfile, DomainPolicy, RadialField, SnapshotPolicy, Stepper, WaveConfig, WaveStatus,
};
use proptest::prelude::*;

fn config(n: u32, eps: f64, dr: f64, horizon: f64) -> WaveConfig {
    WaveConfig::new(n, 2.0, eps, DataProfile::standard(1.0, 1.0), dr, horizon)
}

/// `∫ (v^2 + u_r^2) r^{n-1} dr` by Simpson's rule with fourth-order differences.
fn energy_oracle(field: &RadialField, n: u32) -> f64 {
    let dr = field.dr;
    // even extension across the origin, zero past storage
    let u = |i: isize| field.u.get(i.unsigned_abs()).copied().unwrap_or(0.0);
    let m = field.u.len() + 4;
    let mut total = 0.0;
    for i in 0..m {
        let k = i as isize;
        let ur = (u(k - 2) - 8.0 * u(k - 1) + 8.0 * u(k + 1) - u(k + 2)) / (12.0 * dr);
        let v = field.v.get(i).copied().unwrap_or(0.0);
        let w = if i == 0 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += w * (v * v + ur * ur) * (i as f64 * dr).powi(n as i32 - 1);
    }
    total * dr / 3.0
}

#[test]
fn linear_energy_drift_below_tenth_percent() {
    for n in [2, 3] {
        let mut cfg = config(n, 1.0, 0.01, 10.0);
        cfg.nonlinear = false;
        let mut field = make_initial_data(&cfg).unwrap();
        let mut stepper = Stepper::new(&cfg).unwrap();
        // start from a state with nonzero velocity
        for _ in 0..20 {
            stepper.step(&mut field);
        }
        let e0 = energy_oracle(&field, n);
        for _ in 0..1000 {
            stepper.step(&mut field);
        }
        let e1 = energy_oracle(&field, n);
        let drift = (e1 - e0).abs() / e0;
        assert!(drift < 1e-3, "n = {n}: drift {drift}");
    }
}

/// Exact radial solution in three dimensions with `u(0) = f`, `u_t(0) = 0`:
/// `r u = ((r - t) f(r - t) + (r + t) f(r + t)) / 2`.
fn d_alembert_3d(prof: &DataProfile, t: f64, r: f64) -> f64 {
    let f = |x: f64| prof.f(x);
    if r < 1e-9 {
        // limit r -> 0: f(t) + t f'(t)
        let h = 1e-5;
        return f(t) + t * (f(t + h) - f(t - h)) / (2.0 * h);
    }
    ((r - t) * f(r - t) + (r + t) * f(r + t)) / (2.0 * r)
}

#[test]
fn three_dimensional_linear_solution_matches_exact_formula() {
    let mut cfg = config(3, 1.0, 0.005, 2.0);
    cfg.nonlinear = false;
    let mut field = make_initial_data(&cfg).unwrap();
    let mut stepper = Stepper::new(&cfg).unwrap();
    let steps = (0.8 / cfg.dt()).round() as usize;
    for _ in 0..steps {
        stepper.step(&mut field);
    }
    let t = field.t;
    assert!((t - 0.8).abs() < 1e-12);
    let mut max_err: f64 = 0.0;
    for (i, &u) in field.u.iter().enumerate() {
        let r = i as f64 * cfg.dr;
        max_err = max_err.max((u - d_alembert_3d(&cfg.profile, t, r)).abs());
    }
    assert!(max_err < 2e-3, "max error {max_err}");
    // the exact solution is negative at the origin here, and so is the scheme
    let exact0 = d_alembert_3d(&cfg.profile, t, 0.0);
    assert!(exact0 < -0.5, "{exact0}");
    assert!(field.u[0] < -0.5);
}

#[test]
fn support_grows_at_unit_speed() {
    let cfg = config(2, 1.0, 0.01, 10.0);
    let mut field = make_initial_data(&cfg).unwrap();
    let mut stepper = Stepper::new(&cfg).unwrap();
    let r_support = cfg.profile.r_support;
    for m in 1..=600 {
        stepper.step(&mut field);
        let bound = r_support + m as f64 * cfg.dt() + 2.0 * cfg.dr + 1e-12;
        assert!(
            field.support_radius <= bound,
            "step {m}: {} > {bound}",
            field.support_radius
        );
        let beyond = field
            .u
            .iter()
            .enumerate()
            .filter(|(i, _)| *i as f64 * cfg.dr > bound);
        assert!(beyond.clone().all(|(_, u)| *u == 0.0));
    }
    let run = run_wave(&config(2, 0.8, 0.01, 40.0)).unwrap();
    assert!(
        run.estimate.max_support_excess <= 2.0 * 0.01 + 1e-9,
        "{}",
        run.estimate.max_support_excess
    );
}

#[test]
fn star_transform_stays_nonnegative_while_u_does_not() {
    let mut cfg = config(2, 0.8, 0.01, 6.0);
    cfg.snapshots = Some(SnapshotPolicy {
        target: 16,
        depth: None,
    });
    let run = run_wave(&cfg).unwrap();
    // pointwise positivity fails: u changes sign behind the front
    assert!(run.estimate.min_u < -0.05, "min u = {}", run.estimate.min_u);
    let mut scale: f64 = 0.0;
    let mut min_star = f64::INFINITY;
    for snap in run.snapshots.iter().step_by(8) {
        let radii: Vec<f64> = snap
            .r_grid()
            .into_iter()
            .step_by(5)
            .filter(|r| *r <= snap.support_radius)
            .collect();
        let slice = star_transform_at(snap, 2, &radii).unwrap();
        for v in slice.u_star {
            scale = scale.max(v.abs());
            min_star = min_star.min(v);
        }
    }
    assert!(scale > 0.0);
    assert!(
        min_star >= -1e-4 * scale,
        "min u* = {min_star}, scale {scale}"
    );
}

#[test]
fn front_window_reproduces_full_domain() {
    let full = config(2, 0.8, 0.01, 100.0);
    let window = WaveConfig {
        domain: DomainPolicy::FrontWindow { width: 10.0 },
        ..full.clone()
    };
    let a = detect_lifespan(&full).unwrap();
    let b = detect_lifespan(&window).unwrap();
    assert_eq!(a.status, WaveStatus::BlewUp);
    assert_eq!(b.status, WaveStatus::BlewUp);
    assert!(
        (a.t_num - b.t_num).abs() <= 1e-9 * a.t_num,
        "{} vs {}",
        a.t_num,
        b.t_num
    );
}

#[test]
fn larger_data_blows_up_sooner() {
    let t2 = detect_lifespan(&config(2, 2.0, 0.01, 50.0)).unwrap();
    let t3 = detect_lifespan(&config(2, 3.0, 0.01, 50.0)).unwrap();
    assert_eq!(t2.status, WaveStatus::BlewUp);
    assert_eq!(t3.status, WaveStatus::BlewUp);
    assert!(t3.t_num < t2.t_num, "{} vs {}", t3.t_num, t2.t_num);
}

#[test]
fn small_data_reaches_short_horizon() {
    let est = detect_lifespan(&config(2, 0.05, 0.01, 5.0)).unwrap();
    assert_eq!(est.status, WaveStatus::HorizonReached);
    assert!((est.t_num - 5.0).abs() < 1e-9);
    assert!(!est.step_failure);
}

#[test]
fn lifespan_insensitive_to_threshold() {
    let base = config(2, 0.8, 0.01, 100.0);
    let a = detect_lifespan(&base).unwrap();
    let b = detect_lifespan(&WaveConfig {
        blowup_threshold: 1e7,
        ..base
    })
    .unwrap();
    assert!(
        a.threshold_sensitivity < 0.05,
        "{}",
        a.threshold_sensitivity
    );
    assert!((a.t_num - b.t_num).abs() / a.t_num < 0.05);
}

#[test]
fn snapshot_file_roundtrip() {
    let mut cfg = config(2, 0.8, 0.01, 3.0);
    cfg.snapshots = Some(SnapshotPolicy {
        target: 4,
        depth: None,
    });
    let run = run_wave(&cfg).unwrap();
    let snap = run.snapshots.last().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.csv");
    let mut out = std::fs::File::create(&path).unwrap();
    write_snapshot_csv(&mut out, snap, 2, 2.0, 0.8).unwrap();
    drop(out);
    let input = std::io::BufReader::new(std::fs::File::open(&path).unwrap());
    let (back, meta) = read_snapshot_csv(input).unwrap();
    assert_eq!(meta.n, 2);
    assert_eq!(meta.t, snap.t);
    assert_eq!(back.u, snap.u);
    assert_eq!(back.v, snap.v);
    assert_eq!(back.offset, snap.offset);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn initial_data_is_linear_in_epsilon(eps in 0.01f64..5.0, k in 0.1f64..10.0, n in 2u32..5) {
        let cfg = |e| WaveConfig::new(n, 1.5, e, DataProfile::standard(1.0, 1.0), 0.01, 1.0);
        let a = make_initial_data(&cfg(eps)).unwrap();
        let b = make_initial_data(&cfg(k * eps)).unwrap();
        for (x, y) in a.u.iter().zip(&b.u) {
            prop_assert!((k * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn support_bound_holds_for_any_data(eps in 0.1f64..3.0, n in 2u32..4, steps in 10usize..200) {
        let cfg = config(n, eps, 0.01, 5.0);
        let mut field = make_initial_data(&cfg).unwrap();
        let mut stepper = Stepper::new(&cfg).unwrap();
        for _ in 0..steps {
            stepper.step(&mut field);
        }
        prop_assert!(field.support_radius <= 1.0 + steps as f64 * cfg.dt() + 2.0 * cfg.dr + 1e-12);
    }
}

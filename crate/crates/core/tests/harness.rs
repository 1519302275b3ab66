use std::fs;
use std::path::Path;

use lifespan_core::harness::{main_with_args, parse_args, Command, OUT_ENV};
use serde_json::Value;

fn run_in(out: &Path, args: &[&str]) -> i32 {
    let mut full = vec!["lifespan-lab", "--out", out.to_str().unwrap()];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn constants_report_values() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_in(dir.path(), &["constants", "--n", "2", "--p", "2"]),
        0
    );
    let v = json(&dir.path().join("constants.json"));
    let sub = v["sharp"]["c_tilde_sub"].as_f64().unwrap();
    assert!((sub - 1.0 / 480.0).abs() < 1e-15);
    assert!((v["sharp"]["remark_sub_bound"].as_f64().unwrap() - 230400.0).abs() < 1e-8);
    assert_eq!(v["config"]["command"], "constants");
    assert_eq!(v["config"]["n"], 2);
}

#[test]
fn ode_sweep_csv_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "ode-sweep",
        "--variant",
        "subcritical",
        "--n",
        "2",
        "--p",
        "2",
        "--A",
        "1,0.5,0.25,0.125,0.0625",
    ];
    assert_eq!(run_in(dir.path(), &args), 0);
    let csv = fs::read_to_string(dir.path().join("ode_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# schema=1");
    assert!(lines[1].starts_with("# config={"));
    assert_eq!(
        lines[2],
        "variant,n,p,A,T0,t_blow,ln_t_blow,status,product_or_residual"
    );
    assert_eq!(lines.len(), 8);
    assert!(lines[3].starts_with("subcritical,2,2.0000000000000000e0,1.0000000000000000e0,"));
    let v = json(&dir.path().join("ode_sweep.json"));
    let slope = v["sweep"]["fit"]["slope"].as_f64().unwrap();
    assert!((slope + 2.0).abs() <= 0.3, "{slope}");
    assert_eq!(v["config"]["a"].as_array().unwrap().len(), 5);
}

#[test]
fn outputs_are_deterministic_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "ode-sweep",
        "--variant",
        "critical",
        "--p",
        "2",
        "--A",
        "2,1,0.5",
    ];
    let mut serial = vec!["--threads", "1"];
    serial.extend_from_slice(&args);
    let mut parallel = vec!["--threads", "4"];
    parallel.extend_from_slice(&args);
    assert_eq!(run_in(a.path(), &serial), 0);
    assert_eq!(run_in(b.path(), &parallel), 0);
    for file in ["ode_sweep.csv", "ode_sweep.json"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("exp.conf");
    fs::write(&conf, "# constants\nn = 3\np = 1.5\nR = 2\n").unwrap();
    let conf = conf.to_str().unwrap();
    let cli = parse_args(["lifespan-lab", "--config", conf, "constants", "--p", "2"]).unwrap();
    match cli.command {
        Command::Constants(a) => {
            assert_eq!(a.n, 3);
            assert_eq!(a.p, 2.0);
            assert_eq!(a.r, 2.0);
        }
        other => panic!("wrong command {other:?}"),
    }
    let cli = parse_args(["lifespan-lab", "constants", "--config", conf]).unwrap();
    match cli.command {
        Command::Constants(a) => assert_eq!(a.p, 1.5),
        other => panic!("wrong command {other:?}"),
    }
    fs::write(dir.path().join("bad.conf"), "unknown-key = 1\n").unwrap();
    let bad = dir.path().join("bad.conf");
    assert_eq!(
        main_with_args([
            "lifespan-lab",
            "--config",
            bad.to_str().unwrap(),
            "constants"
        ]),
        1
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // validation errors
    assert_eq!(
        run_in(dir.path(), &["constants", "--n", "2", "--p", "5"]),
        1
    );
    assert_eq!(run_in(dir.path(), &["constants", "--n", "2"]), 1);
    assert_eq!(
        run_in(
            dir.path(),
            &["pde-run", "--n", "2", "--p", "2", "--eps", "0.5", "--dr", "0.1"]
        ),
        1
    );
    // a fit through two points is a runtime failure
    let csv = dir.path().join("two.csv");
    fs::write(&csv, "x,y\n1,2\n2,3\n").unwrap();
    assert_eq!(
        run_in(
            dir.path(),
            &[
                "fit",
                "--input",
                csv.to_str().unwrap(),
                "--x",
                "x",
                "--y",
                "y"
            ]
        ),
        2
    );
    assert_eq!(main_with_args(["lifespan-lab", "--help"]), 0);
}

#[test]
fn fit_excludes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pts.csv");
    fs::write(&csv, "# schema=1\neps,T,status\n0.8,20,blew_up\n0.4,80,blew_up\n0.2,320,blew_up\n0.1,5000,horizon_reached\n-1,3,blew_up\n").unwrap();
    let args = [
        "fit",
        "--input",
        csv.to_str().unwrap(),
        "--x",
        "eps",
        "--y",
        "T",
        "--log-x",
        "--log-y",
    ];
    assert_eq!(run_in(dir.path(), &args), 0);
    let v = json(&dir.path().join("fit.json"));
    assert!((v["fit"]["slope"].as_f64().unwrap() + 2.0).abs() < 1e-12);
    assert_eq!(v["fit"]["n_points"], 3);
    assert_eq!(v["fit"]["excluded"].as_array().unwrap().len(), 2);
}

#[test]
fn exported_snapshots_verify_offline() {
    let dir = tempfile::tempdir().unwrap();
    let run = [
        "pde-run",
        "--n",
        "2",
        "--p",
        "2",
        "--eps",
        "0.8",
        "--dr",
        "0.01",
        "--window",
        "10",
        "--export-snapshots",
        "--snapshot-target",
        "32",
    ];
    assert_eq!(run_in(dir.path(), &run), 0);
    let report = json(&dir.path().join("pde_run.json"));
    assert_eq!(report["estimate"]["status"], "blew_up");
    let t = report["estimate"]["t_num"].as_f64().unwrap();
    let written = report["snapshots_written"].as_u64().unwrap();
    assert!(written > 32);
    let snaps = dir.path().join("snapshots");
    assert_eq!(fs::read_dir(&snaps).unwrap().count() as u64, written);

    let t_max = format!("{}", 0.8 * t);
    let verify = [
        "verify-functional",
        "--snapshots",
        snaps.to_str().unwrap(),
        "--t-max",
        &t_max,
    ];
    assert_eq!(run_in(dir.path(), &verify), 0);
    let v = json(&dir.path().join("functional_report.json"));
    assert_eq!(v["passed"], true);
    // the conservative A_f recovered from the t = 0 snapshot
    let exact = lifespan_core::functional::compute_a_f(
        &lifespan_core::wave::DataProfile::standard(1.0, 1.0),
        2,
    )
    .unwrap()
    .a_f_conservative;
    let got = v["a_f_conservative"].as_f64().unwrap();
    assert!((got - exact).abs() < 1e-4 * exact, "{got} vs {exact}");
    let csv = fs::read_to_string(dir.path().join("functional_residuals.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().starts_with("t,U,U_second"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    std::env::set_var(OUT_ENV, &target);
    let code = main_with_args([
        "lifespan-lab",
        "odi-ladder",
        "--variant",
        "critical",
        "--p",
        "2",
        "--k-max",
        "5",
    ]);
    std::env::remove_var(OUT_ENV);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(target.join("odi_ladder.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

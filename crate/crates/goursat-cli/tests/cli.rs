//! End-to-end tests of the `goursat` binary: artifacts, exit codes,
//! machine-readable errors and report determinism.

use std::path::PathBuf;
use std::process::{Command, Output};

fn problems_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("problems")
}

fn run(cmd: &str, file: &str, out: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goursat"))
        .arg(cmd)
        .arg(problems_dir().join(file))
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("goursat-test-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn report_of(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON report")
}

#[test]
fn analyze_labels_the_three_types() {
    let dir = tmpdir("labels");
    for (file, expect) in [
        ("hyperbolic_analyze.json", "hyperbolic"),
        ("parabolic_analyze.json", "parabolic"),
        ("laplace_analyze.json", "elliptic"),
    ] {
        let report = report_of(&run("analyze", file, &dir));
        let label = report["results"]["points"][0]["label"].as_str().unwrap();
        assert_eq!(label, expect, "{file}");
    }
    // elliptic points expose no real characteristic covectors
    let report = report_of(&run("analyze", "laplace_analyze.json", &dir));
    let dirs = report["results"]["points"][0]["characteristic_covectors"]
        .as_array()
        .unwrap();
    assert!(dirs.is_empty());
    assert!(dir.join("report.json").exists());
}

#[test]
fn reconstruct_matches_reference_frames() {
    let dir = tmpdir("reconstruct");
    for file in ["hyperbolic_reconstruct.json", "ex_r12_reconstruct.json"] {
        let report = report_of(&run("reconstruct", file, &dir));
        let angle = report["results"]["points"][0]["principal_angle_max"]
            .as_f64()
            .unwrap();
        assert!(angle <= 1e-6, "{file}: angle {angle}");
    }
    // hyperbolic: a B-matrix is recoverable from at least one side
    let report = report_of(&run("reconstruct", "hyperbolic_reconstruct.json", &dir));
    let point = &report["results"]["points"][0];
    assert!(
        point.get("b_matrix").is_some() || point.get("b_matrix_perp").is_some(),
        "expected a recovered B on some side"
    );
}

#[test]
fn elliptic_reconstruction_fails_with_machine_readable_error() {
    let dir = tmpdir("elliptic");
    let out = run("reconstruct", "elliptic_reconstruct.json", &dir);
    assert_eq!(out.status.code(), Some(4), "numerical failure exit code");
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr is a JSON error object");
    assert_eq!(err["error"]["kind"], "numerical");
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("not decomposable"), "message: {msg}");
}

#[test]
fn schema_violations_exit_with_code_2() {
    let dir = tmpdir("schema");
    // two equation representations at once
    let bad = dir.join("bad.json");
    std::fs::write(
        &bad,
        r#"{ "n": 2, "equation": { "expr": "p11", "b_matrix": [["0","0"],["0","0"]] } }"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_goursat"))
        .args(["analyze", bad.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "schema");

    // unknown variable in the equation
    let bad2 = dir.join("bad2.json");
    std::fs::write(
        &bad2,
        r#"{ "n": 2, "equation": { "expr": "p11 + q7" },
            "points": [{ "x": [0,0], "z": 0, "p": [0,0], "P": [[1,0],[0,1]] }] }"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_goursat"))
        .args(["analyze", bad2.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn characteristic_first_order_datum_exits_with_code_3() {
    let dir = tmpdir("char");
    let bad = dir.join("char.json");
    // Y_{p2} is tangent to a datum running along x2
    std::fs::write(
        &bad,
        r#"{ "n": 2, "equation": { "expr": "p2" },
            "datum": { "x": ["0", "t1"], "z": "0", "p": ["0", "0"],
                       "box_lo": [-1.0], "box_hi": [1.0], "grid": [5] },
            "solver": { "dt": 0.01, "t_span": [0.0, 0.5] } }"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_goursat"))
        .args(["solve", bad.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "precondition");
}

#[test]
fn solve_writes_surface_csv_with_fixed_columns() {
    let dir = tmpdir("solve");
    let report = report_of(&run("solve", "transport_solve.json", &dir));
    assert_eq!(report["command"], "solve");
    let csv = std::fs::read_to_string(dir.join("surface.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "t,s1,x1,x2,z,p1,p2");
    // transport solution: z = x1 on every row
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (x1, z) = (cols[2], cols[4]);
        assert!((z - x1).abs() <= 1e-10, "row {line}");
    }
}

#[test]
fn flat_monge_solve_produces_zero_surface() {
    let dir = tmpdir("flat");
    let report = report_of(&run("solve", "flat_monge.json", &dir));
    let residuals = &report["results"]["surface"]["residuals"];
    assert!(residuals["f_max"].as_f64().unwrap() <= 1e-12);
    let csv = std::fs::read_to_string(dir.join("surface.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert!(cols[4].abs() <= 1e-12, "z must vanish: {line}");
    }
}

#[test]
fn jet_writes_table_json() {
    let dir = tmpdir("jet");
    let report = report_of(&run("jet", "wave_jet.json", &dir));
    assert_eq!(report["results"]["noncharacteristic_at_seed"], true);
    assert_eq!(report["results"]["formally_integrable_on_samples"], true);
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("jets.json")).unwrap()).unwrap();
    let map = table.as_object().unwrap();
    for (key, value) in map {
        let v = value.as_f64().unwrap();
        let expect = if key == "12" { 1.0 } else { 0.0 };
        assert!((v - expect).abs() <= 1e-12, "p_{key} = {v}");
    }
}

#[test]
fn identical_file_and_seed_give_byte_identical_reports() {
    fn stripped(dir: &std::path::Path, file: &str, cmd: &str) -> String {
        let out = run(cmd, file, dir);
        let mut v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["timings"] = serde_json::json!({ "total_ms": 0.0 });
        serde_json::to_string_pretty(&v).unwrap()
    }
    let dir = tmpdir("determinism");
    for (cmd, file) in [
        ("analyze", "hyperbolic_analyze.json"),
        ("reconstruct", "hyperbolic_reconstruct.json"),
        ("jet", "wave_jet.json"),
        ("solve", "flat_monge.json"),
    ] {
        let a = stripped(&dir, file, cmd);
        let b = stripped(&dir, file, cmd);
        assert_eq!(a, b, "{cmd} {file} is not deterministic");
    }
}

#[test]
fn lifted_datum_solve_matches_its_closed_form() {
    // the lift pins P from the contact conditions plus f = 0; the flow of
    // that datum has the closed form z = e^{x1+x3} - x1 e^{x2} + x1 x4
    let dir = tmpdir("lift");
    let report = report_of(&run("solve", "worked_lift_solve.json", &dir));
    assert!(report["results"]["surface"]["residuals"]["f_max"].as_f64().unwrap() <= 1e-9);
    let csv = std::fs::read_to_string(dir.join("surface.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (x1, x2, x3, x4, z) = (cols[4], cols[5], cols[6], cols[7], cols[8]);
        let closed = (x1 + x3).exp() - x1 * x2.exp() + x1 * x4;
        assert!((z - closed).abs() <= 1e-8, "row {line}");
    }
}

#[test]
fn out_of_range_configs_are_schema_errors_not_panics() {
    let dir = tmpdir("ranges");
    let jet1 = dir.join("jet1.json");
    std::fs::write(
        &jet1,
        r#"{ "n": 2, "equation": { "expr": "p22 - p11" },
            "jet": { "order": 1, "phi_n": "x1" } }"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_goursat"))
        .args(["jet", jet1.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let one_integral = dir.join("one.json");
    std::fs::write(
        &one_integral,
        r#"{ "n": 2, "equation": { "b_matrix": [["0","0"],["0","0"]] },
            "datum": { "x": ["t1", "0"], "z": "0", "p": ["0", "0"],
                       "box_lo": [-1.0], "box_hi": [1.0], "grid": [5] },
            "first_integrals": ["p1"],
            "solver": { "dt": 0.01, "t_span": [0.0, 0.5] },
            "relation": { "degree": 1, "tol": 1e-8 } }"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_goursat"))
        .args(["solve", one_integral.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let bad_dt = dir.join("dt.json");
    std::fs::write(
        &bad_dt,
        r#"{ "n": 2, "equation": { "expr": "p1 - 1" },
            "datum": { "x": ["0", "t1"], "z": "0", "p": ["1", "0"],
                       "box_lo": [-1.0], "box_hi": [1.0], "grid": [5] },
            "solver": { "dt": 5.0, "t_span": [0.0, 0.5] } }"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_goursat"))
        .args(["solve", bad_dt.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nform_equation_input_matches_expr_input() {
    // the decomposable 2-form (dp1 - dx2) ∧ (dp2 + dx1) horizontalizes to
    // p11 p22 - p12^2 + 1: analysis must coincide with the expr route
    let dir = tmpdir("nform");
    let via_nform = report_of(&run("analyze", "hyperbolic_nform_analyze.json", &dir));
    let via_expr = report_of(&run("analyze", "hyperbolic_analyze.json", &dir));
    let a = &via_nform["results"]["points"][0];
    let b = &via_expr["results"]["points"][0];
    assert_eq!(a["label"], b["label"]);
    assert_eq!(a["metric"], b["metric"]);
    assert_eq!(a["residual"], b["residual"]);
    assert_eq!(a["eta_characteristic"], serde_json::json!(true));
    assert_eq!(a["eta_strongly_characteristic"], serde_json::json!(true));
}

use matprod::cli::{run, EXIT_CONDITION, EXIT_OK, EXIT_USAGE};
use matprod::presets::PRESETS;
use serde_json::Value;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("matprod").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_config(dir: &tempfile::TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn presets_are_listed() {
    let (code, out, _) = call(&["presets"]);
    assert_eq!(code, EXIT_OK);
    for p in PRESETS {
        assert!(out.contains(p.name), "{} missing from listing", p.name);
    }
}

#[test]
fn every_preset_runs() {
    for p in PRESETS {
        let (code, out, err) = call(&[p.command, "--preset", p.name, "--seed", "3"]);
        assert!(code == EXIT_OK || code == EXIT_CONDITION, "{}: exit {code}, {err}", p.name);
        let v: Value = serde_json::from_str(&out).unwrap_or_else(|e| panic!("{}: {e}", p.name));
        assert!(v.is_object());
    }
}

#[test]
fn scalar_exact_simulation() {
    let (code, out, _) = call(&["simulate", "--preset", "scalar-exact"]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["method"], "exact");
    assert_eq!(v["trials"], 4);
    let get = |name: &str| {
        v["quantities"].as_array().unwrap().iter().find(|q| q["quantity"] == name).unwrap()["value"].as_f64().unwrap()
    };
    // outcomes 1.21, 0.99, 0.99, 0.81
    assert!((get("norm") - 1.0).abs() < 1e-15);
    assert!((get("moment") - ((1.21f64.powi(2) + 2.0 * 0.99f64.powi(2) + 0.81f64.powi(2)) / 4.0).sqrt()).abs() < 1e-15);
    assert!((get("deviation") - 0.105).abs() < 1e-15);
}

#[test]
fn thresholds_flag_overrides_config() {
    let (code, out, _) = call(&["simulate", "--preset", "scalar-exact", "--thresholds", "0.15"]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    let tails = v["tails"].as_array().unwrap();
    assert_eq!(tails.len(), 2);
    let deviation = tails.iter().find(|t| t["tail"] == "deviation").unwrap();
    assert_eq!(deviation["probability"].as_f64().unwrap(), 0.5);
}

#[test]
fn same_seed_same_bytes() {
    let args = ["compare", "--preset", "inverse", "--trials", "2000", "--seed", "11"];
    let (_, a, _) = call(&args);
    let (_, b, _) = call(&args);
    assert_eq!(a, b);
    let (_, c, _) = call(&["compare", "--preset", "inverse", "--trials", "2000", "--seed", "12"]);
    assert_ne!(a, c);
}

#[test]
fn csv_output_is_rectangular() {
    for args in [
        vec!["bound", "--preset", "identity-perturbation-bound", "--format", "csv"],
        vec!["simulate", "--preset", "scalar-exact", "--format", "csv"],
        vec!["compare", "--preset", "scalar-demo", "--format", "csv"],
    ] {
        let (code, out, err) = call(&args);
        assert!(code == EXIT_OK || code == EXIT_CONDITION, "{args:?}: {err}");
        let mut reader = csv::Reader::from_reader(out.as_bytes());
        let width = reader.headers().unwrap().len();
        let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.len() == width));
    }
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bounds.json");
    let (code, out, _) = call(&["bound", "--preset", "v-zero", "--out", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(out.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert!(v["bounds"].is_array());
}

#[test]
fn violated_condition_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        &dir,
        "b.json",
        r#"{"bounds": [{"bound": "perturbation", "xi": 0.1, "v": 5, "d": 2, "query": {"query": "tail-growth", "t": 1.5}}]}"#,
    );
    let (code, out, _) = call(&["bound", "--config", &cfg]);
    assert_eq!(code, EXIT_CONDITION);
    let v: Value = serde_json::from_str(&out).unwrap();
    let r = &v["bounds"][0]["results"][0];
    assert_eq!(r["value"], "inf");
    assert_eq!(r["conditions"][0]["satisfied"], false);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "bad.json", r#"{"bounds": [{"bound": "no-such-bound"}]}"#);
    let (code, out, err) = call(&["bound", "--config", &cfg]);
    assert_eq!(code, EXIT_USAGE);
    assert!(out.is_empty());
    let v: Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"]["kind"], "invalid-input");
    assert!(v["error"]["message"].as_str().unwrap().contains("docs/config.md"));

    let (code, _, err) = call(&["bound", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(serde_json::from_str::<Value>(err.trim()).is_ok());

    let (code, _, _) = call(&["simulate", "--preset", "no-such-preset"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn invalid_parameters_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        &dir,
        "b.json",
        r#"{"bounds": [{"bound": "growth-moment", "stats": {"from": "aggregate", "d": 2, "m": 1.0, "v": 0.1}, "p": 0.5, "q": 2}]}"#,
    );
    let (code, _, err) = call(&["bound", "--config", &cfg]);
    assert_eq!(code, EXIT_USAGE, "{err}");
}

#[test]
fn verify_checks_pass() {
    let (code, out, err) = call(&["verify", "--trials", "500"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(!v["checks"].as_array().unwrap().is_empty());
    assert!(err.contains("pass"));
}

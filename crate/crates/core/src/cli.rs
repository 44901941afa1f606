//! Command-line front end: `bound`, `simulate`, `verify` and `compare`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{parse, BoundConfig, CompareConfig, SimulateConfig, VerifyConfig};
use crate::error::{Error, Result};
use crate::matrix::format_f64;
use crate::presets;
use crate::rng::DEFAULT_SEED;
use crate::run::{run_bounds, run_compare, run_simulate, BoundsOutput, CompareOutput, ErrorInfo, SimulateOutput};
use crate::scenarios::{ScenarioReport, SCENARIOS};
use crate::verify::{default_suite, CheckReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONDITION: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;
pub const DEFAULT_VERIFY_TRIALS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "matprod", version, about = "Bounds and simulations for products of random matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Named configuration template, used instead of --config.
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the output here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Comma-separated thresholds, replacing those of the config.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate closed-form bounds.
    Bound(Common),
    /// Simulate or enumerate a product and report its norms.
    Simulate(Common),
    /// Run the inequality checks, and optionally the end-to-end scenarios.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Also run the end-to-end scenarios.
        #[arg(long)]
        scenarios: bool,
    },
    /// Check bounds against exact or Monte Carlo values.
    Compare(Common),
    /// List the named configuration templates.
    Presets,
}

fn load_text(common: &Common, command: &str) -> Result<Option<String>> {
    match (&common.config, &common.preset) {
        (Some(path), _) => std::fs::read_to_string(path)
            .map(Some)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display()))),
        (None, Some(name)) => {
            let p = presets::find(name)?;
            if p.command != command {
                return Err(Error::InvalidInput(format!("preset {name:?} is a {} config, not {command}", p.command)));
            }
            Ok(Some(p.text.to_string()))
        }
        (None, None) => Ok(None),
    }
}

fn require_text(common: &Common, command: &str) -> Result<String> {
    load_text(common, command)?
        .ok_or_else(|| Error::InvalidInput(format!("{command} needs --config <path> or --preset <name>")))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn bounds_csv(out: &BoundsOutput) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for entry in &out.bounds {
        if let Some(e) = &entry.error {
            rows.push(vec![
                entry.bound.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "false".into(),
                e.message.clone(),
            ]);
        }
        for r in &entry.results {
            let failed: Vec<String> = r.failed_conditions().iter().map(|c| c.name.clone()).collect();
            rows.push(vec![
                entry.bound.clone(),
                r.kind.name(),
                format_f64(r.value),
                format_f64(r.capped_value),
                opt(r.cap),
                opt(r.params.p),
                opt(r.params.q),
                r.all_satisfied().to_string(),
                failed.join(";"),
            ]);
        }
    }
    csv_bytes(&["bound", "kind", "value", "capped_value", "cap", "p", "q", "conditions_hold", "failed"], rows)
}

fn simulate_csv(out: &SimulateOutput) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for q in &out.quantities {
        rows.push(vec![
            "quantity".into(),
            q.quantity.clone(),
            String::new(),
            format_f64(q.value),
            opt(q.std_error),
            opt(q.ci_low),
            opt(q.ci_high),
            opt(q.ucl),
        ]);
    }
    for t in &out.tails {
        rows.push(vec![
            "tail".into(),
            t.tail.clone(),
            format_f64(t.threshold),
            format_f64(t.probability),
            String::new(),
            opt(t.ci_low),
            opt(t.ci_high),
            opt(t.ucl),
        ]);
    }
    for (k, t) in out.per_trial.iter().enumerate() {
        for (name, v) in [
            ("norm", Some(t.norm)),
            ("norm-p", Some(t.norm_p)),
            ("deviation", t.deviation),
            ("deviation-p", t.deviation_p),
            ("spectral-radius", t.radius),
        ] {
            if let Some(v) = v {
                rows.push(vec![
                    "trial".into(),
                    name.into(),
                    k.to_string(),
                    format_f64(v),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
        }
    }
    csv_bytes(&["section", "name", "threshold", "value", "std_error", "ci_low", "ci_high", "ucl"], rows)
}

fn check_rows(reports: &[CheckReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.instances.to_string(),
                r.violations.to_string(),
                r.skipped.to_string(),
                format_f64(r.worst_margin),
                format_f64(r.max_abs_margin),
                format_f64(r.tolerance),
                r.seed.to_string(),
                r.deterministic.to_string(),
                r.expect_violations.to_string(),
                r.passed.to_string(),
            ]
        })
        .collect()
}

const CHECK_HEADER: [&str; 11] = [
    "name",
    "instances",
    "violations",
    "skipped",
    "worst_margin",
    "max_abs_margin",
    "tolerance",
    "seed",
    "deterministic",
    "expect_violations",
    "passed",
];

fn compare_csv(out: &CompareOutput) -> Result<Vec<u8>> {
    let rows = out
        .report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.bound_kind.clone(),
                format_f64(r.bound),
                opt(r.exact),
                opt(r.empirical.map(|e| e.estimate)),
                opt(r.empirical.map(|e| e.ucl)),
                r.empirical.map(|e| e.trials.to_string()).unwrap_or_default(),
                format_f64(r.ratio),
                r.conditions_hold.to_string(),
                r.violation.to_string(),
            ]
        })
        .collect();
    csv_bytes(
        &[
            "quantity",
            "bound_kind",
            "bound",
            "exact",
            "estimate",
            "ucl",
            "trials",
            "ratio",
            "conditions_hold",
            "violation",
        ],
        rows,
    )
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    checks: &'a [CheckReport],
    #[serde(skip_serializing_if = "<[ScenarioReport]>::is_empty")]
    scenarios: &'a [ScenarioReport],
}

fn summary_table(reports: &[CheckReport], scenarios: &[ScenarioReport]) -> String {
    let mut s =
        format!("{:<44} {:>9} {:>10} {:>13}  {}\n", "check", "instances", "violations", "worst margin", "result");
    for r in reports {
        let result = match (r.passed, r.expect_violations) {
            (true, true) => "pass (negative control)",
            (true, false) => "pass",
            (false, _) => "FAIL",
        };
        s.push_str(&format!(
            "{:<44} {:>9} {:>10} {:>13.3e}  {result}\n",
            r.name, r.instances, r.violations, r.worst_margin
        ));
    }
    for sc in scenarios {
        s.push_str(&format!(
            "{:<44} {:>9} {:>10} {:>13}  {}\n",
            sc.name,
            sc.checks.len(),
            sc.failed_checks().len(),
            "",
            if sc.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}

struct Outcome {
    bytes: Vec<u8>,
    code: i32,
    stderr: String,
}

fn execute(cli: Cli) -> Result<Outcome> {
    let ok = |bytes| Outcome { bytes, code: EXIT_OK, stderr: String::new() };
    match cli.command {
        Command::Presets => {
            let mut s = String::new();
            for p in presets::PRESETS {
                s.push_str(&format!("{:<20} {:<9} {}\n", p.name, p.command, p.summary));
            }
            Ok(ok(s.into_bytes()))
        }
        Command::Bound(c) => {
            let cfg: BoundConfig = parse(&require_text(&c, "bound")?)?;
            let out = run_bounds(&cfg, c.seed)?;
            let code = if out.any_condition_violated() { EXIT_CONDITION } else { EXIT_OK };
            let bytes = match c.format {
                Format::Json => json_bytes(&out)?,
                Format::Csv => bounds_csv(&out)?,
            };
            Ok(Outcome { bytes, code, stderr: String::new() })
        }
        Command::Simulate(c) => {
            let mut cfg: SimulateConfig = parse(&require_text(&c, "simulate")?)?;
            if let Some(t) = c.thresholds.clone() {
                cfg.thresholds = t;
            }
            let out = run_simulate(&cfg, c.trials, c.seed)?;
            let stderr = out.notes.iter().map(|n| format!("note: {n}\n")).collect();
            let bytes = match c.format {
                Format::Json => json_bytes(&out)?,
                Format::Csv => simulate_csv(&out)?,
            };
            Ok(Outcome { bytes, code: EXIT_OK, stderr })
        }
        Command::Compare(c) => {
            let mut cfg: CompareConfig = parse(&require_text(&c, "compare")?)?;
            if let Some(t) = c.thresholds.clone() {
                cfg.thresholds = t;
            }
            let out = run_compare(&cfg, c.trials, c.seed)?;
            let code = if out.report.violations > 0 {
                EXIT_VERIFICATION
            } else if out.report.rows.iter().any(|r| !r.conditions_hold) {
                EXIT_CONDITION
            } else {
                EXIT_OK
            };
            let stderr = out.notes.iter().map(|n| format!("note: {n}\n")).collect();
            let bytes = match c.format {
                Format::Json => json_bytes(&out)?,
                Format::Csv => compare_csv(&out)?,
            };
            Ok(Outcome { bytes, code, stderr })
        }
        Command::Verify { common: c, scenarios } => {
            let cfg: VerifyConfig = match load_text(&c, "verify")? {
                Some(text) => parse(&text)?,
                None => VerifyConfig { trials: None, seed: None },
            };
            let seed = c.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
            let trials = c.trials.or(cfg.trials).unwrap_or(DEFAULT_VERIFY_TRIALS);
            let reports = default_suite(trials, seed)?;
            let scenario_reports: Vec<ScenarioReport> =
                if scenarios { SCENARIOS.iter().map(|(_, f)| f(seed)).collect::<Result<_>>()? } else { vec![] };
            let failed =
                reports.iter().any(|r| r.deterministic && !r.passed) || scenario_reports.iter().any(|s| !s.passed);
            let bytes = match c.format {
                Format::Json => json_bytes(&VerifyOutput { checks: &reports, scenarios: &scenario_reports })?,
                Format::Csv => csv_bytes(&CHECK_HEADER, check_rows(&reports))?,
            };
            Ok(Outcome {
                bytes,
                code: if failed { EXIT_VERIFICATION } else { EXIT_OK },
                stderr: summary_table(&reports, &scenario_reports),
            })
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ConditionViolated(_) => EXIT_CONDITION,
        _ => EXIT_USAGE,
    }
}

fn error_json(e: &Error) -> String {
    #[derive(Serialize)]
    struct Wrapper {
        error: ErrorInfo,
    }
    serde_json::to_string(&Wrapper { error: e.into() })
        .unwrap_or_else(|_| format!("{{\"error\":{{\"kind\":\"{}\"}}}}", e.kind()))
}

/// Runs the tool on `args` (including the program name) and returns the
/// process exit status. Errors are written to `stderr` as a JSON object.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let err = Error::InvalidInput(text.trim().to_string());
                    let _ = writeln!(stderr, "{}", error_json(&err));
                    EXIT_USAGE
                }
            };
        }
    };
    let out_path = match &cli.command {
        Command::Bound(c) | Command::Simulate(c) | Command::Compare(c) | Command::Verify { common: c, .. } => {
            c.out.clone()
        }
        Command::Presets => None,
    };
    let result = execute(cli).and_then(|o| {
        match &out_path {
            Some(path) => std::fs::write(path, &o.bytes)?,
            None => stdout.write_all(&o.bytes)?,
        }
        Ok(o)
    });
    match result {
        Ok(o) => {
            let _ = stderr.write_all(o.stderr.as_bytes());
            o.code
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_json(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("matprod").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_are_json() {
        let (code, _, err) = call(&["bound"]);
        assert_eq!(code, EXIT_USAGE);
        let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
        assert_eq!(v["error"]["kind"], "invalid-input");
        let (code, _, err) = call(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("\"error\""));
    }

    #[test]
    fn v_zero_preset() {
        let (code, out, _) = call(&["bound", "--preset", "v-zero"]);
        assert_eq!(code, EXIT_OK);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let growth = v["bounds"][0]["results"][0]["value"].as_f64().unwrap();
        assert!((growth - 3.0).abs() < 1e-14);
        assert_eq!(v["bounds"][1]["results"][0]["value"], 0.0);
    }
}

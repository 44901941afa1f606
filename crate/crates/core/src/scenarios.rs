//! End-to-end scenarios: each builds a product, evaluates the relevant
//! bounds, and checks them against exact or Monte Carlo values.

use serde::{Deserialize, Serialize};

use crate::bounds::{inverse_perturbation_stats, BoundKind};
use crate::config::{parse, CompareBound, CompareConfig};
use crate::ensembles::{projected_deviation_stat, Atom, FactorEnsemble, PerturbationSupport, StatQuality};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::presets;
use crate::rng::{self, derive_seed};
use crate::run::{run_compare_on, CompareOutput};
use crate::schatten::spectral_norm;
use crate::serde_ext::ext_f64;
use crate::simulate::{
    enumerate_product, estimate_norm_statistics, simulate_product, triangular_array_run, ProductMode, ProductSpec,
    TriangularRow,
};
use crate::verify::{check_spectral_radius_bound, DominanceRow, Quantity};
use rand::Rng;

pub const RANDOM_SPECS: usize = 100;
pub const RANDOM_MAX_N: usize = 12;
pub const RANDOM_MAX_DIM: usize = 4;
pub const PERTURBATION_TRIALS: usize = 10_000;
pub const TRIANGULAR_TRIALS: usize = 2000;
pub const TRIANGULAR_N: [usize; 3] = [25, 100, 400];
pub const CONTRACTION_TRIALS: usize = 10_000;
pub const LOW_RANK_TRIALS: usize = 10_000;
pub const INVERSE_TRIALS: usize = 10_000;
pub const RADIUS_TRIALS: usize = 2000;
/// Allowed `‖Z_n‖ − 1` for products of contractions.
pub const CONTRACTION_SLACK: f64 = 1e-10;
/// Allowed `max |Z_n Z_n^{-1} − I|`.
pub const INVERSE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCheck {
    pub name: String,
    pub passed: bool,
    #[serde(with = "ext_f64")]
    pub value: f64,
    #[serde(with = "ext_f64")]
    pub limit: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl ScenarioCheck {
    /// Passes when `value ≤ limit`.
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), passed: value <= limit, value, limit, detail: String::new() }
    }

    /// Passes when `value ≥ limit`.
    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), passed: value >= limit, value, limit, detail: String::new() }
    }

    pub fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        let v = if passed { 1.0 } else { 0.0 };
        Self { name: name.into(), passed, value: v, limit: 1.0, detail: detail.into() }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<ScenarioCheck>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<CompareOutput>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triangular: Vec<TriangularRow>,
}

impl ScenarioReport {
    fn new(name: &str, seed: u64) -> Self {
        Self { name: name.into(), seed, passed: false, checks: vec![], comparisons: vec![], triangular: vec![] }
    }

    fn finish(mut self) -> Self {
        self.passed = !self.checks.is_empty() && self.checks.iter().all(|c| c.passed);
        self
    }

    pub fn failed_checks(&self) -> Vec<&ScenarioCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn preset_config(name: &str) -> Result<CompareConfig> {
    parse(presets::find(name)?.text)
}

fn row(out: &CompareOutput, kind: BoundKind, quantity: Quantity) -> Result<&DominanceRow> {
    out.report
        .rows
        .iter()
        .find(|r| r.bound_kind == kind.name() && r.quantity == quantity)
        .ok_or_else(|| Error::InvalidInput(format!("no {} row for {}", kind.name(), quantity.label())))
}

fn rows_of(out: &CompareOutput, kind: BoundKind) -> Vec<&DominanceRow> {
    out.report.rows.iter().filter(|r| r.bound_kind == kind.name()).collect()
}

fn no_violations(name: &str, out: &CompareOutput) -> ScenarioCheck {
    let violations = out.report.rows.iter().filter(|r| r.violation).count();
    ScenarioCheck::at_most(name, violations as f64, 0.0).with_detail(format!(
        "{} rows, {} with failed conditions",
        out.report.rows.len(),
        out.report.rows.iter().filter(|r| !r.conditions_hold).count()
    ))
}

fn random_two_point<R: Rng + ?Sized>(r: &mut R, d: usize) -> Result<FactorEnsemble> {
    let centre = DenseMatrix::identity(d).add_scaled(&rng::uniform_matrix(r, d, d, 1.0), 0.4)?;
    let spread = rng::uniform_matrix(r, d, d, 0.3);
    let w = r.random_range(0.2..0.8);
    FactorEnsemble::from_support(vec![
        Atom { matrix: centre.try_add(&spread)?, prob: w },
        Atom { matrix: centre.try_sub(&spread.scale(w / (1.0 - w)))?, prob: 1.0 - w },
    ])
}

/// Exact moments of random two-point products never exceed the moment
/// bounds; includes the scalar `1 ± 0.1`, `n = 2` hand instance.
pub fn exact_oracle_dominance(seed: u64) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::new("exact-oracle-dominance", seed);
    let cfg = preset_config("scalar-demo")?;
    let demo = run_compare_on(&cfg.spec.build()?, &cfg, None, Some(seed))?;
    let hand = row(&demo, BoundKind::ConcentrationMoment, Quantity::Deviation)?;
    let exact = hand.exact.unwrap_or(f64::NAN);
    report.checks.push(
        ScenarioCheck::at_most("hand-exact-deviation", (exact - 0.105).abs(), 1e-12)
            .with_detail(format!("E|Z - EZ| = {exact}")),
    );
    report.checks.push(
        ScenarioCheck::at_most("hand-ratio", (hand.ratio - 1.354).abs(), 1e-3)
            .with_detail(format!("bound {} / exact {exact} = {}", hand.bound, hand.ratio)),
    );
    report.comparisons.push(demo);

    let orders = [(2.0, 2.0), (3.0, 2.0), (4.0, 2.0), (4.0, 4.0), (6.0, 3.0)];
    let mut violations = 0usize;
    let mut rows = 0usize;
    let mut outcomes_max = 0u64;
    let mut worst = f64::INFINITY;
    for k in 0..RANDOM_SPECS {
        let mut r = rng::stream(derive_seed(seed, 4), k as u64);
        let d = r.random_range(1..=RANDOM_MAX_DIM);
        let n = r.random_range(1..=RANDOM_MAX_N);
        let (p, q) = orders[r.random_range(0..orders.len())];
        let factors =
            (0..n).map(|_| random_two_point(&mut r, d).map(std::sync::Arc::new)).collect::<Result<Vec<_>>>()?;
        let z0 = if r.random_bool(0.5) {
            DenseMatrix::identity(d)
        } else {
            let cols = r.random_range(1..=d);
            rng::uniform_matrix(&mut r, d, cols, 1.0)
        };
        let spec = ProductSpec::new(factors, z0, ProductMode::Independent)?;
        let cfg = CompareConfig {
            spec: Default::default(),
            bounds: vec![CompareBound::GrowthMoment, CompareBound::ConcentrationMoment],
            p: crate::config::OrderConfig::Value(p),
            q,
            trials: Some(0),
            seed: None,
            thresholds: vec![],
            growth_thresholds: vec![],
            similarity: None,
            exact: true,
        };
        let out = run_compare_on(&spec, &cfg, None, Some(derive_seed(seed, k as u64)))?;
        outcomes_max = outcomes_max.max(out.exact_outcomes.unwrap_or(u64::MAX));
        violations += out.report.violations;
        rows += out.report.rows.len();
        worst = worst.min(out.report.worst_margin);
    }
    report.checks.push(
        ScenarioCheck::at_most("random-spec-violations", violations as f64, 0.0)
            .with_detail(format!("{RANDOM_SPECS} specs, {rows} rows, worst normalized margin {worst}")),
    );
    report.checks.push(ScenarioCheck::at_most("max-enumerated-outcomes", outcomes_max as f64, 4096.0));
    Ok(report.finish())
}

/// Perturbations of the identity at `d = 10`, `n = 200`: expectation and
/// tail bounds against Monte Carlo, with exact tails as a second witness.
pub fn perturbation_scenario(seed: u64) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::new("perturbation-scenario", seed);
    let cfg = preset_config("identity-perturbation")?;
    let spec = cfg.spec.build()?;
    let mc = run_compare_on(&spec, &cfg, Some(PERTURBATION_TRIALS), Some(seed))?;
    let exact_cfg = CompareConfig { exact: true, ..cfg.clone() };
    let exact = run_compare_on(&spec, &exact_cfg, Some(0), Some(seed))?;

    let e = row(&mc, BoundKind::ExpectationConcentration, Quantity::Deviation)?;
    let ucl = e.empirical.map_or(f64::NAN, |x| x.ucl);
    report.checks.push(ScenarioCheck::at_most("expectation-ucl", ucl, e.bound));
    report.checks.push(ScenarioCheck::at_most("expectation-ucl-below-0.3217", ucl, 0.3217));
    for t in &cfg.thresholds {
        let quantity = Quantity::DeviationTail { threshold: *t };
        let m = row(&mc, BoundKind::PerturbationTailConcentration, quantity)?;
        let x = row(&exact, BoundKind::PerturbationTailConcentration, quantity)?;
        let ucl = m.empirical.map_or(f64::NAN, |x| x.ucl);
        let exact_p = x.exact.unwrap_or(f64::NAN);
        let freq = m.empirical.map_or(f64::NAN, |x| x.estimate);
        let passed = ucl <= m.bound || exact_p <= m.bound;
        report.checks.push(ScenarioCheck {
            name: format!("tail t={t}"),
            passed: passed && freq <= m.bound,
            value: ucl.min(exact_p),
            limit: m.bound,
            detail: format!("frequency {freq}, Clopper-Pearson UCL {ucl}, exact {exact_p}"),
        });
    }
    report.checks.push(no_violations("exact-rows", &exact));
    report.comparisons.push(mc);
    report.comparisons.push(exact);
    Ok(report.finish())
}

/// `sqrt(n) E‖Z^{(n)} − EZ^{(n)}‖` stays below `sqrt(1 + 2 ln d) L e` for
/// `A = 0`, `L = 1`, `d = 5`, and the means decrease in `n`.
pub fn triangular_rate(seed: u64) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::new("triangular-rate", seed);
    let rows = triangular_array_run(
        &DenseMatrix::zeros(5, 5),
        1.0,
        &TRIANGULAR_N,
        TRIANGULAR_TRIALS,
        seed,
        PerturbationSupport::TwoPoint,
    )?;
    for r in &rows {
        report.checks.push(ScenarioCheck::at_most(
            &format!("scaled-deviation n={}", r.n),
            r.scaled_deviation,
            r.reference_bound,
        ));
        report.checks.push(ScenarioCheck::at_most(
            &format!("scaled-deviation-below-5.51 n={}", r.n),
            r.scaled_deviation,
            5.51,
        ));
    }
    let decreasing = rows.windows(2).all(|w| w[1].deviation.mean < w[0].deviation.mean);
    let means: Vec<String> = rows.iter().map(|r| r.deviation.mean.to_string()).collect();
    report.checks.push(ScenarioCheck::flag("means-decrease", decreasing, means.join(" > ")));
    report.triangular = rows;
    Ok(report.finish())
}

/// Products of random coordinate projections: norms stay at most one and
/// the contraction bounds dominate.
pub fn kaczmarz_contraction(seed: u64) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::new("kaczmarz-contraction", seed);
    let mut cfg = preset_config("kaczmarz")?;
    let spec = cfg.spec.build()?;
    let infeasible = matches!(enumerate_product(&spec, 2.0, 2.0, &[]), Err(Error::EnumerationInfeasible { .. }));
    report.checks.push(ScenarioCheck::flag("enumeration-infeasible", infeasible, "8^50 paths"));
    let c = spec
        .stats(2.0)?
        .contraction
        .ok_or_else(|| Error::UnsupportedEnsemble("projector ensemble lacks contraction statistics".into()))?;
    let edge = (2.0 * std::f64::consts::E * c.v).sqrt();
    cfg.thresholds.extend([edge, 1.2 * edge]);
    let out = run_compare_on(&spec, &cfg, Some(CONTRACTION_TRIALS), Some(seed))?;

    let run = simulate_product(&spec, CONTRACTION_TRIALS, seed)?;
    let norms = estimate_norm_statistics(&run, 2.0, 2.0, None)?;
    let max_norm = norms.per_trial.iter().map(|t| t.norm).fold(0.0, f64::max);
    report.checks.push(ScenarioCheck::at_most("max-trial-norm", max_norm, 1.0 + CONTRACTION_SLACK));
    let conc = row(&out, BoundKind::ContractionConcentration, Quantity::Deviation)?;
    report.checks.push(
        ScenarioCheck::at_most("expectation-ucl", conc.empirical.map_or(f64::NAN, |e| e.ucl), conc.bound)
            .with_detail(format!("M = {}, v = {}", c.log_m.exp(), c.v)),
    );
    let tails = rows_of(&out, BoundKind::ContractionTail);
    let applicable = tails.iter().filter(|r| r.conditions_hold).count();
    report.checks.push(ScenarioCheck::at_least("applicable-tail-rows", applicable as f64, 2.0));
    report.checks.push(no_violations("rows", &out));
    report.comparisons.push(out);
    Ok(report.finish())
}

/// Rank-one Rademacher factors applied to a unit vector: the projected
/// statistic is `sqrt(r/d)` and the low-rank bound beats the full one.
pub fn low_rank_improvement(seed: u64) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::new("low-rank-improvement", seed);
    let cfg = preset_config("rank-one")?;
    let spec = cfg.spec.build()?;
    let proj = projected_deviation_stat(&spec.factors()[0], 1, 1, seed)?;
    report.checks.push(
        ScenarioCheck::at_most("projected-sigma", (proj.value - 0.1).abs(), 1e-15)
            .with_detail(format!("value {}, quality {:?}", proj.value, proj.quality)),
    );
    report.checks.push(ScenarioCheck::flag("projected-analytic", proj.quality == StatQuality::Analytic, ""));
    let out = run_compare_on(&spec, &cfg, Some(LOW_RANK_TRIALS), Some(seed))?;
    let low = row(&out, BoundKind::LowRankConcentration, Quantity::Deviation)?;
    let full = row(&out, BoundKind::ConcentrationMoment, Quantity::Deviation)?;
    report.checks.push(
        ScenarioCheck::at_least("improvement-factor", full.bound / low.bound, 50.0)
            .with_detail(format!("full {} / low-rank {}", full.bound, low.bound)),
    );
    report.checks.push(ScenarioCheck::at_most("low-rank-ucl", low.empirical.map_or(f64::NAN, |e| e.ucl), low.bound));
    report.checks.push(no_violations("rows", &out));
    report.comparisons.push(out);
    Ok(report.finish())
}

/// Inverse products: the hand instance, per-trial `Z_n Z_n^{-1} = I`, and
/// dominance of the inverse expectation bounds.
pub fn inverse_products(seed: u64) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::new("inverse-products", seed);
    let (xi, v) = inverse_perturbation_stats(&[0.1], &[0.1])?;
    report.checks.push(ScenarioCheck::at_most("hand-xi-bar", (xi - 0.15).abs(), 1e-15));
    report.checks.push(ScenarioCheck::at_most("hand-v-bar", (v - 0.04).abs(), 1e-15));
    let cfg = preset_config("inverse")?;
    let spec = cfg.spec.build()?;
    let run = simulate_product(&spec, INVERSE_TRIALS, seed)?;
    let id = DenseMatrix::identity(spec.dim());
    let mut worst = 0.0f64;
    for t in &run.trials {
        let z = t.forward.as_ref().ok_or_else(|| Error::InvalidInput("inverse trial without Z_n".into()))?;
        worst = worst.max((&(z * &t.value) - &id).max_abs());
    }
    report.checks.push(ScenarioCheck::at_most("product-times-inverse", worst, INVERSE_SLACK));
    report.checks.push(ScenarioCheck::at_most("excluded-trials", run.excluded as f64, 0.0));
    let out = run_compare_on(&spec, &cfg, Some(INVERSE_TRIALS), Some(seed))?;
    let g = row(&out, BoundKind::InverseExpectationGrowth, Quantity::Norm)?;
    report.checks.push(ScenarioCheck::at_most("inverse-norm-ucl", g.empirical.map_or(f64::NAN, |e| e.ucl), g.bound));
    report.checks.push(no_violations("rows", &out));
    report.comparisons.push(out);
    Ok(report.finish())
}

/// History-dependent sign-flip factors, exact over all 256 paths.
pub fn adapted_sign_flip(seed: u64) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::new("adapted-sign-flip", seed);
    let cfg = preset_config("adapted-sign-flip")?;
    let spec = cfg.spec.build()?;
    let out = run_compare_on(&spec, &cfg, Some(0), Some(seed))?;
    report.checks.push(ScenarioCheck::at_most(
        "enumerated-paths",
        (out.exact_outcomes.unwrap_or(0) as f64 - 256.0).abs(),
        0.0,
    ));
    let r = row(&out, BoundKind::AdaptedConcentrationMoment, Quantity::Deviation)?;
    report.checks.push(
        ScenarioCheck::at_most("exact-deviation", r.exact.unwrap_or(f64::NAN), r.bound)
            .with_detail(format!("ratio {}", r.ratio)),
    );
    report.checks.push(no_violations("rows", &out));
    report.comparisons.push(out);
    Ok(report.finish())
}

/// `ϱ ≤ ‖·‖` per trial, and a diagonal similarity lowers the spectral
/// radius bound on upper-triangular factors.
pub fn spectral_radius_conjugation(seed: u64) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::new("spectral-radius-conjugation", seed);
    let cfg = preset_config("spectral-radius")?;
    let spec = cfg.spec.build()?;
    let run = simulate_product(&spec, RADIUS_TRIALS, seed)?;
    let mut worst = f64::NEG_INFINITY;
    for t in &run.trials {
        let rho = crate::schatten::spectral_radius(&t.value)?;
        let norm = spectral_norm(&t.value);
        worst = worst.max((rho - norm) / norm.max(f64::MIN_POSITIVE));
    }
    report.checks.push(ScenarioCheck::at_most("radius-below-norm", worst, 1e-9));
    let random = check_spectral_radius_bound(RADIUS_TRIALS, derive_seed(seed, 11))?;
    report.checks.push(ScenarioCheck::at_most("random-radius-violations", random.violations as f64, 0.0));
    let out = run_compare_on(&spec, &cfg, Some(0), Some(seed))?;
    let rows = rows_of(&out, BoundKind::SpectralRadiusExpectation);
    if rows.len() != 2 {
        return Err(Error::InvalidInput(format!("expected two spectral-radius rows, got {}", rows.len())));
    }
    report.checks.push(
        ScenarioCheck::at_most("conjugation-reduces-bound", rows[1].bound, rows[0].bound)
            .with_detail(format!("S = I: {}, S = diag(1, 0.1): {}", rows[0].bound, rows[1].bound)),
    );
    report.checks.last_mut().expect("pushed").passed &= rows[1].bound < rows[0].bound;
    report.checks.push(no_violations("rows", &out));
    report.comparisons.push(out);
    Ok(report.finish())
}

pub type ScenarioFn = fn(u64) -> Result<ScenarioReport>;

/// Every scenario in a fixed order.
pub const SCENARIOS: [(&str, ScenarioFn); 8] = [
    ("exact-oracle-dominance", exact_oracle_dominance),
    ("perturbation-scenario", perturbation_scenario),
    ("triangular-rate", triangular_rate),
    ("kaczmarz-contraction", kaczmarz_contraction),
    ("low-rank-improvement", low_rank_improvement),
    ("inverse-products", inverse_products),
    ("adapted-sign-flip", adapted_sign_flip),
    ("spectral-radius-conjugation", spectral_radius_conjugation),
];

//! Evaluation of parsed configurations into serializable outputs.

use serde::{Deserialize, Serialize};

use crate::bounds::{
    adapted_moment_bounds, concentration_moment_bound, contraction_bounds, expectation_concentration_bound,
    expectation_growth_bound, growth_from_concentration, growth_moment_bound, identity_perturbation_bounds,
    inverse_bounds, lowrank_moment_bounds, perturbation_bounds, scalar_reference_bounds,
    spectral_radius_expectation_bound, tail_concentration_bound, tail_growth_bound, triangular_array_bounds,
    uniform_moment_bounds, BoundResult, PerturbationQuery, ProductStats,
};
use crate::config::{
    projected_stats, BoundConfig, BoundRequest, CompareBound, CompareConfig, SimulateConfig, SpecConfig,
};
use crate::error::{Error, Result};
use crate::rng::DEFAULT_SEED;
use crate::serde_ext::{ext_f64, ext_f64_opt};
use crate::simulate::{
    conjugated_spec, enumerate_product, estimate_norm_statistics, expected_inverse, expected_product, simulate_product,
    ProductMode, ProductSpec, TrialNorms,
};
use crate::stats::{McEstimate, TailEstimate};
use crate::verify::{dominance_report, gather_evidence, CheckReport, DominanceOptions, DominanceTarget, Quantity};

pub const DEFAULT_TRIALS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorInfo {
    fn from(e: &Error) -> Self {
        Self { kind: e.kind().to_string(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub bound: String,
    pub results: Vec<BoundResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsOutput {
    pub bounds: Vec<BoundEntry>,
}

impl BoundsOutput {
    /// Some bound has a failed precondition.
    pub fn any_condition_violated(&self) -> bool {
        self.bounds.iter().any(|b| b.error.is_some() || b.results.iter().any(|r| !r.all_satisfied()))
    }
}

fn evaluate(req: &BoundRequest, seed: u64) -> Result<Vec<BoundResult>> {
    let pair = |r: (BoundResult, BoundResult)| vec![r.0, r.1];
    Ok(match req {
        BoundRequest::GrowthMoment { stats, p, q } => vec![growth_moment_bound(&stats.build(seed)?, *p, *q)?],
        BoundRequest::ConcentrationMoment { stats, p, q } => {
            vec![concentration_moment_bound(&stats.build(seed)?, *p, *q)?]
        }
        BoundRequest::UniformMoment { stats, p, q } => pair(uniform_moment_bounds(&stats.build(seed)?, *p, *q)?),
        BoundRequest::GrowthFromConcentration { stats, p, q, expected_norm_p } => {
            vec![growth_from_concentration(&stats.build(seed)?, *p, *q, *expected_norm_p)?]
        }
        BoundRequest::ExpectationGrowth { stats } => vec![expectation_growth_bound(&stats.build(seed)?)?],
        BoundRequest::ExpectationConcentration { stats, uniform } => {
            vec![expectation_concentration_bound(&stats.build(seed)?, *uniform)?]
        }
        BoundRequest::TailGrowth { stats, t } => vec![tail_growth_bound(&stats.build(seed)?, *t)?],
        BoundRequest::TailConcentration { stats, t, uniform } => {
            vec![tail_concentration_bound(&stats.build(seed)?, *t, *uniform)?]
        }
        BoundRequest::Perturbation { xi, v, d, query } => vec![perturbation_bounds(*xi, *v, *d, *query)?],
        BoundRequest::Inverse { xi, sigma, d } => pair(inverse_bounds(xi, sigma, *d)?),
        BoundRequest::Contraction { stats, t } => contraction_bounds(&stats.build(seed)?, *t)?,
        BoundRequest::LowRank { stats, p } => pair(lowrank_moment_bounds(&stats.build(seed)?, *p)?),
        BoundRequest::Adapted { stats, p, q } => pair(adapted_moment_bounds(&stats.build(seed)?, *p, *q)?),
        BoundRequest::SpectralRadius { spec, similarity } => {
            let spec = spec.build()?;
            let spec = match similarity {
                Some(s) => conjugated_spec(&spec, s)?,
                None => spec,
            };
            vec![spectral_radius_expectation_bound(&spec.stats(2.0)?)?]
        }
        BoundRequest::Scalar { mu, b, n, query } => vec![scalar_reference_bounds(*mu, *b, *n, *query)?],
        BoundRequest::TriangularArray(sc) => pair(triangular_array_bounds(sc)?),
        BoundRequest::IdentityPerturbation { d, n, b, mu, s, t } => {
            pair(identity_perturbation_bounds(*d, *n, *b, *mu, *s, *t)?)
        }
    })
}

/// Evaluates every request. Failed preconditions stay inline, either as
/// results with infinite value or as a `condition-violated` error entry;
/// any other error aborts.
pub fn run_bounds(cfg: &BoundConfig, seed: Option<u64>) -> Result<BoundsOutput> {
    let seed = seed.unwrap_or(DEFAULT_SEED);
    let mut bounds = Vec::with_capacity(cfg.bounds.len());
    for req in &cfg.bounds {
        let bound = req.name();
        match evaluate(req, seed) {
            Ok(results) => bounds.push(BoundEntry { bound, results, error: None }),
            Err(e @ Error::ConditionViolated(_)) => {
                bounds.push(BoundEntry { bound, results: vec![], error: Some((&e).into()) })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(BoundsOutput { bounds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityValue {
    pub quantity: String,
    #[serde(with = "ext_f64")]
    pub value: f64,
    #[serde(default, with = "ext_f64_opt", skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(default, with = "ext_f64_opt", skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(default, with = "ext_f64_opt", skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
    #[serde(default, with = "ext_f64_opt", skip_serializing_if = "Option::is_none")]
    pub ucl: Option<f64>,
}

impl QuantityValue {
    fn exact(quantity: &str, value: f64) -> Self {
        Self { quantity: quantity.into(), value, std_error: None, ci_low: None, ci_high: None, ucl: None }
    }

    fn estimate(e: &McEstimate) -> Self {
        Self {
            quantity: e.quantity.clone(),
            value: e.mean,
            std_error: Some(e.std_error),
            ci_low: Some(e.ci_low),
            ci_high: Some(e.ci_high),
            ucl: Some(e.ucl),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    /// `growth` for `P{‖Z_n‖ ≥ t}`, `deviation` for `P{‖Z_n − ref‖ ≥ t}`.
    pub tail: String,
    pub threshold: f64,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ucl: Option<f64>,
}

impl TailRow {
    fn estimate(tail: &str, e: &TailEstimate) -> Self {
        Self {
            tail: tail.into(),
            threshold: e.threshold,
            probability: e.frequency,
            hits: Some(e.hits),
            ci_low: Some(e.ci_low),
            ci_high: Some(e.ci_high),
            ucl: Some(e.ucl),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    /// `monte-carlo` or `exact`.
    pub method: String,
    pub mode: String,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub p: f64,
    pub q: f64,
    /// Trials kept, or enumerated outcomes.
    pub trials: u64,
    pub excluded: usize,
    pub quantities: Vec<QuantityValue>,
    pub tails: Vec<TailRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_trial: Vec<TrialNorms>,
}

const QUANTITY_NAMES: [&str; 5] = ["norm", "moment", "deviation", "deviation-moment", "spectral-radius"];

fn reference_for(spec: &ProductSpec) -> Result<Option<crate::DenseMatrix>> {
    Ok(match spec.mode() {
        ProductMode::Independent => Some(expected_product(spec)?),
        ProductMode::Inverse => expected_inverse(spec).ok(),
        ProductMode::Adapted(_) => None,
    })
}

/// Runs a simulation. `trials = 0` enumerates all outcomes when that is
/// feasible and falls back to Monte Carlo with a note otherwise.
pub fn run_simulate(cfg: &SimulateConfig, trials: Option<usize>, seed: Option<u64>) -> Result<SimulateOutput> {
    for q in &cfg.quantities {
        if !QUANTITY_NAMES.contains(&q.as_str()) {
            return Err(Error::InvalidInput(format!(
                "unknown quantity {q:?}; expected one of {}",
                QUANTITY_NAMES.join(", ")
            )));
        }
    }
    let spec = cfg.spec.build()?;
    let seed = seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let p = cfg.p.resolve(spec.dim());
    let q = cfg.q;
    let mut trials = trials.or(cfg.trials).unwrap_or(DEFAULT_TRIALS);
    let mut notes = Vec::new();
    let wanted = |name: &str| cfg.quantities.is_empty() || cfg.quantities.iter().any(|q| q == name);
    let base = |method: &str, count: u64, excluded, notes| SimulateOutput {
        method: method.into(),
        mode: spec.mode().name().into(),
        n: spec.n(),
        dim: spec.dim(),
        seed,
        p,
        q,
        trials: count,
        excluded,
        quantities: vec![],
        tails: vec![],
        notes,
        per_trial: vec![],
    };

    if trials == 0 {
        match enumerate_product(&spec, p, q, &cfg.thresholds) {
            Ok(r) => {
                let mut out = base("exact", r.outcomes, 0, notes);
                let values = [
                    ("norm", Some(r.norm)),
                    ("moment", Some(r.moment)),
                    ("deviation", Some(r.deviation)),
                    ("deviation-moment", Some(r.deviation_moment)),
                    ("spectral-radius", r.radius),
                ];
                out.quantities = values
                    .iter()
                    .filter(|(n, v)| wanted(n) && v.is_some())
                    .map(|(n, v)| QuantityValue::exact(n, v.unwrap_or_default()))
                    .collect();
                for t in &r.tails {
                    for (tail, prob) in [("growth", t.growth), ("deviation", t.deviation)] {
                        out.tails.push(TailRow {
                            tail: tail.into(),
                            threshold: t.threshold,
                            probability: prob,
                            hits: None,
                            ci_low: None,
                            ci_high: None,
                            ucl: None,
                        });
                    }
                }
                return Ok(out);
            }
            Err(e @ (Error::EnumerationInfeasible { .. } | Error::Unsupported(_) | Error::UnsupportedEnsemble(_))) => {
                notes.push(format!("exact enumeration unavailable ({e}); using {DEFAULT_TRIALS} Monte Carlo trials"));
                trials = DEFAULT_TRIALS;
            }
            Err(e) => return Err(e),
        }
    }

    let reference = reference_for(&spec)?;
    let run = simulate_product(&spec, trials, seed)?;
    let report = estimate_norm_statistics(&run, p, q, reference.as_ref())?;
    let mut out = base("monte-carlo", report.trials as u64, report.excluded, notes);
    let estimates = [
        Some(&report.norm),
        Some(&report.moment),
        report.deviation.as_ref(),
        report.deviation_moment.as_ref(),
        report.radius.as_ref(),
    ];
    out.quantities =
        estimates.into_iter().flatten().filter(|e| wanted(&e.quantity)).map(QuantityValue::estimate).collect();
    let growth = report.growth_tails(&cfg.thresholds);
    let deviation = report.deviation_tails(&cfg.thresholds);
    for (i, g) in growth.iter().enumerate() {
        out.tails.push(TailRow::estimate("growth", g));
        if let Some(d) = deviation.get(i).filter(|d| d.trials > 0) {
            out.tails.push(TailRow::estimate("deviation", d));
        }
    }
    if cfg.per_trial {
        out.per_trial = report.per_trial;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOutput {
    pub p: f64,
    pub q: f64,
    pub seed: u64,
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_outcomes: Option<u64>,
    pub stats: ProductStats,
    pub report: CheckReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn moment_targets(growth: Option<BoundResult>, conc: Option<BoundResult>) -> Vec<DominanceTarget> {
    let mut out = Vec::new();
    if let Some(g) = growth {
        out.push(DominanceTarget { quantity: Quantity::Moment, bound: g.clone() });
        out.push(DominanceTarget { quantity: Quantity::Norm, bound: g });
    }
    if let Some(c) = conc {
        out.push(DominanceTarget { quantity: Quantity::DeviationMoment, bound: c.clone() });
        out.push(DominanceTarget { quantity: Quantity::Deviation, bound: c });
    }
    out
}

/// Statistics used by a comparison; projected statistics are added when a
/// low-rank bound is requested and `Z_0` has fewer columns than rows.
pub fn compare_stats(spec: &ProductSpec, cfg: &CompareConfig, seed: u64) -> Result<ProductStats> {
    let stats = spec.stats(cfg.q)?;
    let rank = spec.z0().cols();
    if cfg.bounds.contains(&CompareBound::LowRank) && rank < spec.dim() {
        stats.with_projected(&projected_stats(spec, rank, seed)?)
    } else {
        Ok(stats)
    }
}

/// The (quantity, bound) pairs implied by a comparison config.
pub fn compare_targets(
    spec: &ProductSpec,
    cfg: &CompareConfig,
    stats: &ProductStats,
    p: f64,
) -> Result<Vec<DominanceTarget>> {
    let q = cfg.q;
    let mut out = Vec::new();
    let target = |quantity, bound| DominanceTarget { quantity, bound };
    for b in &cfg.bounds {
        match b {
            CompareBound::GrowthMoment => out.extend(moment_targets(Some(growth_moment_bound(stats, p, q)?), None)),
            CompareBound::ConcentrationMoment => {
                out.extend(moment_targets(None, Some(concentration_moment_bound(stats, p, q)?)))
            }
            CompareBound::UniformMoment => {
                let (g, c) = uniform_moment_bounds(stats, p, q)?;
                out.extend(moment_targets(Some(g), Some(c)));
            }
            CompareBound::ExpectationGrowth => out.push(target(Quantity::Norm, expectation_growth_bound(stats)?)),
            CompareBound::ExpectationConcentration => {
                out.push(target(Quantity::Deviation, expectation_concentration_bound(stats, false)?))
            }
            CompareBound::ExpectationConcentrationUniform => {
                out.push(target(Quantity::Deviation, expectation_concentration_bound(stats, true)?))
            }
            CompareBound::TailGrowth => {
                for &t in &cfg.growth_thresholds {
                    out.push(target(Quantity::GrowthTail { threshold: t * stats.m() }, tail_growth_bound(stats, t)?));
                }
            }
            CompareBound::TailConcentration => {
                for &t in &cfg.thresholds {
                    let bound = tail_concentration_bound(stats, t, false)?;
                    out.push(target(Quantity::DeviationTail { threshold: t * stats.m() }, bound));
                }
            }
            CompareBound::TailConcentrationUniform => {
                let b = stats.b().ok_or(Error::MissingUniformBounds)?;
                for &t in &cfg.thresholds {
                    let bound = tail_concentration_bound(stats, t, true)?;
                    out.push(target(Quantity::DeviationTail { threshold: t * b }, bound));
                }
            }
            CompareBound::Perturbation => {
                let (xi, v) = stats.xi.zip(stats.perturbation_v).ok_or_else(|| {
                    Error::UnsupportedEnsemble("perturbation bounds need factors of the form I + X_i".into())
                })?;
                let d = stats.dim;
                out.push(target(Quantity::Norm, perturbation_bounds(xi, v, d, PerturbationQuery::ExpGrowth)?));
                out.push(target(Quantity::Deviation, perturbation_bounds(xi, v, d, PerturbationQuery::ExpConc)?));
                for &t in &cfg.growth_thresholds {
                    let bound = perturbation_bounds(xi, v, d, PerturbationQuery::TailGrowth { t })?;
                    out.push(target(Quantity::GrowthTail { threshold: t * xi.exp() }, bound));
                }
                for &t in &cfg.thresholds {
                    let bound = perturbation_bounds(xi, v, d, PerturbationQuery::TailConc { t })?;
                    out.push(target(Quantity::DeviationTail { threshold: t * xi.exp() }, bound));
                }
            }
            CompareBound::Inverse => {
                let (xi, sigma): (Vec<f64>, Vec<f64>) = spec
                    .factors()
                    .iter()
                    .map(|f| f.stats().xi.zip(f.stats().perturbation_sigma))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| {
                        Error::UnsupportedEnsemble("inverse bounds need factors of the form I + X_i".into())
                    })?
                    .into_iter()
                    .unzip();
                let (g, c) = inverse_bounds(&xi, &sigma, spec.dim())?;
                out.push(target(Quantity::Norm, g));
                out.push(target(Quantity::Deviation, c));
            }
            CompareBound::Contraction => {
                let mut base = contraction_bounds(stats, None)?.into_iter();
                if let (Some(g), Some(c)) = (base.next(), base.next()) {
                    out.push(target(Quantity::Norm, g));
                    out.push(target(Quantity::Deviation, c));
                }
                for &t in &cfg.thresholds {
                    if let Some(tail) = contraction_bounds(stats, Some(t))?.pop() {
                        out.push(target(Quantity::DeviationTail { threshold: t }, tail));
                    }
                }
            }
            CompareBound::LowRank => {
                if q != 2.0 {
                    return Err(Error::InvalidParameter(format!("low-rank bounds are stated for q = 2, got q = {q}")));
                }
                let (g, c) = lowrank_moment_bounds(stats, p)?;
                out.extend(moment_targets(Some(g), Some(c)));
            }
            CompareBound::Adapted => {
                let (g, c) = adapted_moment_bounds(stats, p, q)?;
                out.extend(moment_targets(Some(g), Some(c)));
            }
            CompareBound::SpectralRadius => {
                out.push(target(Quantity::Radius, spectral_radius_expectation_bound(stats)?));
                if let Some(s) = &cfg.similarity {
                    let conj = conjugated_spec(spec, s)?.stats(q)?;
                    out.push(target(Quantity::Radius, spectral_radius_expectation_bound(&conj)?));
                }
            }
        }
    }
    Ok(out)
}

/// Evaluates the requested bounds and checks them against exact or Monte
/// Carlo values of the quantities they control.
pub fn run_compare(cfg: &CompareConfig, trials: Option<usize>, seed: Option<u64>) -> Result<CompareOutput> {
    let spec = cfg.spec.build()?;
    run_compare_on(&spec, cfg, trials, seed)
}

pub fn run_compare_on(
    spec: &ProductSpec,
    cfg: &CompareConfig,
    trials: Option<usize>,
    seed: Option<u64>,
) -> Result<CompareOutput> {
    let seed = seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let p = cfg.p.resolve(spec.dim());
    let stats = compare_stats(spec, cfg, seed)?;
    let targets = compare_targets(spec, cfg, &stats, p)?;
    let thresholds: Vec<f64> = targets
        .iter()
        .filter_map(|t| match t.quantity {
            Quantity::GrowthTail { threshold } | Quantity::DeviationTail { threshold } => Some(threshold),
            _ => None,
        })
        .collect();
    let mut opts = DominanceOptions {
        p,
        q: cfg.q,
        trials: trials.or(cfg.trials).unwrap_or(DEFAULT_TRIALS),
        seed,
        exact: cfg.exact,
    };
    let mut notes = Vec::new();
    let evidence = match gather_evidence(spec, &thresholds, &opts) {
        Err(Error::NothingToCheck(msg)) if opts.trials == 0 => {
            notes.push(format!("{msg}; using {DEFAULT_TRIALS} Monte Carlo trials"));
            opts.trials = DEFAULT_TRIALS;
            gather_evidence(spec, &thresholds, &opts)?
        }
        other => other?,
    };
    notes.extend(evidence.notes.iter().cloned());
    let report = dominance_report("compare", &targets, &evidence, seed);
    Ok(CompareOutput {
        p,
        q: cfg.q,
        seed,
        trials: evidence.mc.as_ref().map_or(0, |m| m.trials),
        exact_outcomes: evidence.exact.as_ref().map(|e| e.outcomes),
        stats,
        report,
        notes,
    })
}

/// Parses and builds a spec from JSON text.
pub fn spec_from_json(text: &str) -> Result<ProductSpec> {
    crate::config::parse::<SpecConfig>(text)?.build()
}

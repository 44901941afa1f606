//! Closed-form growth and concentration bounds for random matrix products.
//!
//! Every evaluator returns a [`BoundResult`] that records the parameters it
//! used and the status of each precondition. A failed precondition yields
//! `value = ∞` with the failing predicate flagged; [`BoundResult::require`]
//! turns that into a `condition-violated` error for callers that prefer one.

use std::f64::consts::E;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ensembles::{FactorEnsemble, FactorStats, ProjectedStat, StatQuality};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::schatten::{schatten_norm, smoothness_constant, SchattenOrder, SchattenParams};
use crate::serde_ext::{ext_f64, ext_f64_opt};

/// Grid used by the optional refinement over the Schatten order.
pub const REFINE_POINTS: usize = 200;
pub const REFINE_P_MIN: f64 = 2.0;
pub const REFINE_P_MAX: f64 = 1e6;

/// Initial matrix `Z_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialMatrix {
    Identity(usize),
    Matrix(DenseMatrix),
}

impl InitialMatrix {
    pub fn rows(&self) -> usize {
        match self {
            InitialMatrix::Identity(d) => *d,
            InitialMatrix::Matrix(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            InitialMatrix::Identity(d) => *d,
            InitialMatrix::Matrix(m) => m.cols(),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            InitialMatrix::Identity(_) => true,
            InitialMatrix::Matrix(m) => m.is_square() && *m == DenseMatrix::identity(m.rows()),
        }
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        match self {
            InitialMatrix::Identity(d) => DenseMatrix::identity(*d),
            InitialMatrix::Matrix(m) => m.clone(),
        }
    }

    /// `ln ‖Z_0‖_p`; `-∞` for the zero matrix.
    pub fn ln_schatten(&self, p: impl Into<SchattenOrder>) -> Result<f64> {
        let order = p.into().validate()?;
        match (self, order) {
            (InitialMatrix::Identity(_), SchattenOrder::Infinity) => Ok(0.0),
            (InitialMatrix::Identity(d), SchattenOrder::Finite(p)) => Ok((*d as f64).ln() / p),
            (InitialMatrix::Matrix(m), order) => Ok(schatten_norm(m, order)?.ln()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionStats {
    /// `ln Π m_i` with `‖E|Y_i|²‖ ≤ m_i²`.
    pub log_m: f64,
    /// `Σ σ_i²` with `‖Y_i − EY_i‖ ≤ σ_i m_i` almost surely.
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedStats {
    pub rank: usize,
    /// `Σ σ_i²` built from the projected deviation statistics.
    pub v: f64,
    pub quality: StatQuality,
}

/// Aggregate statistics of a product `Y_n ⋯ Y_1 Z_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductStats {
    pub n: usize,
    pub dim: usize,
    pub z0: InitialMatrix,
    /// `ln M`, `M = Π m_i`.
    pub log_m: f64,
    /// `v = Σ σ_i²` at order `order`.
    pub v: f64,
    pub order: f64,
    /// `Σ σ_i²` from almost-sure relative deviation bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_as: Option<f64>,
    /// `ln B`, `B = Π b_i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_b: Option<f64>,
    /// `Σ (σ_i m_i / b_i)²`: the variance proxy relative to the uniform bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_uniform: Option<f64>,
    /// `ξ = Σ ξ_i` for factors `I + X_i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    /// `Σ σ_i²` with `‖X_i − EX_i‖ ≤ σ_i` almost surely.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction: Option<ContractionStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projected: Option<ProjectedStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<FactorStats>,
}

fn sum_opt(mut values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.try_fold(0.0, |acc, x| x.map(|x| acc + x))
}

impl ProductStats {
    /// Aggregates per-factor statistics at deviation order `q`.
    pub fn from_factors(dim: usize, z0: InitialMatrix, factors: &[FactorStats], q: f64) -> Result<Self> {
        Self::build(dim, z0, factors, q, |i| factors[i].sigma_at(q))
    }

    /// Aggregates ensemble statistics at order `q`, using exact support
    /// moments when the analytic statistic does not reach order `q`.
    pub fn from_ensembles(z0: InitialMatrix, factors: &[Arc<FactorEnsemble>], q: f64) -> Result<Self> {
        let dim = z0.rows();
        let stats: Vec<FactorStats> = factors.iter().map(|f| f.stats().clone()).collect();
        Self::build(dim, z0, &stats, q, |i| factors[i].sigma_at(q))
    }

    fn build(
        dim: usize,
        z0: InitialMatrix,
        factors: &[FactorStats],
        q: f64,
        sigma_at: impl Fn(usize) -> Option<f64>,
    ) -> Result<Self> {
        if !(q >= 2.0) {
            return Err(Error::InvalidParameter(format!("order q must be at least 2, got {q}")));
        }
        if dim == 0 || z0.rows() != dim {
            return Err(Error::InvalidInput(format!("initial matrix has {} rows, expected {dim}", z0.rows())));
        }
        let mut sigmas = Vec::with_capacity(factors.len());
        for (i, f) in factors.iter().enumerate() {
            f.validate()?;
            let s = sigma_at(i).ok_or_else(|| {
                Error::InvalidParameter(format!("factor {} has no deviation statistic at order {q}", i + 1))
            })?;
            sigmas.push(s);
        }
        let log_m = factors.iter().map(|f| f.m.ln()).sum();
        let v = sigmas.iter().map(|s| s * s).sum();
        let v_as = sum_opt(factors.iter().map(|f| f.deviation_uniform.map(|s| s * s)));
        let log_b = sum_opt(factors.iter().map(|f| f.uniform_bound.map(f64::ln)));
        let v_uniform =
            sum_opt(factors.iter().zip(&sigmas).map(|(f, s)| f.uniform_bound.map(|b| (s * f.m / b).powi(2))));
        let xi = sum_opt(factors.iter().map(|f| f.xi));
        let perturbation_v = sum_opt(factors.iter().map(|f| f.perturbation_sigma.map(|s| s * s)));
        let contraction = factors
            .iter()
            .map(|f| {
                let c = f.contraction_stat?;
                let dev = f.deviation_uniform? * f.m;
                Some((c.ln(), (dev / c).powi(2)))
            })
            .try_fold((0.0, 0.0), |(lm, v), x| x.map(|(a, b)| (lm + a, v + b)))
            .map(|(log_m, v)| ContractionStats { log_m, v });
        Ok(Self {
            n: factors.len(),
            dim,
            z0,
            log_m,
            v,
            order: q,
            v_as,
            log_b,
            v_uniform,
            xi,
            perturbation_v,
            contraction,
            projected: None,
            factors: factors.to_vec(),
        })
    }

    /// Attaches projected deviation statistics (one per factor, absolute values).
    pub fn with_projected(mut self, stats: &[ProjectedStat]) -> Result<Self> {
        if stats.len() != self.n || self.factors.len() != self.n {
            return Err(Error::InvalidInput(format!("expected {} projected statistics, got {}", self.n, stats.len())));
        }
        let rank = stats.first().map_or(self.z0.cols(), |s| s.rank);
        if stats.iter().any(|s| s.rank != rank) {
            return Err(Error::InvalidInput("projected statistics have mixed ranks".into()));
        }
        let v = stats.iter().zip(&self.factors).map(|(s, f)| (s.value / f.m).powi(2)).sum();
        let quality = stats
            .iter()
            .map(|s| s.quality)
            .find(|q| matches!(q, StatQuality::LowerEstimate | StatQuality::Estimate))
            .unwrap_or(StatQuality::Analytic);
        self.projected = Some(ProjectedStats { rank, v, quality });
        Ok(self)
    }

    pub fn m(&self) -> f64 {
        self.log_m.exp()
    }

    pub fn b(&self) -> Option<f64> {
        self.log_b.map(f64::exp)
    }

    /// Recomputes the aggregates from the stored factor list and compares.
    pub fn is_consistent(&self) -> bool {
        if self.factors.is_empty() {
            return true;
        }
        match Self::from_factors(self.dim, self.z0.clone(), &self.factors, self.order) {
            Ok(fresh) => {
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
                let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
                    (Some(a), Some(b)) => close(a, b),
                    (None, None) => true,
                    _ => false,
                };
                close(fresh.log_m, self.log_m)
                    && close(fresh.v, self.v)
                    && close_opt(fresh.log_b, self.log_b)
                    && close_opt(fresh.xi, self.xi)
            }
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    GrowthMoment,
    ConcentrationMoment,
    UniformGrowthMoment,
    UniformConcentrationMoment,
    GrowthFromConcentration,
    ExpectationGrowth,
    ExpectationConcentration,
    ExpectationConcentrationUniform,
    TailGrowth,
    TailConcentration,
    TailConcentrationUniform,
    PerturbationExpectationGrowth,
    PerturbationExpectationConcentration,
    PerturbationTailGrowth,
    PerturbationTailConcentration,
    InverseExpectationGrowth,
    InverseExpectationConcentration,
    ContractionGrowth,
    ContractionConcentration,
    ContractionTail,
    LowRankGrowth,
    LowRankConcentration,
    SpectralRadiusExpectation,
    ScalarGrowthTail,
    ScalarConcentrationTail,
    TriangularExpectationConcentration,
    TriangularHighProbabilityConcentration,
    AdaptedGrowthMoment,
    AdaptedConcentrationMoment,
}

impl BoundKind {
    pub fn name(self) -> String {
        serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    }

    pub fn is_probability(self) -> bool {
        matches!(
            self,
            BoundKind::TailGrowth
                | BoundKind::TailConcentration
                | BoundKind::TailConcentrationUniform
                | BoundKind::PerturbationTailGrowth
                | BoundKind::PerturbationTailConcentration
                | BoundKind::ContractionTail
                | BoundKind::ScalarGrowthTail
                | BoundKind::ScalarConcentrationTail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub requirement: String,
    pub satisfied: bool,
}

impl Condition {
    pub fn new(name: &str, requirement: impl Into<String>, satisfied: bool) -> Self {
        Self { name: name.into(), requirement: requirement.into(), satisfied }
    }
}

/// Best value over a grid of Schatten orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub p: f64,
    #[serde(with = "ext_f64")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub kind: BoundKind,
    #[serde(with = "ext_f64")]
    pub value: f64,
    /// `min(value, cap)` where a trivial cap is available.
    #[serde(with = "ext_f64")]
    pub capped_value: f64,
    #[serde(default, with = "ext_f64_opt", skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    pub params: SchattenParams,
    pub conditions: Vec<Condition>,
    pub trivial_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<Refinement>,
}

impl BoundResult {
    fn assemble(
        kind: BoundKind,
        params: SchattenParams,
        conditions: Vec<Condition>,
        cap: Option<f64>,
        value: impl FnOnce() -> f64,
    ) -> Self {
        let ok = conditions.iter().all(|c| c.satisfied);
        let value = if ok { value() } else { f64::INFINITY };
        let cap = if kind.is_probability() { Some(cap.map_or(1.0, |c| c.min(1.0))) } else { cap };
        let capped_value = cap.map_or(value, |c| value.min(c));
        let trivial_fallback = ok && cap.is_some_and(|c| value > c);
        Self { kind, value, capped_value, cap, params, conditions, trivial_fallback, refined: None }
    }

    fn with_refinement(mut self, ln_value: impl Fn(f64) -> f64, recipe: Option<f64>) -> Self {
        if self.all_satisfied() && self.value.is_finite() {
            self.refined = Some(refine(ln_value, recipe));
        }
        self
    }

    pub fn all_satisfied(&self) -> bool {
        self.conditions.iter().all(|c| c.satisfied)
    }

    pub fn failed_conditions(&self) -> Vec<&Condition> {
        self.conditions.iter().filter(|c| !c.satisfied).collect()
    }

    /// Errors with `condition-violated` when any precondition fails.
    pub fn require(self) -> Result<Self> {
        if self.all_satisfied() {
            Ok(self)
        } else {
            let names: Vec<String> =
                self.failed_conditions().iter().map(|c| format!("{} ({})", c.name, c.requirement)).collect();
            Err(Error::ConditionViolated(format!("{}: {}", self.kind.name(), names.join(", "))))
        }
    }
}

/// Minimizes `exp(ln_value(p))` over a log grid on `[2, 10⁶]` plus the recipe point.
pub fn refine(ln_value: impl Fn(f64) -> f64, recipe: Option<f64>) -> Refinement {
    let ratio = (REFINE_P_MAX / REFINE_P_MIN).ln();
    let grid = (0..REFINE_POINTS)
        .map(|k| REFINE_P_MIN * (ratio * k as f64 / (REFINE_POINTS - 1) as f64).exp())
        .chain(recipe.filter(|p| *p >= REFINE_P_MIN && p.is_finite()));
    let mut best = Refinement { p: REFINE_P_MIN, value: f64::INFINITY };
    for p in grid {
        let value = ln_value(p).exp();
        if value < best.value {
            best = Refinement { p, value };
        }
    }
    best
}

/// `ln(e^a − 1)` for `a ≥ 0`, accurate for small and large `a`.
pub fn ln_expm1(a: f64) -> f64 {
    if a > 30.0 {
        a + (-(-a).exp()).ln_1p()
    } else {
        a.exp_m1().ln()
    }
}

fn d_vee_e(dim: usize) -> f64 {
    (dim as f64).max(E)
}

fn identity_condition(s: &ProductStats) -> Condition {
    Condition::new("initial-identity", "Z_0 = I", s.z0.is_identity())
}

fn q2_params(p: f64) -> SchattenParams {
    SchattenParams::new(p, Some(2.0))
}

/// The variance proxy valid at order `q` together with its condition.
fn v_at_order(s: &ProductStats, q: f64) -> (f64, Condition) {
    if q <= s.order {
        (s.v, Condition::new("deviation-order", format!("q <= {}", s.order), true))
    } else if let Some(v) = s.v_as {
        (v, Condition::new("deviation-order", "almost-sure deviation bounds", true))
    } else {
        (s.v, Condition::new("deviation-order", format!("q <= {}", s.order), false))
    }
}

fn v_as_condition(s: &ProductStats) -> (f64, Condition) {
    match s.v_as {
        Some(v) => (v, Condition::new("almost-sure-deviations", "‖Y_i − EY_i‖ <= σ_i m_i a.s.", true)),
        None => (f64::INFINITY, Condition::new("almost-sure-deviations", "‖Y_i − EY_i‖ <= σ_i m_i a.s.", false)),
    }
}

fn growth_cap(s: &ProductStats, ln_z0: f64) -> Option<f64> {
    s.log_b.map(|lb| (lb + ln_z0).exp())
}

fn moment_pair(
    s: &ProductStats,
    p: f64,
    q: f64,
    v: f64,
    mut conditions: Vec<Condition>,
    kinds: (BoundKind, BoundKind),
) -> Result<(BoundResult, BoundResult)> {
    let params = SchattenParams::joint(p, q)?;
    let cp = smoothness_constant(p);
    let ln_z0 = s.z0.ln_schatten(p)?;
    conditions.sort_by(|a, b| a.name.cmp(&b.name));
    let growth = BoundResult::assemble(kinds.0, params, conditions.clone(), growth_cap(s, ln_z0), || {
        (cp * v / 2.0 + ln_z0 + s.log_m).exp()
    });
    let conc = BoundResult::assemble(kinds.1, params, conditions, growth_cap(s, ln_z0).map(|c| 2.0 * c), || {
        (0.5 * ln_expm1(cp * v) + ln_z0 + s.log_m).exp()
    });
    Ok((growth, conc))
}

/// `⫴Z_n⫴_{p,q} ≤ e^{(p−1)v/2} ‖Z_0‖_p M`.
pub fn growth_moment_bound(s: &ProductStats, p: f64, q: f64) -> Result<BoundResult> {
    let (v, cond) = v_at_order(s, q);
    moment_pair(s, p, q, v, vec![cond], (BoundKind::GrowthMoment, BoundKind::ConcentrationMoment)).map(|x| x.0)
}

/// `⫴Z_n − EZ_n⫴_{p,q} ≤ (e^{(p−1)v} − 1)^{1/2} ‖Z_0‖_p M`.
pub fn concentration_moment_bound(s: &ProductStats, p: f64, q: f64) -> Result<BoundResult> {
    let (v, cond) = v_at_order(s, q);
    moment_pair(s, p, q, v, vec![cond], (BoundKind::GrowthMoment, BoundKind::ConcentrationMoment)).map(|x| x.1)
}

/// Moment bounds for almost surely bounded factors:
/// `(‖Z_0‖_p B, sqrt((p−1)v) ‖Z_0‖_p B)`.
pub fn uniform_moment_bounds(s: &ProductStats, p: f64, q: f64) -> Result<(BoundResult, BoundResult)> {
    let params = SchattenParams::joint(p, q)?;
    let log_b = s.log_b.ok_or(Error::MissingUniformBounds)?;
    let (_, cond) = v_at_order(s, q);
    let v = s.v_uniform.unwrap_or(s.v);
    let ln_z0 = s.z0.ln_schatten(p)?;
    let cp = smoothness_constant(p);
    let cap = (log_b + ln_z0).exp();
    let growth = BoundResult::assemble(BoundKind::UniformGrowthMoment, params, vec![cond.clone()], Some(cap), || cap);
    let conc =
        BoundResult::assemble(BoundKind::UniformConcentrationMoment, params, vec![cond], Some(2.0 * cap), || {
            (cp * v).sqrt() * cap
        });
    Ok((growth, conc))
}

/// Minimum of the direct growth bound and the two bounds obtained from the
/// concentration bound and `‖E Z_n‖_p`.
pub fn growth_from_concentration(s: &ProductStats, p: f64, q: f64, expected_norm_p: f64) -> Result<BoundResult> {
    if !(expected_norm_p >= 0.0) || !expected_norm_p.is_finite() {
        return Err(Error::InvalidInput(format!("‖E Z_n‖_p must be finite and nonnegative, got {expected_norm_p}")));
    }
    let (v, cond) = v_at_order(s, q);
    let params = SchattenParams::joint(p, q)?;
    let cp = smoothness_constant(p);
    let ln_z0 = s.z0.ln_schatten(p)?;
    let scale = (ln_z0 + s.log_m).exp();
    let em1 = cp * v;
    let direct = (em1 / 2.0 + ln_z0 + s.log_m).exp();
    let conc = (0.5 * ln_expm1(em1) + ln_z0 + s.log_m).exp();
    let triangle = expected_norm_p + conc;
    let quadratic = (expected_norm_p.powi(2) + cp * em1.exp_m1() * scale * scale).sqrt();
    Ok(BoundResult::assemble(BoundKind::GrowthFromConcentration, params, vec![cond], growth_cap(s, ln_z0), || {
        direct.min(triangle).min(quadratic)
    }))
}

/// `E‖Z_n‖ ≤ exp(sqrt(2v(2v ∨ ln d))) M` with `p = sqrt(2(2v ∨ ln d)/v)`.
pub fn expectation_growth_bound(s: &ProductStats) -> Result<BoundResult> {
    expectation_growth_like(s, BoundKind::ExpectationGrowth)
}

/// Same closed form applied to statistics of `S⁻¹ Y_i S`; bounds `E ϱ(Z_n)`.
pub fn spectral_radius_expectation_bound(conjugated: &ProductStats) -> Result<BoundResult> {
    expectation_growth_like(conjugated, BoundKind::SpectralRadiusExpectation)
}

fn expectation_growth_like(s: &ProductStats, kind: BoundKind) -> Result<BoundResult> {
    let v = s.v;
    let ln_d = (s.dim as f64).ln();
    let recipe = (v > 0.0).then(|| (2.0 * (2.0 * v).max(ln_d) / v).sqrt());
    let params = SchattenParams { p: recipe, q: Some(2.0), cp: recipe.map(smoothness_constant) };
    let cap = if kind == BoundKind::ExpectationGrowth { s.b() } else { None };
    let result = BoundResult::assemble(kind, params, vec![identity_condition(s)], cap, || {
        if v == 0.0 {
            s.m()
        } else {
            ((2.0 * v * (2.0 * v).max(ln_d)).sqrt() + s.log_m).exp()
        }
    });
    Ok(result.with_refinement(|p| (p - 1.0) * v / 2.0 + ln_d / p + s.log_m, recipe))
}

/// `E‖Z_n − EZ_n‖ ≤ sqrt(e² v (1 + 2 ln d)) M` when `v(1 + 2 ln d) ≤ 1`, or
/// with uniform bounds `sqrt(e v (1 + 2 ln d)) B` unconditionally.
pub fn expectation_concentration_bound(s: &ProductStats, uniform: bool) -> Result<BoundResult> {
    let ln_d = (s.dim as f64).ln();
    let p = 2.0 * (1.0 + ln_d);
    let spread = 1.0 + 2.0 * ln_d;
    if uniform {
        let log_b = s.log_b.ok_or(Error::MissingUniformBounds)?;
        let v = s.v_uniform.unwrap_or(s.v);
        let b = log_b.exp();
        return Ok(BoundResult::assemble(
            BoundKind::ExpectationConcentrationUniform,
            q2_params(p),
            vec![identity_condition(s)],
            Some(2.0 * b),
            || (E * v * spread).sqrt() * b,
        ));
    }
    let v = s.v;
    let conditions =
        vec![identity_condition(s), Condition::new("small-variance", "v (1 + 2 ln d) <= 1", v * spread <= 1.0)];
    let result = BoundResult::assemble(
        BoundKind::ExpectationConcentration,
        q2_params(p),
        conditions,
        s.b().map(|b| 2.0 * b),
        || (E * E * v * spread).sqrt() * s.m(),
    );
    Ok(result.with_refinement(|p| 0.5 * ln_expm1((p - 1.0) * v) + ln_d / p + s.log_m, Some(p)))
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidParameter(format!("threshold must be positive and finite, got {t}")));
    }
    Ok(())
}

/// `P{‖Z_n‖ ≥ tM} ≤ d exp(−ln²t / (2v))` when `ln t ≥ 2v`, with `p = ln t / v`.
pub fn tail_growth_bound(s: &ProductStats, t: f64) -> Result<BoundResult> {
    check_threshold(t)?;
    let (v, as_cond) = v_as_condition(s);
    let lt = t.ln();
    let d = s.dim as f64;
    let recipe = (v > 0.0 && v.is_finite()).then(|| lt / v);
    let params = SchattenParams { p: recipe, q: recipe, cp: recipe.map(smoothness_constant) };
    let conditions = vec![
        as_cond,
        identity_condition(s),
        Condition::new("large-threshold", "ln t >= 2v", v.is_finite() && lt >= 2.0 * v),
    ];
    let result = BoundResult::assemble(BoundKind::TailGrowth, params, conditions, None, || {
        if lt == 0.0 {
            d
        } else {
            d * (-(lt * lt) / (2.0 * v)).exp()
        }
    });
    Ok(result.with_refinement(|p| d.ln() + 0.5 * p * (-2.0 * lt + (p - 1.0) * v), recipe))
}

/// `P{‖Z_n − EZ_n‖ ≥ tM} ≤ (d ∨ e) exp(−t² / (2e²v))` when `t ≤ e`; the
/// uniform variant bounds `P{‖Z_n − EZ_n‖ ≥ tB} ≤ (d ∨ e) exp(−t² / (2ev))`
/// for every `t > 0`.
pub fn tail_concentration_bound(s: &ProductStats, t: f64, uniform: bool) -> Result<BoundResult> {
    check_threshold(t)?;
    let prefactor = d_vee_e(s.dim);
    if uniform {
        if s.log_b.is_none() {
            return Err(Error::MissingUniformBounds);
        }
        let v = s.v_uniform.unwrap_or(s.v);
        let conditions = vec![identity_condition(s)];
        return Ok(BoundResult::assemble(
            BoundKind::TailConcentrationUniform,
            q2_params(2.0 * (1.0 + (s.dim as f64).ln())),
            conditions,
            None,
            || prefactor * (-(t * t) / (2.0 * E * v)).exp(),
        ));
    }
    let (v, as_cond) = v_as_condition(s);
    let recipe = (v > 0.0 && v.is_finite()).then(|| t * t / (E * E * v));
    let params = SchattenParams { p: recipe, q: recipe, cp: recipe.map(smoothness_constant) };
    let conditions = vec![as_cond, identity_condition(s), Condition::new("small-threshold", "t <= e", t <= E)];
    let d = s.dim as f64;
    let result = BoundResult::assemble(BoundKind::TailConcentration, params, conditions, None, || {
        prefactor * (-(t * t) / (2.0 * E * E * v)).exp()
    });
    Ok(result.with_refinement(|p| d.ln() + 0.5 * p * (ln_expm1((p - 1.0) * v) - 2.0 * t.ln()), recipe))
}

/// Query for the perturbation-of-identity bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "kebab-case")]
pub enum PerturbationQuery {
    ExpGrowth,
    ExpConc,
    TailGrowth { t: f64 },
    TailConc { t: f64 },
}

/// Bounds for `Z_n = (I + X_n) ⋯ (I + X_1)` with `‖E X_i‖ ≤ ξ_i` and
/// `‖X_i − EX_i‖ ≤ σ_i` almost surely; `ξ = Σ ξ_i`, `v = Σ σ_i²`.
/// Tail thresholds are `t e^ξ`.
pub fn perturbation_bounds(xi: f64, v: f64, dim: usize, query: PerturbationQuery) -> Result<BoundResult> {
    perturbation_like(xi, v, dim, query, false)
}

fn perturbation_like(xi: f64, v: f64, dim: usize, query: PerturbationQuery, inverse: bool) -> Result<BoundResult> {
    if !(xi >= 0.0) || !(v >= 0.0) || !xi.is_finite() || !v.is_finite() {
        return Err(Error::InvalidParameter(format!("need finite ξ >= 0 and v >= 0, got ξ = {xi}, v = {v}")));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let ln_d = (dim as f64).ln();
    let d = dim as f64;
    let r = match query {
        PerturbationQuery::ExpGrowth => {
            let kind =
                if inverse { BoundKind::InverseExpectationGrowth } else { BoundKind::PerturbationExpectationGrowth };
            let recipe = (v > 0.0).then(|| (2.0 * ln_d / v).sqrt());
            BoundResult::assemble(
                kind,
                SchattenParams { p: recipe, q: Some(2.0), cp: recipe.map(smoothness_constant) },
                vec![Condition::new("small-variance", "2v <= ln d", 2.0 * v <= ln_d)],
                None,
                || (xi + (2.0 * v * ln_d).sqrt()).exp(),
            )
        }
        PerturbationQuery::ExpConc => {
            let kind = if inverse {
                BoundKind::InverseExpectationConcentration
            } else {
                BoundKind::PerturbationExpectationConcentration
            };
            let spread = 1.0 + 2.0 * ln_d;
            BoundResult::assemble(
                kind,
                q2_params(2.0 * (1.0 + ln_d)),
                vec![Condition::new("small-variance", "v (1 + 2 ln d) <= 1", v * spread <= 1.0)],
                None,
                || (xi + 1.0).exp() * (v * spread).sqrt(),
            )
        }
        PerturbationQuery::TailGrowth { t } => {
            check_threshold(t)?;
            let lt = t.ln();
            let recipe = (v > 0.0).then(|| lt / v).filter(|p| *p >= 1.0);
            BoundResult::assemble(
                BoundKind::PerturbationTailGrowth,
                SchattenParams { p: recipe, q: recipe, cp: recipe.map(smoothness_constant) },
                vec![Condition::new("large-threshold", "ln t >= 2v", lt >= 2.0 * v)],
                None,
                || if lt == 0.0 { d } else { d * (-(lt * lt) / (2.0 * v)).exp() },
            )
        }
        PerturbationQuery::TailConc { t } => {
            check_threshold(t)?;
            let recipe = (v > 0.0).then(|| t * t / (E * E * v)).filter(|p| *p >= 1.0);
            BoundResult::assemble(
                BoundKind::PerturbationTailConcentration,
                SchattenParams { p: recipe, q: recipe, cp: recipe.map(smoothness_constant) },
                vec![Condition::new("small-threshold", "t <= e", t <= E)],
                None,
                || d_vee_e(dim) * (-(t * t) / (2.0 * E * E * v)).exp(),
            )
        }
    };
    Ok(r)
}

/// Statistics `(ξ̄, v̄)` of the perturbations `(I + X_i)^{-1} = I + X̄_i`.
pub fn inverse_perturbation_stats(xi: &[f64], sigma: &[f64]) -> Result<(f64, f64)> {
    if xi.len() != sigma.len() {
        return Err(Error::InvalidInput(format!("{} values of ξ but {} values of σ", xi.len(), sigma.len())));
    }
    let mut xi_bar = 0.0;
    let mut v_bar = 0.0;
    for (i, (&x, &s)) in xi.iter().zip(sigma).enumerate() {
        if !(x >= 0.0) || !(s >= 0.0) {
            return Err(Error::InvalidParameter(format!("factor {}: ξ and σ must be nonnegative", i + 1)));
        }
        let r = x + s;
        if !(r < 1.0) {
            return Err(Error::ConditionViolated(format!("factor {}: ξ + σ = {r} must be below 1", i + 1)));
        }
        let penalty = r * r / (1.0 - r);
        xi_bar += x + penalty;
        v_bar += (s + 2.0 * penalty).powi(2);
    }
    Ok((xi_bar, v_bar))
}

/// Expectation bounds for `‖Z_n^{-1}‖` and `‖Z_n^{-1} − EZ_n^{-1}‖`.
pub fn inverse_bounds(xi: &[f64], sigma: &[f64], dim: usize) -> Result<(BoundResult, BoundResult)> {
    let (xi_bar, v_bar) = inverse_perturbation_stats(xi, sigma)?;
    Ok((
        perturbation_like(xi_bar, v_bar, dim, PerturbationQuery::ExpGrowth, true)?,
        perturbation_like(xi_bar, v_bar, dim, PerturbationQuery::ExpConc, true)?,
    ))
}

/// Bounds for products of random contractions: `E‖Z_n‖ ≤ 1 ∧ √d M`,
/// `E‖Z_n − EZ_n‖ ≤ sqrt(dv) M`, and, when `t` is given,
/// `P{‖Z_n − EZ_n‖ ≥ t} ≤ d M² e^{−t²/(2ev)}` for `t² ≥ 2ev`.
pub fn contraction_bounds(s: &ProductStats, t: Option<f64>) -> Result<Vec<BoundResult>> {
    let c = s
        .contraction
        .ok_or_else(|| Error::UnsupportedEnsemble("contraction bounds need contraction statistics".into()))?;
    let d = s.dim as f64;
    let m = c.log_m.exp();
    let base = vec![identity_condition(s)];
    let mut out = vec![
        BoundResult::assemble(BoundKind::ContractionGrowth, SchattenParams::default(), base.clone(), Some(1.0), || {
            1.0f64.min(d.sqrt() * m)
        }),
        BoundResult::assemble(
            BoundKind::ContractionConcentration,
            SchattenParams::default(),
            base.clone(),
            Some(2.0),
            || (d * c.v).sqrt() * m,
        ),
    ];
    if let Some(t) = t {
        check_threshold(t)?;
        let mut conds = base;
        conds.push(Condition::new("large-threshold", "t^2 >= 2ev", t * t >= 2.0 * E * c.v));
        out.push(BoundResult::assemble(BoundKind::ContractionTail, SchattenParams::default(), conds, None, || {
            d * m * m * (-(t * t) / (2.0 * E * c.v)).exp()
        }));
    }
    Ok(out)
}

/// Low-rank moment bounds at `q = 2` using the projected deviation statistics.
pub fn lowrank_moment_bounds(s: &ProductStats, p: f64) -> Result<(BoundResult, BoundResult)> {
    let proj =
        s.projected.ok_or_else(|| Error::InvalidInput("low-rank bounds need projected deviation statistics".into()))?;
    if proj.rank != s.z0.cols() {
        return Err(Error::InvalidInput(format!(
            "projected statistics are for rank {}, but Z_0 has {} columns",
            proj.rank,
            s.z0.cols()
        )));
    }
    let certified = !matches!(proj.quality, StatQuality::LowerEstimate | StatQuality::Estimate);
    let cond =
        Condition::new("certified-projected-stat", "projected deviation statistic is analytic or exact", certified);
    moment_pair(s, p, 2.0, proj.v, vec![cond], (BoundKind::LowRankGrowth, BoundKind::LowRankConcentration))
}

/// Moment bounds for adapted products, measured against the running product
/// of conditional means. Requires almost-sure conditional deviation bounds.
pub fn adapted_moment_bounds(s: &ProductStats, p: f64, q: f64) -> Result<(BoundResult, BoundResult)> {
    let (v, cond) = v_as_condition(s);
    moment_pair(s, p, q, v, vec![cond], (BoundKind::AdaptedGrowthMoment, BoundKind::AdaptedConcentrationMoment))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "kebab-case")]
pub enum ScalarQuery {
    /// `P{Z_n ≥ (1 + s) e^μ}`
    Growth { s: f64 },
    /// `P{Z_n − EZ_n ≥ t e^μ}`
    Concentration { t: f64 },
}

/// Hoeffding-based bounds for the scalar product `Π (1 + X_i / n)` with
/// `E X_i = μ` and `|X_i − μ| ≤ b`.
pub fn scalar_reference_bounds(mu: f64, b: f64, n: usize, query: ScalarQuery) -> Result<BoundResult> {
    if !(b > 0.0) || n == 0 || !mu.is_finite() {
        return Err(Error::InvalidParameter(format!("need b > 0, n >= 1, finite μ; got b = {b}, n = {n}, μ = {mu}")));
    }
    let nf = n as f64;
    Ok(match query {
        ScalarQuery::Growth { s } => BoundResult::assemble(
            BoundKind::ScalarGrowthTail,
            SchattenParams::default(),
            vec![Condition::new("positive-excess", "s > 0", s > 0.0)],
            None,
            || (-nf * (1.0 + s).ln().powi(2) / (2.0 * b * b)).exp(),
        ),
        ScalarQuery::Concentration { t } => BoundResult::assemble(
            BoundKind::ScalarConcentrationTail,
            SchattenParams::default(),
            vec![
                Condition::new("positive-threshold", "t > 0", t > 0.0),
                Condition::new("small-threshold", "t <= e", t <= E),
            ],
            None,
            || (-nf * t * t / (2.0 * E * E * b * b)).exp(),
        ),
    })
}

/// Perturbations with `‖E X_i‖ ≤ T/n` and `‖X_i − EX_i‖ ≤ L/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangularArray {
    #[serde(rename = "T")]
    pub t_mean: f64,
    #[serde(rename = "L")]
    pub l_dev: f64,
    pub n: usize,
    pub d: usize,
    pub delta: f64,
    /// `‖X_i‖ ≤ T/n` almost surely, which removes the sample-size conditions.
    #[serde(default)]
    pub uniform: bool,
}

/// Expectation and high-probability deviation bounds for [`TriangularArray`].
pub fn triangular_array_bounds(sc: &TriangularArray) -> Result<(BoundResult, BoundResult)> {
    let TriangularArray { t_mean, l_dev, n, d, delta, uniform } = *sc;
    if !(t_mean >= 0.0) || !(l_dev > 0.0) || n == 0 || d == 0 || !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParameter(format!("need T >= 0, L > 0, n >= 1, d >= 1, δ in (0, 1]; got {sc:?}")));
    }
    let nf = n as f64;
    let ln_d = (d as f64).ln();
    let scale = l_dev * (1.0 + t_mean).exp();
    let a1 = 1.0 + 2.0 * ln_d;
    let a2 = 2.0 + 2.0 * (d as f64 / delta).ln();
    let cond = |name: &str, req: &str, ok: bool| {
        if uniform {
            Condition::new(name, "uniform bound ‖X_i‖ <= T/n", true)
        } else {
            Condition::new(name, req, ok)
        }
    };
    let hw1 = BoundResult::assemble(
        BoundKind::TriangularExpectationConcentration,
        q2_params(2.0 * (1.0 + ln_d)),
        vec![cond("sample-size", "L^2 (1 + 2 ln d) <= n", l_dev * l_dev * a1 <= nf)],
        None,
        || (a1 / nf).sqrt() * scale,
    );
    let hw2 = BoundResult::assemble(
        BoundKind::TriangularHighProbabilityConcentration,
        SchattenParams::default(),
        vec![cond("sample-size", "L^2 (2 + 2 ln(d/δ)) <= n", l_dev * l_dev * a2 <= nf)],
        None,
        || (a2 / nf).sqrt() * scale,
    );
    Ok((hw1, hw2))
}

/// Growth and concentration tails for perturbations of the identity:
/// `P{‖Z_n‖ ≥ (1+s)e^μ}` and `P{‖Z_n − EZ_n‖ ≥ t e^μ}` for
/// `Z_n = Π (I + X_i/n)` with `E X_i = A`, `‖A‖ = μ`, `‖X_i − A‖ ≤ b`.
pub fn identity_perturbation_bounds(
    dim: usize,
    n: usize,
    b: f64,
    mu: f64,
    s: f64,
    t: f64,
) -> Result<(BoundResult, BoundResult)> {
    if n == 0 || !(b > 0.0) || !(mu >= 0.0) {
        return Err(Error::InvalidParameter(format!("need n >= 1, b > 0, μ >= 0; got n = {n}, b = {b}, μ = {mu}")));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("s must be positive, got {s}")));
    }
    let v = b * b / n as f64;
    Ok((
        perturbation_bounds(mu, v, dim, PerturbationQuery::TailGrowth { t: 1.0 + s })?,
        perturbation_bounds(mu, v, dim, PerturbationQuery::TailConc { t })?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stats(dim: usize, m: f64, v: f64) -> ProductStats {
        ProductStats {
            n: 1,
            dim,
            z0: InitialMatrix::Identity(dim),
            log_m: m.ln(),
            v,
            order: 2.0,
            v_as: Some(v),
            log_b: None,
            v_uniform: None,
            xi: None,
            perturbation_v: None,
            contraction: None,
            projected: None,
            factors: vec![],
        }
    }

    #[test]
    fn moment_bounds_closed_forms() {
        let s = stats(1, 1.0, 1.0);
        let g = growth_moment_bound(&s, 2.0, 2.0).unwrap();
        assert_relative_eq!(g.value, 0.5f64.exp(), max_relative = 1e-15);
        assert_eq!(g.params.cp, Some(1.0));
        let s = stats(1, 1.0, 0.02);
        let c = concentration_moment_bound(&s, 2.0, 2.0).unwrap();
        assert_relative_eq!(c.value, 0.02f64.exp_m1().sqrt(), max_relative = 1e-15);
        let s = stats(5, 2.0, 0.0);
        let g = growth_moment_bound(&s, 3.0, 2.0).unwrap();
        assert_relative_eq!(g.value, 5f64.powf(1.0 / 3.0) * 2.0, max_relative = 1e-14);
        assert_eq!(concentration_moment_bound(&s, 3.0, 2.0).unwrap().value, 0.0);
        assert!(matches!(growth_moment_bound(&s, 2.0, 3.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(growth_moment_bound(&s, 3.0, 1.5), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn uniform_bounds() {
        let mut s = stats(1, 1.0, 0.5);
        assert!(matches!(uniform_moment_bounds(&s, 3.0, 2.0), Err(Error::MissingUniformBounds)));
        s.log_b = Some(2f64.ln());
        s.v_uniform = Some(0.5);
        let (g, c) = uniform_moment_bounds(&s, 3.0, 2.0).unwrap();
        // ‖I_1‖_3 = 1
        assert_relative_eq!(g.value, 2.0, max_relative = 1e-15);
        assert_relative_eq!(c.value, 2.0, max_relative = 1e-15);
    }

    #[test]
    fn growth_from_concentration_scalar_case() {
        let s = stats(1, 1.0, 0.02);
        let r = growth_from_concentration(&s, 2.0, 2.0, 1.0).unwrap();
        assert_relative_eq!(r.value, 0.01f64.exp(), max_relative = 1e-14);
        assert!(growth_from_concentration(&s, 2.0, 2.0, -1.0).is_err());
    }

    #[test]
    fn expectation_bounds() {
        let s = stats(10, 1.0, 0.01);
        let c = expectation_concentration_bound(&s, false).unwrap();
        assert_relative_eq!(c.value, E * (0.01 * (1.0 + 2.0 * 10f64.ln())).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(c.params.p.unwrap(), 2.0 * (1.0 + 10f64.ln()), max_relative = 1e-15);
        let refined = c.refined.unwrap();
        assert!(refined.value <= c.value);

        let bad = stats(10, 1.0, 1.5 / (1.0 + 2.0 * 10f64.ln()));
        let r = expectation_concentration_bound(&bad, false).unwrap();
        assert_eq!(r.value, f64::INFINITY);
        assert!(matches!(r.require(), Err(Error::ConditionViolated(_))));
        // crossover 2v = ln d
        let d = 7usize;
        let v = (d as f64).ln() / 2.0;
        let g = expectation_growth_bound(&stats(d, 1.0, v)).unwrap();
        assert_relative_eq!(g.value, (2.0 * v * (d as f64).ln()).sqrt().exp(), max_relative = 1e-14);
        let g = expectation_growth_bound(&stats(1, 1.0, 0.3)).unwrap();
        assert_relative_eq!(g.value, (0.6f64).exp(), max_relative = 1e-14);
        let g = expectation_growth_bound(&stats(4, 3.0, 0.0)).unwrap();
        assert_relative_eq!(g.value, 3.0, max_relative = 1e-15);
    }

    #[test]
    fn tail_bounds() {
        let v = 0.1;
        let s = stats(3, 1.0, v);
        let t = (2.0 * v).exp();
        let r = tail_growth_bound(&s, t).unwrap();
        assert_relative_eq!(r.value, 3.0 * (-2.0 * v).exp(), max_relative = 1e-12);
        assert_relative_eq!(r.params.p.unwrap(), 2.0, max_relative = 1e-12);
        assert!(!tail_growth_bound(&s, 1.1).unwrap().all_satisfied());

        let s = stats(2, 1.0, v);
        let r = tail_concentration_bound(&s, E, false).unwrap();
        assert_relative_eq!(r.value, E * (-1.0 / (2.0 * v)).exp(), max_relative = 1e-12);
        let r = tail_concentration_bound(&s, 2.0 * E, false).unwrap();
        assert!(r.value.is_infinite());
        let mut s = s;
        s.log_b = Some(0.0);
        let r = tail_concentration_bound(&s, 2.0 * E, true).unwrap();
        assert!(r.value.is_finite());
    }

    #[test]
    fn inverse_stats_hand_instance() {
        let (x, v) = inverse_perturbation_stats(&[0.1], &[0.1]).unwrap();
        assert_relative_eq!(x, 0.15, max_relative = 1e-14);
        assert_relative_eq!(v, 0.04, max_relative = 1e-14);
        assert_eq!(inverse_perturbation_stats(&[0.0; 3], &[0.0; 3]).unwrap(), (0.0, 0.0));
        assert!(matches!(inverse_perturbation_stats(&[0.5], &[0.5]), Err(Error::ConditionViolated(_))));
    }

    #[test]
    fn contraction_min_branch() {
        let mut s = stats(4, 1.0, 0.0);
        s.contraction = Some(ContractionStats { log_m: 0.25f64.ln(), v: 0.0 });
        let r = contraction_bounds(&s, None).unwrap();
        assert_relative_eq!(r[0].value, 0.5, max_relative = 1e-15);
        assert_eq!(r[1].value, 0.0);
        s.contraction = Some(ContractionStats { log_m: 0.0, v: 0.0 });
        assert_eq!(contraction_bounds(&s, None).unwrap()[0].value, 1.0);
        assert!(matches!(contraction_bounds(&stats(4, 1.0, 0.0), None), Err(Error::UnsupportedEnsemble(_))));
    }

    #[test]
    fn scalar_references() {
        let r = scalar_reference_bounds(0.0, 1.0, 100, ScalarQuery::Growth { s: E - 1.0 }).unwrap();
        assert_relative_eq!(r.value, (-50.0f64).exp(), max_relative = 1e-12);
        let r = scalar_reference_bounds(0.0, 1.0, 10, ScalarQuery::Concentration { t: E }).unwrap();
        assert_relative_eq!(r.value, (-5.0f64).exp(), max_relative = 1e-12);
        let r = scalar_reference_bounds(0.0, 1.0, 10, ScalarQuery::Concentration { t: 3.0 }).unwrap();
        assert!(!r.all_satisfied());
    }

    #[test]
    fn serialized_infinity_is_a_string() {
        let r = expectation_concentration_bound(&stats(10, 1.0, 1.0), false).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["value"], "inf");
        assert_eq!(json["kind"], "expectation-concentration");
        let back: BoundResult = serde_json::from_value(json).unwrap();
        assert!(back.value.is_infinite());
    }
}

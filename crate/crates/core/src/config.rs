//! JSON configuration schemas for product specs and runs. The field-level
//! reference lives in `docs/config.md`.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bounds::{
    ContractionStats, InitialMatrix, PerturbationQuery, ProductStats, ProjectedStats, ScalarQuery, TriangularArray,
};
use crate::ensembles::{projected_deviation_stat, EnsembleConfig, FactorEnsemble, FactorStats};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng;
use crate::simulate::{initial_matrix, HistoryFree, ProductMode, ProductSpec, SignFlipHook};

pub const SCHEMA_HINT: &str = "see docs/config.md for the configuration schema";
/// Random projectors tried when a projected statistic has no closed form.
pub const PROJECTED_TRIALS: usize = 200;

fn one() -> usize {
    1
}

fn two() -> f64 {
    2.0
}

/// `repeat` consecutive factors drawn from one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorGroup {
    #[serde(default = "one")]
    pub repeat: usize,
    pub ensemble: EnsembleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HookConfig {
    HistoryFree,
    /// `Y_i = I + h(s_i·bias ± noise)`, `s_i = +1` while `‖Z_{i−1}‖ ≤ threshold`.
    SignFlip {
        bias: DenseMatrix,
        noise: DenseMatrix,
        h: f64,
        threshold: f64,
        steps: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModeConfig {
    #[default]
    Independent,
    Adapted {
        hook: HookConfig,
    },
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedInitial {
    Identity,
}

/// `"identity"`, `{"random_unit_vector": seed}`, or a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Z0Config {
    Named(NamedInitial),
    RandomUnitVector { random_unit_vector: u64 },
    Matrix(DenseMatrix),
}

impl Z0Config {
    pub fn build(&self, dim: usize) -> Result<DenseMatrix> {
        match self {
            Z0Config::Named(NamedInitial::Identity) => Ok(DenseMatrix::identity(dim)),
            Z0Config::RandomUnitVector { random_unit_vector } => {
                DenseMatrix::column(&rng::unit_vector(&mut rng::stream(*random_unit_vector, 0), dim))
            }
            Z0Config::Matrix(m) if m.rows() == dim => Ok(m.clone()),
            Z0Config::Matrix(m) => {
                Err(Error::InvalidInput(format!("z0 has {} rows, expected {dim}; {SCHEMA_HINT}", m.rows())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    #[serde(default)]
    pub z0: Option<Z0Config>,
    #[serde(default)]
    pub factors: Vec<FactorGroup>,
    #[serde(default)]
    pub mode: ModeConfig,
}

impl SpecConfig {
    pub fn build(&self) -> Result<ProductSpec> {
        let mut factors: Vec<Arc<FactorEnsemble>> = Vec::new();
        for (g, group) in self.factors.iter().enumerate() {
            let e = Arc::new(FactorEnsemble::from_config(&group.ensemble).map_err(|e| match e {
                Error::InvalidInput(m) => Error::InvalidInput(format!("factor group {}: {m}", g + 1)),
                Error::InvalidParameter(m) => Error::InvalidParameter(format!("factor group {}: {m}", g + 1)),
                other => other,
            })?);
            factors.extend(std::iter::repeat_n(e, group.repeat));
        }
        let mode = match &self.mode {
            ModeConfig::Independent => ProductMode::Independent,
            ModeConfig::Inverse => ProductMode::Inverse,
            ModeConfig::Adapted { hook: HookConfig::HistoryFree } => ProductMode::Adapted(Arc::new(HistoryFree)),
            ModeConfig::Adapted { hook: HookConfig::SignFlip { bias, noise, h, threshold, steps } } => {
                if !factors.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "the sign-flip hook supplies its own factors; leave \"factors\" empty ({SCHEMA_HINT})"
                    )));
                }
                let hook = SignFlipHook::new(bias, noise, *h, *threshold)?;
                factors = vec![hook.base(); *steps];
                ProductMode::Adapted(Arc::new(hook))
            }
        };
        let dim = match (factors.first(), &self.z0) {
            (Some(f), _) => f.dim(),
            (None, Some(Z0Config::Matrix(m))) => m.rows(),
            _ => {
                return Err(Error::InvalidInput(format!("spec needs factors or an explicit z0 matrix; {SCHEMA_HINT}")))
            }
        };
        let z0 = self.z0.as_ref().map_or(Ok(DenseMatrix::identity(dim)), |z| z.build(dim))?;
        ProductSpec::new(factors, z0, mode)
    }
}

/// Projected deviation statistics of every factor at `rank`, computed once
/// per distinct ensemble.
pub fn projected_stats(spec: &ProductSpec, rank: usize, seed: u64) -> Result<Vec<crate::ensembles::ProjectedStat>> {
    let mut cache = HashMap::new();
    spec.factors()
        .iter()
        .map(|f| {
            let key = Arc::as_ptr(f);
            if let Some(s) = cache.get(&key) {
                return Ok(*s);
            }
            let s = projected_deviation_stat(f, rank, PROJECTED_TRIALS, seed)?;
            cache.insert(key, s);
            Ok(s)
        })
        .collect()
}

/// Where a bound takes its [`ProductStats`] from, discriminated by `"from"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StatsInput {
    /// Aggregates given directly; `m` is the product of means `M`, `b` the
    /// product of uniform bounds `B`.
    Aggregate {
        d: usize,
        m: f64,
        v: f64,
        #[serde(default)]
        z0: Option<Z0Config>,
        #[serde(default)]
        b: Option<f64>,
        #[serde(default)]
        v_as: Option<f64>,
        #[serde(default)]
        v_uniform: Option<f64>,
        #[serde(default)]
        xi: Option<f64>,
        #[serde(default)]
        contraction: Option<ContractionStats>,
        #[serde(default)]
        projected: Option<ProjectedStats>,
    },
    /// Per-factor statistics.
    Factors {
        d: usize,
        factors: Vec<FactorStats>,
        #[serde(default)]
        z0: Option<Z0Config>,
        #[serde(default = "two")]
        q: f64,
    },
    /// Statistics of the ensembles of a product spec.
    Spec {
        spec: SpecConfig,
        #[serde(default = "two")]
        q: f64,
    },
}

impl StatsInput {
    pub fn build(&self, seed: u64) -> Result<ProductStats> {
        match self {
            StatsInput::Aggregate { d, m, v, z0, b, v_as, v_uniform, xi, contraction, projected } => {
                if *d == 0 || !(*m > 0.0) || !(*v >= 0.0) || b.is_some_and(|b| !(b > 0.0)) {
                    return Err(Error::InvalidParameter(format!(
                        "need d >= 1, M > 0, v >= 0 and B > 0; {SCHEMA_HINT}"
                    )));
                }
                let z0 = match z0 {
                    None => InitialMatrix::Identity(*d),
                    Some(z) => initial_matrix(&z.build(*d)?),
                };
                Ok(ProductStats {
                    n: 0,
                    dim: *d,
                    z0,
                    log_m: m.ln(),
                    v: *v,
                    order: 2.0,
                    v_as: Some(v_as.unwrap_or(*v)),
                    log_b: b.map(f64::ln),
                    v_uniform: *v_uniform,
                    xi: *xi,
                    perturbation_v: xi.map(|_| *v),
                    contraction: *contraction,
                    projected: *projected,
                    factors: vec![],
                })
            }
            StatsInput::Factors { d, factors, z0, q } => {
                let z0 = match z0 {
                    None => InitialMatrix::Identity(*d),
                    Some(z) => initial_matrix(&z.build(*d)?),
                };
                ProductStats::from_factors(*d, z0, factors, *q)
            }
            StatsInput::Spec { spec, q } => {
                let spec = spec.build()?;
                let stats = spec.stats(*q)?;
                let rank = spec.z0().cols();
                if rank < spec.dim() && !spec.factors().is_empty() {
                    let projected = projected_stats(&spec, rank, seed)?;
                    stats.with_projected(&projected)
                } else {
                    Ok(stats)
                }
            }
        }
    }
}

/// One bound evaluation, discriminated by `"bound"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bound", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BoundRequest {
    GrowthMoment {
        stats: StatsInput,
        p: f64,
        q: f64,
    },
    ConcentrationMoment {
        stats: StatsInput,
        p: f64,
        q: f64,
    },
    UniformMoment {
        stats: StatsInput,
        p: f64,
        q: f64,
    },
    GrowthFromConcentration {
        stats: StatsInput,
        p: f64,
        q: f64,
        expected_norm_p: f64,
    },
    ExpectationGrowth {
        stats: StatsInput,
    },
    ExpectationConcentration {
        stats: StatsInput,
        #[serde(default)]
        uniform: bool,
    },
    TailGrowth {
        stats: StatsInput,
        t: f64,
    },
    TailConcentration {
        stats: StatsInput,
        t: f64,
        #[serde(default)]
        uniform: bool,
    },
    Perturbation {
        xi: f64,
        v: f64,
        d: usize,
        query: PerturbationQuery,
    },
    Inverse {
        xi: Vec<f64>,
        sigma: Vec<f64>,
        d: usize,
    },
    Contraction {
        stats: StatsInput,
        #[serde(default)]
        t: Option<f64>,
    },
    LowRank {
        stats: StatsInput,
        p: f64,
    },
    Adapted {
        stats: StatsInput,
        p: f64,
        q: f64,
    },
    SpectralRadius {
        spec: SpecConfig,
        #[serde(default)]
        similarity: Option<DenseMatrix>,
    },
    Scalar {
        mu: f64,
        b: f64,
        n: usize,
        query: ScalarQuery,
    },
    TriangularArray(TriangularArray),
    IdentityPerturbation {
        d: usize,
        n: usize,
        b: f64,
        mu: f64,
        s: f64,
        t: f64,
    },
}

impl BoundRequest {
    pub fn name(&self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.get("bound").and_then(|b| b.as_str().map(String::from)))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub bounds: Vec<BoundRequest>,
}

/// Schatten order: a number, or `"log-dim"` for `2(1 + ln d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderConfig {
    Value(f64),
    Named(NamedOrder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedOrder {
    LogDim,
}

impl Default for OrderConfig {
    fn default() -> Self {
        OrderConfig::Value(2.0)
    }
}

impl OrderConfig {
    pub fn resolve(self, dim: usize) -> f64 {
        match self {
            OrderConfig::Value(p) => p,
            OrderConfig::Named(NamedOrder::LogDim) => 2.0 * (1.0 + (dim as f64).ln()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub spec: SpecConfig,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub p: OrderConfig,
    #[serde(default = "two")]
    pub q: f64,
    /// Subset of `norm`, `moment`, `deviation`, `deviation-moment`,
    /// `spectral-radius`; empty means all.
    #[serde(default)]
    pub quantities: Vec<String>,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    /// Also emit per-trial norms.
    #[serde(default)]
    pub per_trial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareBound {
    GrowthMoment,
    ConcentrationMoment,
    UniformMoment,
    ExpectationGrowth,
    ExpectationConcentration,
    ExpectationConcentrationUniform,
    TailGrowth,
    TailConcentration,
    TailConcentrationUniform,
    Perturbation,
    Inverse,
    Contraction,
    LowRank,
    Adapted,
    SpectralRadius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub spec: SpecConfig,
    pub bounds: Vec<CompareBound>,
    #[serde(default)]
    pub p: OrderConfig,
    #[serde(default = "two")]
    pub q: f64,
    /// Monte Carlo trials; zero means exact enumeration only.
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Parameters `t` of the concentration tail bounds.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    /// Parameters `t` of the growth tail bounds.
    #[serde(default)]
    pub growth_thresholds: Vec<f64>,
    /// Similarity for the spectral-radius bound.
    #[serde(default)]
    pub similarity: Option<DenseMatrix>,
    /// Use exact enumeration when every factor has finite support.
    #[serde(default = "yes")]
    pub exact: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Parses JSON, mapping serde errors to `invalid-input` with a schema hint.
pub fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("{e}; {SCHEMA_HINT}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_config_round_trip_and_build() {
        let text = r#"{
            "z0": "identity",
            "factors": [{"repeat": 3, "ensemble": {"kind": "bounded-perturbation", "dim": 2, "radius": 1.0, "n_scale": 10.0}}]
        }"#;
        let cfg: SpecConfig = parse(text).unwrap();
        let spec = cfg.build().unwrap();
        assert_eq!(spec.n(), 3);
        assert!(Arc::ptr_eq(&spec.factors()[0], &spec.factors()[2]));
        let back: SpecConfig = parse(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected_with_hint() {
        let err = parse::<SpecConfig>(r#"{"factorz": []}"#).unwrap_err();
        assert_eq!(err.kind(), "invalid-input");
        assert!(err.to_string().contains("docs/config.md"));
    }

    #[test]
    fn order_config_forms() {
        let c: CompareConfig =
            parse(r#"{"spec": {"z0": {"rows":1,"cols":1,"data":[1.0]}}, "bounds": [], "p": "log-dim"}"#).unwrap();
        assert_eq!(c.p.resolve(100), 2.0 * (1.0 + 100f64.ln()));
        let v = Z0Config::RandomUnitVector { random_unit_vector: 5 }.build(4).unwrap();
        assert_eq!(v.shape(), (4, 1));
        assert!((v.frobenius_norm() - 1.0).abs() < 1e-12);
    }
}

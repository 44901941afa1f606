//! Random products `Z_n = Y_n ⋯ Y_1 Z_0`: Monte Carlo trials, exact means,
//! exhaustive enumeration over finite supports, and the triangular-array run.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bounds::{InitialMatrix, ProductStats};
use crate::ensembles::{Atom, FactorEnsemble, FactorStats, PerturbationSupport, Provenance, MAX_CONDITION};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng;
use crate::schatten::{condition_number, lp_norm_of, singular_values, spectral_norm, spectral_radius, SchattenOrder};
use crate::stats::{McEstimate, TailEstimate};

/// Largest number of outcomes [`enumerate_product`] will visit.
pub const ENUMERATION_BUDGET: u64 = 1 << 20;
const COMMUTE_TOL: f64 = 1e-12;

/// Conditional law of each factor of an adapted product.
pub trait AdaptedHook: Send + Sync {
    fn label(&self) -> &str;

    /// Law of `Y_{step+1}` given the running product `Z_step`.
    fn conditional(&self, step: usize, base: &Arc<FactorEnsemble>, z_prev: &DenseMatrix)
        -> Result<Arc<FactorEnsemble>>;

    /// Bounds `(m_i, σ_i)` valid for every history.
    fn step_stats(&self, step: usize, base: &Arc<FactorEnsemble>) -> FactorStats;
}

/// Adapted hook that ignores the history.
#[derive(Debug, Clone, Copy, Default)]
pub struct HistoryFree;

impl AdaptedHook for HistoryFree {
    fn label(&self) -> &str {
        "history-free"
    }

    fn conditional(&self, _: usize, base: &Arc<FactorEnsemble>, _: &DenseMatrix) -> Result<Arc<FactorEnsemble>> {
        Ok(Arc::clone(base))
    }

    fn step_stats(&self, _: usize, base: &Arc<FactorEnsemble>) -> FactorStats {
        base.stats().clone()
    }
}

/// `Y_i = I + h(s_i B ± D)` with equiprobable signs on `D`, where
/// `s_i = +1` while `‖Z_{i−1}‖ ≤ threshold` and `−1` afterwards.
pub struct SignFlipHook {
    plus: Arc<FactorEnsemble>,
    minus: Arc<FactorEnsemble>,
    threshold: f64,
    stats: FactorStats,
}

impl SignFlipHook {
    pub fn new(bias: &DenseMatrix, noise: &DenseMatrix, h: f64, threshold: f64) -> Result<Self> {
        let d = bias.rows();
        if !bias.is_square() || noise.shape() != bias.shape() {
            return Err(Error::InvalidInput("bias and noise must be square matrices of equal size".into()));
        }
        if !(h > 0.0) || !h.is_finite() || !threshold.is_finite() {
            return Err(Error::InvalidParameter(format!("need finite h > 0 and threshold; got {h}, {threshold}")));
        }
        let id = DenseMatrix::identity(d);
        let law = |s: f64| -> Result<FactorEnsemble> {
            let centre = id.add_scaled(bias, s * h)?;
            FactorEnsemble::from_support(vec![
                Atom { matrix: centre.add_scaled(noise, h)?, prob: 0.5 },
                Atom { matrix: centre.add_scaled(noise, -h)?, prob: 0.5 },
            ])
        };
        let plus = law(1.0)?;
        let minus = law(-1.0)?;
        let m = plus.stats().m.max(minus.stats().m);
        let dev = h * spectral_norm(noise) / m;
        let b = plus.stats().uniform_bound.unwrap_or(m).max(minus.stats().uniform_bound.unwrap_or(m));
        let stats = FactorStats {
            m,
            sigma: dev,
            order: 2.0,
            uniform_bound: Some(b),
            deviation_uniform: Some(dev),
            contraction_stat: None,
            xi: None,
            perturbation_sigma: None,
            provenance: Provenance::Analytic,
        };
        Ok(Self { plus: Arc::new(plus), minus: Arc::new(minus), threshold, stats })
    }

    /// Law used when the running product has norm at most the threshold.
    pub fn base(&self) -> Arc<FactorEnsemble> {
        Arc::clone(&self.plus)
    }
}

impl AdaptedHook for SignFlipHook {
    fn label(&self) -> &str {
        "sign-flip"
    }

    fn conditional(&self, _: usize, _: &Arc<FactorEnsemble>, z_prev: &DenseMatrix) -> Result<Arc<FactorEnsemble>> {
        Ok(if spectral_norm(z_prev) <= self.threshold { Arc::clone(&self.plus) } else { Arc::clone(&self.minus) })
    }

    fn step_stats(&self, _: usize, _: &Arc<FactorEnsemble>) -> FactorStats {
        self.stats.clone()
    }
}

#[derive(Clone)]
pub enum ProductMode {
    Independent,
    /// Factors drawn from conditional laws; deviations are measured against
    /// the running product of conditional means `F_n`.
    Adapted(Arc<dyn AdaptedHook>),
    /// Also forms `Z_n^{-1} = Y_1^{-1} ⋯ Y_n^{-1}`, which becomes the
    /// product under study.
    Inverse,
}

impl fmt::Debug for ProductMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProductMode::Independent => write!(f, "Independent"),
            ProductMode::Adapted(h) => write!(f, "Adapted({})", h.label()),
            ProductMode::Inverse => write!(f, "Inverse"),
        }
    }
}

impl ProductMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProductMode::Independent => "independent",
            ProductMode::Adapted(_) => "adapted",
            ProductMode::Inverse => "inverse",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProductSpec {
    factors: Vec<Arc<FactorEnsemble>>,
    z0: DenseMatrix,
    mode: ProductMode,
}

impl ProductSpec {
    pub fn new(factors: Vec<Arc<FactorEnsemble>>, z0: DenseMatrix, mode: ProductMode) -> Result<Self> {
        let d = z0.rows();
        if let Some((i, f)) = factors.iter().enumerate().find(|(_, f)| f.dim() != d) {
            return Err(Error::InvalidInput(format!(
                "factor {} has dimension {}, but Z_0 has {d} rows",
                i + 1,
                f.dim()
            )));
        }
        if let ProductMode::Inverse = mode {
            if z0 != DenseMatrix::identity(d) {
                return Err(Error::InvalidInput("inverse mode requires Z_0 = I".into()));
            }
            for (i, f) in factors.iter().enumerate() {
                let s = f.stats();
                match (s.xi, s.perturbation_sigma) {
                    (Some(x), Some(sig)) if x + sig < 1.0 => {}
                    (Some(x), Some(sig)) => {
                        return Err(Error::ConditionViolated(format!(
                            "factor {}: ξ + σ = {} must be below 1",
                            i + 1,
                            x + sig
                        )))
                    }
                    _ => {
                        return Err(Error::UnsupportedEnsemble(format!(
                            "factor {} has no perturbation statistics ξ, σ",
                            i + 1
                        )))
                    }
                }
            }
        }
        Ok(Self { factors, z0, mode })
    }

    pub fn independent(factors: Vec<Arc<FactorEnsemble>>, z0: DenseMatrix) -> Result<Self> {
        Self::new(factors, z0, ProductMode::Independent)
    }

    /// `n` copies of one ensemble.
    pub fn iid(factor: FactorEnsemble, n: usize, z0: DenseMatrix, mode: ProductMode) -> Result<Self> {
        let f = Arc::new(factor);
        Self::new(vec![f; n], z0, mode)
    }

    pub fn factors(&self) -> &[Arc<FactorEnsemble>] {
        &self.factors
    }

    pub fn z0(&self) -> &DenseMatrix {
        &self.z0
    }

    pub fn mode(&self) -> &ProductMode {
        &self.mode
    }

    pub fn n(&self) -> usize {
        self.factors.len()
    }

    pub fn dim(&self) -> usize {
        self.z0.rows()
    }

    pub fn initial(&self) -> InitialMatrix {
        initial_matrix(&self.z0)
    }

    /// Aggregate statistics at order `q`; adapted specs use the hook's
    /// history-uniform per-step bounds.
    pub fn stats(&self, q: f64) -> Result<ProductStats> {
        match &self.mode {
            ProductMode::Adapted(hook) => {
                let per: Vec<FactorStats> =
                    self.factors.iter().enumerate().map(|(i, f)| hook.step_stats(i, f)).collect();
                ProductStats::from_factors(self.dim(), self.initial(), &per, q)
            }
            _ => ProductStats::from_ensembles(self.initial(), &self.factors, q),
        }
    }
}

pub fn initial_matrix(z0: &DenseMatrix) -> InitialMatrix {
    if z0.is_square() && *z0 == DenseMatrix::identity(z0.rows()) {
        InitialMatrix::Identity(z0.rows())
    } else {
        InitialMatrix::Matrix(z0.clone())
    }
}

/// `E Z_n = (E Y_n) ⋯ (E Y_1) Z_0` for independent factors.
pub fn expected_product(spec: &ProductSpec) -> Result<DenseMatrix> {
    if let ProductMode::Adapted(_) = spec.mode {
        return Err(Error::Unsupported(
            "adapted products have a random conditional-mean product; use the per-trial reference".into(),
        ));
    }
    let mut z = spec.z0.clone();
    for (i, f) in spec.factors.iter().enumerate() {
        let mean = f
            .mean()
            .ok_or_else(|| Error::UnsupportedEnsemble(format!("factor {} ({}) has no exact mean", i + 1, f.label())))?;
        z = mean * &z;
    }
    Ok(z)
}

/// `E Z_n^{-1} = E(Y_1^{-1}) ⋯ E(Y_n^{-1})`, exact for finite supports.
pub fn expected_inverse(spec: &ProductSpec) -> Result<DenseMatrix> {
    let d = spec.dim();
    let mut cache: HashMap<*const FactorEnsemble, DenseMatrix> = HashMap::new();
    let mut w = DenseMatrix::identity(d);
    for (i, f) in spec.factors.iter().enumerate() {
        let key = Arc::as_ptr(f);
        if let std::collections::hash_map::Entry::Vacant(slot) = cache.entry(key) {
            let atoms = f.finite_support().ok_or_else(|| {
                Error::UnsupportedEnsemble(format!("factor {} ({}) needs a finite support", i + 1, f.label()))
            })?;
            let mut acc = DenseMatrix::zeros(d, d);
            for a in atoms {
                acc = acc.add_scaled(&a.matrix.inverse()?, a.prob)?;
            }
            slot.insert(acc);
        }
        w = &w * &cache[&key];
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    /// The product under study: `Z_n`, or `Z_n^{-1}` in inverse mode.
    pub value: DenseMatrix,
    /// `F_n` in adapted mode.
    pub conditional_mean: Option<DenseMatrix>,
    /// `Z_n` in inverse mode.
    pub forward: Option<DenseMatrix>,
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub mode: &'static str,
    pub trials: Vec<Trial>,
    pub requested: usize,
    /// Trials dropped because a factor was numerically singular.
    pub excluded: usize,
    pub seed: u64,
}

fn run_trial(spec: &ProductSpec, seed: u64, k: u64) -> Result<Option<Trial>> {
    let mut r = rng::stream(seed, k);
    let mut z = spec.z0.clone();
    match &spec.mode {
        ProductMode::Independent => {
            for f in &spec.factors {
                z = f.sample(&mut r).as_ref() * &z;
            }
            Ok(Some(Trial { value: z, conditional_mean: None, forward: None }))
        }
        ProductMode::Adapted(hook) => {
            let mut fm = spec.z0.clone();
            for (i, base) in spec.factors.iter().enumerate() {
                let law = hook.conditional(i, base, &z)?;
                let mean = law.mean().ok_or_else(|| {
                    Error::UnsupportedEnsemble(format!("conditional law at step {} has no mean", i + 1))
                })?;
                fm = mean * &fm;
                z = law.sample(&mut r).as_ref() * &z;
            }
            Ok(Some(Trial { value: z, conditional_mean: Some(fm), forward: None }))
        }
        ProductMode::Inverse => {
            let mut w = DenseMatrix::identity(spec.dim());
            for f in &spec.factors {
                let y = f.sample(&mut r);
                if !(condition_number(&y)? <= MAX_CONDITION) {
                    return Ok(None);
                }
                let y_inv = y.inverse()?;
                z = y.as_ref() * &z;
                w = &w * &y_inv;
            }
            Ok(Some(Trial { value: w, conditional_mean: None, forward: Some(z) }))
        }
    }
}

/// Draws `trials` independent products; trial `k` uses stream `k` of `seed`.
pub fn simulate_product(spec: &ProductSpec, trials: usize, seed: u64) -> Result<SimulationRun> {
    let results: Vec<Result<Option<Trial>>> =
        (0..trials as u64).into_par_iter().map(|k| run_trial(spec, seed, k)).collect();
    let mut kept = Vec::with_capacity(trials);
    let mut excluded = 0;
    for r in results {
        match r? {
            Some(t) => kept.push(t),
            None => excluded += 1,
        }
    }
    Ok(SimulationRun { mode: spec.mode.name(), trials: kept, requested: trials, excluded, seed })
}

/// Norms of one product and of its deviation from the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialNorms {
    pub norm: f64,
    pub norm_p: f64,
    pub deviation: Option<f64>,
    pub deviation_p: Option<f64>,
    pub radius: Option<f64>,
}

fn norms_of(m: &DenseMatrix, p: SchattenOrder) -> Result<(f64, f64)> {
    let s = singular_values(m)?;
    let top = s.first().copied().unwrap_or(0.0);
    Ok((top, lp_norm_of(&s, p)?))
}

pub fn trial_norms(trial: &Trial, p: f64, reference: Option<&DenseMatrix>) -> Result<TrialNorms> {
    let order = SchattenOrder::from(p).validate()?;
    let (norm, norm_p) = norms_of(&trial.value, order)?;
    let reference = trial.conditional_mean.as_ref().or(reference);
    let (deviation, deviation_p) = match reference {
        Some(r) => {
            let (a, b) = norms_of(&trial.value.try_sub(r)?, order)?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let radius = if trial.value.is_square() { Some(spectral_radius(&trial.value)?) } else { None };
    Ok(TrialNorms { norm, norm_p, deviation, deviation_p, radius })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub p: f64,
    pub q: f64,
    pub trials: usize,
    pub excluded: usize,
    /// `E‖Z_n‖`
    pub norm: McEstimate,
    /// `(E‖Z_n‖_p^q)^{1/q}`
    pub moment: McEstimate,
    /// `E‖Z_n − ref‖`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<McEstimate>,
    /// `(E‖Z_n − ref‖_p^q)^{1/q}`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation_moment: Option<McEstimate>,
    /// `E ϱ(Z_n)`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<McEstimate>,
    #[serde(skip)]
    pub per_trial: Vec<TrialNorms>,
}

impl NormReport {
    pub fn norms(&self) -> Vec<f64> {
        self.per_trial.iter().map(|t| t.norm).collect()
    }

    pub fn deviations(&self) -> Vec<f64> {
        self.per_trial.iter().filter_map(|t| t.deviation).collect()
    }

    /// Tail estimates of `‖Z_n‖` at the given thresholds.
    pub fn growth_tails(&self, thresholds: &[f64]) -> Vec<TailEstimate> {
        tail_estimates(&self.norms(), thresholds)
    }

    /// Tail estimates of `‖Z_n − ref‖` at the given thresholds.
    pub fn deviation_tails(&self, thresholds: &[f64]) -> Vec<TailEstimate> {
        tail_estimates(&self.deviations(), thresholds)
    }
}

/// Monte Carlo estimates of the norms the bounds control. Deviations use
/// `reference` (typically the exact `E Z_n`), or the per-trial `F_n` of an
/// adapted run; without either they are omitted.
pub fn estimate_norm_statistics(
    run: &SimulationRun,
    p: f64,
    q: f64,
    reference: Option<&DenseMatrix>,
) -> Result<NormReport> {
    if !(q >= 1.0) || !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("need p, q >= 1; got p = {p}, q = {q}")));
    }
    if run.trials.is_empty() {
        return Err(Error::NothingToCheck("simulation produced no trials".into()));
    }
    let per_trial: Vec<TrialNorms> =
        run.trials.par_iter().map(|t| trial_norms(t, p, reference)).collect::<Result<Vec<_>>>()?;
    let seed = run.seed;
    let col = |f: fn(&TrialNorms) -> Option<f64>| -> Option<Vec<f64>> { per_trial.iter().map(f).collect() };
    let norms = col(|t| Some(t.norm)).unwrap_or_default();
    let norms_p = col(|t| Some(t.norm_p)).unwrap_or_default();
    let devs = col(|t| t.deviation);
    let devs_p = col(|t| t.deviation_p);
    let radii = col(|t| t.radius);
    Ok(NormReport {
        p,
        q,
        trials: per_trial.len(),
        excluded: run.excluded,
        norm: McEstimate::of_mean("norm", &norms, seed),
        moment: McEstimate::of_moment("moment", &norms_p, q, seed),
        deviation: devs.as_deref().map(|v| McEstimate::of_mean("deviation", v, seed)),
        deviation_moment: devs_p.as_deref().map(|v| McEstimate::of_moment("deviation-moment", v, q, seed)),
        radius: radii.as_deref().map(|v| McEstimate::of_mean("spectral-radius", v, seed)),
        per_trial,
    })
}

/// Empirical `P{x ≥ t}` with Clopper–Pearson limits for each threshold.
pub fn tail_estimates(values: &[f64], thresholds: &[f64]) -> Vec<TailEstimate> {
    thresholds.iter().map(|&t| TailEstimate::new(t, values.iter().filter(|&&x| x >= t).count(), values.len())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactTail {
    pub threshold: f64,
    /// `P{‖Z_n‖ ≥ t}`
    pub growth: f64,
    /// `P{‖Z_n − ref‖ ≥ t}`
    pub deviation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnumerationMethod {
    /// Every factor combination visited.
    Full,
    /// Identical commuting factors; outcomes grouped by atom counts.
    Commuting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    pub method: EnumerationMethod,
    pub outcomes: u64,
    pub p: f64,
    pub q: f64,
    /// `E Z_n` (independent) or `E F_n` (adapted).
    pub expected: DenseMatrix,
    pub norm: f64,
    pub moment: f64,
    pub deviation: f64,
    pub deviation_moment: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    pub tails: Vec<ExactTail>,
}

struct Accumulator {
    p: SchattenOrder,
    q: f64,
    thresholds: Vec<f64>,
    square: bool,
    expected: DenseMatrix,
    outcomes: u64,
    norm: f64,
    moment: f64,
    deviation: f64,
    deviation_moment: f64,
    radius: f64,
    growth_tail: Vec<f64>,
    deviation_tail: Vec<f64>,
}

impl Accumulator {
    fn new(p: SchattenOrder, q: f64, thresholds: &[f64], shape: (usize, usize)) -> Self {
        Self {
            p,
            q,
            thresholds: thresholds.to_vec(),
            square: shape.0 == shape.1,
            expected: DenseMatrix::zeros(shape.0, shape.1),
            outcomes: 0,
            norm: 0.0,
            moment: 0.0,
            deviation: 0.0,
            deviation_moment: 0.0,
            radius: 0.0,
            growth_tail: vec![0.0; thresholds.len()],
            deviation_tail: vec![0.0; thresholds.len()],
        }
    }

    fn add(&mut self, z: &DenseMatrix, reference: &DenseMatrix, w: f64) -> Result<()> {
        self.outcomes += 1;
        let (n, np) = norms_of(z, self.p)?;
        let (dv, dvp) = norms_of(&z.try_sub(reference)?, self.p)?;
        self.expected = self.expected.add_scaled(z, w)?;
        self.norm += w * n;
        self.moment += w * np.powf(self.q);
        self.deviation += w * dv;
        self.deviation_moment += w * dvp.powf(self.q);
        if self.square {
            self.radius += w * spectral_radius(z)?;
        }
        for (k, &t) in self.thresholds.iter().enumerate() {
            if n >= t {
                self.growth_tail[k] += w;
            }
            if dv >= t {
                self.deviation_tail[k] += w;
            }
        }
        Ok(())
    }

    fn finish(self, method: EnumerationMethod, p: f64) -> ExactReport {
        let tails = self
            .thresholds
            .iter()
            .enumerate()
            .map(|(k, &t)| ExactTail { threshold: t, growth: self.growth_tail[k], deviation: self.deviation_tail[k] })
            .collect();
        ExactReport {
            method,
            outcomes: self.outcomes,
            p,
            q: self.q,
            expected: self.expected,
            norm: self.norm,
            moment: self.moment.powf(1.0 / self.q),
            deviation: self.deviation,
            deviation_moment: self.deviation_moment.powf(1.0 / self.q),
            radius: self.square.then_some(self.radius),
            tails,
        }
    }
}

fn support_of(f: &FactorEnsemble, step: usize) -> Result<&[Atom]> {
    f.finite_support()
        .ok_or_else(|| Error::UnsupportedEnsemble(format!("factor {} ({}) has no finite support", step + 1, f.label())))
}

/// Exact expectations by weighted enumeration of every factor combination.
/// Falls back to grouping outcomes by atom counts when all factors are the
/// same ensemble with pairwise commuting atoms.
pub fn enumerate_product(spec: &ProductSpec, p: f64, q: f64, thresholds: &[f64]) -> Result<ExactReport> {
    let order = SchattenOrder::from(p).validate()?;
    if !(q >= 1.0) {
        return Err(Error::InvalidParameter(format!("q must be at least 1, got {q}")));
    }
    if let ProductMode::Inverse = spec.mode {
        return Err(Error::Unsupported("enumeration of inverse products".into()));
    }
    let sizes: Vec<f64> = spec
        .factors
        .iter()
        .enumerate()
        .map(|(i, f)| support_of(f, i).map(|a| a.len() as f64))
        .collect::<Result<_>>()?;
    let required: f64 = sizes.iter().product();
    if let ProductMode::Independent = spec.mode {
        if required > ENUMERATION_BUDGET as f64 {
            return match commuting_enumeration(spec, order, q, thresholds, required)? {
                Some(r) => Ok(r.finish(EnumerationMethod::Commuting, p)),
                None => Err(Error::EnumerationInfeasible { required, budget: ENUMERATION_BUDGET }),
            };
        }
        let reference = expected_product(spec)?;
        let mut acc = Accumulator::new(order, q, thresholds, spec.z0.shape());
        independent_dfs(spec, 0, &spec.z0, 1.0, &reference, &mut acc)?;
        return Ok(acc.finish(EnumerationMethod::Full, p));
    }
    let ProductMode::Adapted(hook) = &spec.mode else { unreachable!() };
    let mut acc = Accumulator::new(order, q, thresholds, spec.z0.shape());
    let mut visited = 0u64;
    adapted_dfs(spec, hook.as_ref(), 0, &spec.z0, &spec.z0, 1.0, &mut acc, &mut visited)?;
    Ok(acc.finish(EnumerationMethod::Full, p))
}

fn independent_dfs(
    spec: &ProductSpec,
    step: usize,
    z: &DenseMatrix,
    w: f64,
    reference: &DenseMatrix,
    acc: &mut Accumulator,
) -> Result<()> {
    if step == spec.n() {
        return acc.add(z, reference, w);
    }
    for a in support_of(&spec.factors[step], step)? {
        if a.prob > 0.0 {
            independent_dfs(spec, step + 1, &(&a.matrix * z), w * a.prob, reference, acc)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adapted_dfs(
    spec: &ProductSpec,
    hook: &dyn AdaptedHook,
    step: usize,
    z: &DenseMatrix,
    f: &DenseMatrix,
    w: f64,
    acc: &mut Accumulator,
    visited: &mut u64,
) -> Result<()> {
    if step == spec.n() {
        *visited += 1;
        if *visited > ENUMERATION_BUDGET {
            return Err(Error::EnumerationInfeasible { required: *visited as f64, budget: ENUMERATION_BUDGET });
        }
        return acc.add(z, f, w);
    }
    let law = hook.conditional(step, &spec.factors[step], z)?;
    let mean = law
        .mean()
        .ok_or_else(|| Error::UnsupportedEnsemble(format!("conditional law at step {} has no mean", step + 1)))?;
    let f_next = mean * f;
    for a in support_of(&law, step)? {
        if a.prob > 0.0 {
            adapted_dfs(spec, hook, step + 1, &(&a.matrix * z), &f_next, w * a.prob, acc, visited)?;
        }
    }
    Ok(())
}

fn commuting_enumeration(
    spec: &ProductSpec,
    order: SchattenOrder,
    q: f64,
    thresholds: &[f64],
    required: f64,
) -> Result<Option<Accumulator>> {
    let first = &spec.factors[0];
    if spec.factors.iter().any(|f| !Arc::ptr_eq(f, first) && f.as_ref() != first.as_ref()) {
        return Ok(None);
    }
    let atoms: Vec<&Atom> = support_of(first, 0)?.iter().filter(|a| a.prob > 0.0).collect();
    for (i, a) in atoms.iter().enumerate() {
        for b in &atoms[i + 1..] {
            let ab = &a.matrix * &b.matrix;
            let ba = &b.matrix * &a.matrix;
            let scale = ab.max_abs().max(ba.max_abs()).max(1.0);
            if (&ab - &ba).max_abs() > COMMUTE_TOL * scale {
                return Ok(None);
            }
        }
    }
    let n = spec.n();
    let k = atoms.len();
    let compositions = (ln_gamma((n + k) as f64) - ln_gamma((n + 1) as f64) - ln_gamma(k as f64)).exp();
    if compositions > ENUMERATION_BUDGET as f64 {
        return Err(Error::EnumerationInfeasible { required: required.min(compositions), budget: ENUMERATION_BUDGET });
    }
    // powers[j][c] = A_j^c
    let d = spec.dim();
    let powers: Vec<Vec<DenseMatrix>> = atoms
        .iter()
        .map(|a| {
            let mut list = vec![DenseMatrix::identity(d)];
            for c in 1..=n {
                list.push(&list[c - 1] * &a.matrix);
            }
            list
        })
        .collect();
    let ln_probs: Vec<f64> = atoms.iter().map(|a| a.prob.ln()).collect();
    let reference = expected_product(spec)?;
    let mut acc = Accumulator::new(order, q, thresholds, spec.z0.shape());
    let mut counts = vec![0usize; k];
    composition_walk(&mut counts, 0, n, &mut |c| {
        let ln_w = ln_gamma((n + 1) as f64)
            + c.iter().zip(&ln_probs).map(|(&m, lp)| m as f64 * lp - ln_gamma((m + 1) as f64)).sum::<f64>();
        let mut z = spec.z0.clone();
        for (j, &m) in c.iter().enumerate() {
            if m > 0 {
                z = &powers[j][m] * &z;
            }
        }
        acc.add(&z, &reference, ln_w.exp())
    })?;
    Ok(Some(acc))
}

fn composition_walk(
    counts: &mut [usize],
    j: usize,
    remaining: usize,
    visit: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if j + 1 == counts.len() {
        counts[j] = remaining;
        return visit(counts);
    }
    for c in 0..=remaining {
        counts[j] = c;
        composition_walk(counts, j + 1, remaining - c, visit)?;
    }
    Ok(())
}

/// Matrix exponential (scaling and squaring with a Padé approximant).
pub fn matrix_exp(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::InvalidInput(format!("matrix exponential needs a square matrix, got {:?}", a.shape())));
    }
    DenseMatrix::from_nalgebra(&a.to_nalgebra().exp())
}

/// `(I + A/n)^n` by repeated squaring.
pub fn semigroup_power(a: &DenseMatrix, n: usize) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::InvalidInput("semigroup power needs a square matrix".into()));
    }
    let step = DenseMatrix::identity(a.rows()).add_scaled(a, 1.0 / n.max(1) as f64)?;
    let mut result = DenseMatrix::identity(a.rows());
    let mut base = step;
    let mut e = n;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        e >>= 1;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularRow {
    pub n: usize,
    pub trials: usize,
    /// `E‖Z^{(n)} − (I + A/n)^n‖`
    pub deviation: McEstimate,
    /// `E‖Z^{(n)} − e^A‖`
    pub exp_deviation: McEstimate,
    /// `sqrt(n) · E‖Z^{(n)} − (I + A/n)^n‖`
    pub scaled_deviation: f64,
    /// `sqrt(1 + 2 ln d) · L · e^{1 + ‖A‖}`
    pub reference_bound: f64,
}

/// Row-`n` products of `Y_i = I + X_i/n` with `E X_i = A` and
/// `‖X_i − A‖ ≤ L`, for each `n` in `n_list`.
pub fn triangular_array_run(
    a: &DenseMatrix,
    l: f64,
    n_list: &[usize],
    trials: usize,
    seed: u64,
    support: PerturbationSupport,
) -> Result<Vec<TriangularRow>> {
    if !a.is_square() {
        return Err(Error::InvalidInput("A must be square".into()));
    }
    if !(l >= 0.0) || !l.is_finite() {
        return Err(Error::InvalidParameter(format!("L must be finite and nonnegative, got {l}")));
    }
    if n_list.is_empty() || n_list.contains(&0) || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("n_list must be strictly increasing positive counts".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let d = a.rows();
    let exp_a = matrix_exp(a)?;
    let t_norm = spectral_norm(a);
    let reference_bound = (1.0 + 2.0 * (d as f64).ln()).sqrt() * l * (1.0 + t_norm).exp();
    let mut rows = Vec::with_capacity(n_list.len());
    for (idx, &n) in n_list.iter().enumerate() {
        let factor = if l == 0.0 {
            FactorEnsemble::deterministic(DenseMatrix::identity(d).add_scaled(a, 1.0 / n as f64)?)?
        } else {
            FactorEnsemble::bounded_perturbation(d, Some(a.clone()), l, n as f64, support, None)?
        };
        let spec = ProductSpec::iid(factor, n, DenseMatrix::identity(d), ProductMode::Independent)?;
        let mean = expected_product(&spec)?;
        let row_seed = rng::derive_seed(seed, idx as u64);
        let run = simulate_product(&spec, trials, row_seed)?;
        let (devs, exp_devs): (Vec<f64>, Vec<f64>) = run
            .trials
            .par_iter()
            .map(|t| (spectral_norm(&(&t.value - &mean)), spectral_norm(&(&t.value - &exp_a))))
            .unzip();
        let deviation = McEstimate::of_mean("deviation", &devs, row_seed);
        rows.push(TriangularRow {
            n,
            trials,
            scaled_deviation: (n as f64).sqrt() * deviation.mean,
            exp_deviation: McEstimate::of_mean("exp-deviation", &exp_devs, row_seed),
            deviation,
            reference_bound,
        });
    }
    Ok(rows)
}

/// The spec of `S⁻¹ Z_n S`: every factor conjugated, and `Z_0` replaced by
/// `S⁻¹ Z_0 S` (square) or `S⁻¹ Z_0` (otherwise).
pub fn conjugated_spec(spec: &ProductSpec, s: &DenseMatrix) -> Result<ProductSpec> {
    if let ProductMode::Adapted(_) = spec.mode {
        return Err(Error::Unsupported("conjugation of adapted products".into()));
    }
    let d = spec.dim();
    if s.shape() != (d, d) {
        return Err(Error::InvalidInput(format!("similarity has shape {:?}, expected {d}x{d}", s.shape())));
    }
    let kappa = condition_number(s)?;
    if !(kappa <= MAX_CONDITION) {
        return Err(Error::InvalidInput(format!("similarity is numerically singular (condition {kappa:e})")));
    }
    let s_inv = s.inverse()?;
    let mut cache: HashMap<*const FactorEnsemble, Arc<FactorEnsemble>> = HashMap::new();
    let mut factors = Vec::with_capacity(spec.n());
    for f in &spec.factors {
        let key = Arc::as_ptr(f);
        let c = match cache.get(&key) {
            Some(c) => Arc::clone(c),
            None => {
                let c = Arc::new(f.conjugated(s, &s_inv)?);
                cache.insert(key, Arc::clone(&c));
                c
            }
        };
        factors.push(c);
    }
    let z0 = if spec.z0.is_square() { &(&s_inv * &spec.z0) * s } else { &s_inv * &spec.z0 };
    ProductSpec::new(factors, z0, spec.mode.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_two_point(n: usize) -> ProductSpec {
        let f = FactorEnsemble::from_support(vec![
            Atom { matrix: DenseMatrix::diag(&[1.1]).unwrap(), prob: 0.5 },
            Atom { matrix: DenseMatrix::diag(&[0.9]).unwrap(), prob: 0.5 },
        ])
        .unwrap();
        ProductSpec::iid(f, n, DenseMatrix::identity(1), ProductMode::Independent).unwrap()
    }

    #[test]
    fn hand_checked_two_point_product() {
        let spec = scalar_two_point(2);
        let exact = enumerate_product(&spec, 2.0, 2.0, &[0.1]).unwrap();
        assert_eq!(exact.outcomes, 4);
        assert_relative_eq!(exact.deviation, 0.105, max_relative = 1e-12);
        assert_relative_eq!(exact.expected.get(0, 0), 1.0, max_relative = 1e-12);
        // outcomes 1.21, 0.99, 0.99, 0.81: deviations ≥ 0.1 are 0.21 and 0.19
        assert_relative_eq!(exact.tails[0].deviation, 0.5, max_relative = 1e-12);
        let run = simulate_product(&spec, 20_000, 3).unwrap();
        let mut seen: Vec<i64> = run.trials.iter().map(|t| (t.value.get(0, 0) * 1e6).round() as i64).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![810_000, 990_000, 1_210_000]);
        let rep = estimate_norm_statistics(&run, 2.0, 2.0, Some(&exact.expected)).unwrap();
        let dev = rep.deviation.unwrap();
        assert!((dev.mean - 0.105).abs() <= 3.0 * dev.std_error + 1e-12);
    }

    #[test]
    fn commuting_fallback_matches_full_enumeration() {
        let spec = scalar_two_point(10);
        let full = enumerate_product(&spec, 3.0, 2.0, &[0.2, 0.5]).unwrap();
        let acc = commuting_enumeration(&spec, SchattenOrder::Finite(3.0), 2.0, &[0.2, 0.5], 1024.0)
            .unwrap()
            .unwrap()
            .finish(EnumerationMethod::Commuting, 3.0);
        assert_eq!(acc.outcomes, 11);
        assert_relative_eq!(acc.deviation, full.deviation, max_relative = 1e-12);
        assert_relative_eq!(acc.deviation_moment, full.deviation_moment, max_relative = 1e-12);
        assert_relative_eq!(acc.tails[0].deviation, full.tails[0].deviation, max_relative = 1e-12);
        assert_relative_eq!(acc.tails[1].growth, full.tails[1].growth, max_relative = 1e-12);
    }

    #[test]
    fn deterministic_and_empty_products() {
        let y = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.5]]).unwrap();
        let spec = ProductSpec::iid(
            FactorEnsemble::deterministic(y.clone()).unwrap(),
            3,
            DenseMatrix::identity(2),
            ProductMode::Independent,
        )
        .unwrap();
        let mean = expected_product(&spec).unwrap();
        assert_eq!(mean, &(&y * &y) * &y);
        let run = simulate_product(&spec, 5, 1).unwrap();
        assert!(run.trials.iter().all(|t| t.value == mean));
        let rep = estimate_norm_statistics(&run, 2.0, 2.0, Some(&mean)).unwrap();
        let dev = rep.deviation.unwrap();
        assert_eq!(dev.mean, 0.0);
        assert_eq!(dev.std_error, 0.0);
        let empty = ProductSpec::independent(vec![], DenseMatrix::identity(2)).unwrap();
        assert_eq!(expected_product(&empty).unwrap(), DenseMatrix::identity(2));
    }

    #[test]
    fn inverse_mode_inverts_each_trial() {
        let f =
            FactorEnsemble::bounded_perturbation(3, None, 0.5, 10.0, PerturbationSupport::UniformSphere, None).unwrap();
        let spec = ProductSpec::iid(f, 6, DenseMatrix::identity(3), ProductMode::Inverse).unwrap();
        let run = simulate_product(&spec, 50, 9).unwrap();
        assert_eq!(run.excluded, 0);
        for t in &run.trials {
            let id = t.forward.as_ref().unwrap() * &t.value;
            assert!((&id - &DenseMatrix::identity(3)).max_abs() < 1e-10);
        }
        let big = FactorEnsemble::bounded_perturbation(3, None, 5.0, 1.0, PerturbationSupport::TwoPoint, None).unwrap();
        assert!(matches!(
            ProductSpec::iid(big, 2, DenseMatrix::identity(3), ProductMode::Inverse),
            Err(Error::ConditionViolated(_))
        ));
    }

    #[test]
    fn history_free_adapted_mode_matches_independent_mean() {
        let spec = scalar_two_point(4);
        let adapted = ProductSpec::new(
            spec.factors().to_vec(),
            DenseMatrix::identity(1),
            ProductMode::Adapted(Arc::new(HistoryFree)),
        )
        .unwrap();
        let mean = expected_product(&spec).unwrap();
        let run = simulate_product(&adapted, 100, 2).unwrap();
        assert!(run.trials.iter().all(|t| t.conditional_mean.as_ref() == Some(&mean)));
        let a = enumerate_product(&adapted, 2.0, 2.0, &[]).unwrap();
        let b = enumerate_product(&spec, 2.0, 2.0, &[]).unwrap();
        assert_relative_eq!(a.deviation, b.deviation, max_relative = 1e-12);
    }

    #[test]
    fn semigroup_and_exponential() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let e = matrix_exp(&a).unwrap();
        let (c, s) = (1f64.cos(), 1f64.sin());
        assert_relative_eq!(e.get(0, 0), c, max_relative = 1e-12);
        assert_relative_eq!(e.get(0, 1), s, max_relative = 1e-12);
        let p = semigroup_power(&a, 1 << 16).unwrap();
        assert!((&p - &e).max_abs() < 1e-4);
        let rows = triangular_array_run(&a, 0.0, &[10, 100], 3, 1, PerturbationSupport::UniformSphere).unwrap();
        assert!(rows[1].exp_deviation.mean < rows[0].exp_deviation.mean);
        assert!(rows.iter().all(|r| r.deviation.mean < 1e-12));
    }

    #[test]
    fn conjugation_preserves_spectral_radius() {
        let y = DenseMatrix::from_rows(&[vec![0.6, 2.0], vec![0.0, 0.4]]).unwrap();
        let f = FactorEnsemble::from_support(vec![
            Atom { matrix: y.add_scaled(&DenseMatrix::identity(2), 0.1).unwrap(), prob: 0.5 },
            Atom { matrix: y.add_scaled(&DenseMatrix::identity(2), -0.1).unwrap(), prob: 0.5 },
        ])
        .unwrap();
        let spec = ProductSpec::iid(f, 3, DenseMatrix::identity(2), ProductMode::Independent).unwrap();
        let s = DenseMatrix::diag(&[1.0, 0.1]).unwrap();
        let conj = conjugated_spec(&spec, &s).unwrap();
        assert_eq!(conj.z0(), &DenseMatrix::identity(2));
        let a = simulate_product(&spec, 20, 4).unwrap();
        let b = simulate_product(&conj, 20, 4).unwrap();
        for (x, y) in a.trials.iter().zip(&b.trials) {
            let (rx, ry) = (spectral_radius(&x.value).unwrap(), spectral_radius(&y.value).unwrap());
            assert_relative_eq!(rx, ry, max_relative = 1e-9);
            assert!(spectral_norm(&y.value) >= ry * (1.0 - 1e-12));
        }
        assert!(conj.factors()[0].stats().m < spec.factors()[0].stats().m);
    }
}

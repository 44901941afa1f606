//! Random factor distributions with seeded sampling and per-factor statistics.

use std::borrow::Cow;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng;
use crate::schatten::{condition_number, spectral_norm};
use crate::stats::{self, CI_LEVEL};

/// Largest condition number accepted for a similarity transform.
pub const MAX_CONDITION: f64 = 1e12;
/// Tolerance for the contraction property `‖Y‖ ≤ 1`.
pub const CONTRACTION_SLACK: f64 = 1e-12;
const PROB_SUM_TOL: f64 = 1e-12;
const CONJUGATED_STAT_TRIALS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Provenance {
    #[default]
    Analytic,
    /// Computed exactly from a finite support.
    Exact,
    MonteCarlo {
        trials: usize,
        confidence: f64,
        std_error: f64,
    },
}

/// Per-factor statistics. `sigma` and `deviation_uniform` are relative to `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorStats {
    /// Bound on `‖E Y‖`.
    pub m: f64,
    /// Bound on `(E‖Y − EY‖^q)^{1/q} / m` at `q = order`.
    pub sigma: f64,
    pub order: f64,
    /// Almost-sure bound on `‖Y‖`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform_bound: Option<f64>,
    /// Almost-sure bound on `‖Y − EY‖ / m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation_uniform: Option<f64>,
    /// `‖E|Y|²‖^{1/2}` for contraction ensembles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction_stat: Option<f64>,
    /// Bound on `‖E X‖` where `Y = I + X`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    /// Almost-sure bound on `‖X − EX‖` where `Y = I + X`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_sigma: Option<f64>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl FactorStats {
    pub fn deterministic(m: f64) -> Self {
        Self {
            m,
            sigma: 0.0,
            order: 2.0,
            uniform_bound: Some(m),
            deviation_uniform: Some(0.0),
            contraction_stat: None,
            xi: None,
            perturbation_sigma: None,
            provenance: Provenance::Analytic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.m > 0.0) || !self.m.is_finite() {
            return bad(format!("mean norm bound m must be positive, got {}", self.m));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        if !(self.order >= 2.0) {
            return bad(format!("deviation order must be at least 2, got {}", self.order));
        }
        if let Some(b) = self.uniform_bound {
            if !(b > 0.0) || self.m > b * (1.0 + 1e-12) {
                return bad(format!("uniform bound b = {b} must be positive and at least m = {}", self.m));
            }
        }
        if let Some(s) = self.deviation_uniform {
            if !(s >= 0.0) {
                return bad(format!("deviation_uniform must be nonnegative, got {s}"));
            }
        }
        if let Some(c) = self.contraction_stat {
            if !(c > 0.0 && c <= 1.0 + CONTRACTION_SLACK) || self.m > 1.0 + CONTRACTION_SLACK {
                return bad(format!("contraction statistic {c} must lie in (0, 1] with m = {} <= 1", self.m));
            }
        }
        for (name, value) in [("xi", self.xi), ("perturbation_sigma", self.perturbation_sigma)] {
            if let Some(x) = value {
                if !(x >= 0.0) {
                    return bad(format!("{name} must be nonnegative, got {x}"));
                }
            }
        }
        Ok(())
    }

    /// Relative deviation bound valid at order `q`, if one is known.
    pub fn sigma_at(&self, q: f64) -> Option<f64> {
        if q <= self.order {
            Some(self.sigma)
        } else {
            self.deviation_uniform
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub matrix: DenseMatrix,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationSupport {
    #[default]
    TwoPoint,
    UniformSphere,
}

/// JSON description of an ensemble, discriminated by `"kind"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnsembleConfig {
    /// `Y = I + X / n_scale` with `E X = mean` and `‖X − mean‖ ≤ radius`.
    BoundedPerturbation {
        dim: usize,
        #[serde(default)]
        mean: Option<DenseMatrix>,
        radius: f64,
        n_scale: f64,
        #[serde(default)]
        support: PerturbationSupport,
        /// Direction of the two-point support; rescaled to unit spectral norm.
        #[serde(default)]
        direction: Option<DenseMatrix>,
    },
    /// `Y = I + (mean + scale·G) / n_scale` with a standard Gaussian `G`.
    GaussianPerturbation {
        dim: usize,
        #[serde(default)]
        mean: Option<DenseMatrix>,
        scale: f64,
        n_scale: f64,
    },
    /// `Y = I + ε e_j e_jᵀ` with `j` uniform and `ε` a random sign.
    RademacherRankOne {
        dim: usize,
    },
    /// `Y = I − a aᵀ / ‖a‖²` for a uniformly chosen row `a`; coordinate rows by default.
    ProjectorContraction {
        dim: usize,
        #[serde(default)]
        rows: Option<DenseMatrix>,
    },
    FiniteSupport {
        atoms: Vec<Atom>,
    },
    Deterministic {
        matrix: DenseMatrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Sampler {
    Atoms {
        atoms: Vec<Atom>,
        cdf: Vec<f64>,
    },
    /// `base + scale · G / ‖G‖_F`
    Sphere {
        base: DenseMatrix,
        scale: f64,
    },
    /// `base + scale · G`
    Gaussian {
        base: DenseMatrix,
        scale: f64,
    },
    Conjugated {
        inner: Box<Sampler>,
        s: DenseMatrix,
        s_inv: DenseMatrix,
    },
}

impl Sampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Cow<'_, DenseMatrix> {
        match self {
            Sampler::Atoms { atoms, cdf } => {
                let u: f64 = rng.random();
                let k = cdf.partition_point(|&c| c <= u).min(atoms.len() - 1);
                Cow::Borrowed(&atoms[k].matrix)
            }
            Sampler::Sphere { base, scale } => {
                let d = base.rows();
                let g = rng::gaussian_matrix(rng, d, d);
                let norm = g.frobenius_norm();
                Cow::Owned(base.add_scaled(&g, scale / norm).expect("same shape"))
            }
            Sampler::Gaussian { base, scale } => {
                let d = base.rows();
                let g = rng::gaussian_matrix(rng, d, d);
                Cow::Owned(base.add_scaled(&g, *scale).expect("same shape"))
            }
            Sampler::Conjugated { inner, s, s_inv } => {
                let y = inner.sample(rng);
                Cow::Owned(&(s_inv * y.as_ref()) * s)
            }
        }
    }
}

/// Analytic value of the projected deviation statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ProjectedAnalytic {
    /// `sqrt(r / d)`
    RankOne { dim: usize },
}

/// A random factor `Y` with its sampler and statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEnsemble {
    dim: usize,
    label: String,
    sampler: Sampler,
    mean: Option<DenseMatrix>,
    stats: FactorStats,
    projected: Option<ProjectedAnalytic>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatQuality {
    Analytic,
    Exact,
    Estimate,
    /// Sampled maximum of a supremum; not certified.
    LowerEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedStat {
    pub rank: usize,
    /// Absolute `sup_P (E‖(Y − EY)P‖²)^{1/2}` (divide by `m` for the relative form).
    pub value: f64,
    pub quality: StatQuality,
}

fn identity_plus(a: &DenseMatrix, scale: f64) -> DenseMatrix {
    DenseMatrix::identity(a.rows()).add_scaled(a, scale).expect("square")
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    Ok(())
}

fn mean_or_zero(dim: usize, mean: Option<DenseMatrix>) -> Result<DenseMatrix> {
    match mean {
        None => Ok(DenseMatrix::zeros(dim, dim)),
        Some(a) if a.shape() == (dim, dim) => Ok(a),
        Some(a) => Err(Error::InvalidInput(format!("mean has shape {:?}, expected {dim}x{dim}", a.shape()))),
    }
}

fn check_scale(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {x}")));
    }
    Ok(())
}

fn build_cdf(atoms: &[Atom]) -> Result<Vec<f64>> {
    if atoms.is_empty() {
        return Err(Error::InvalidInput("finite support needs at least one atom".into()));
    }
    let shape = atoms[0].matrix.shape();
    if shape.0 != shape.1 {
        return Err(Error::InvalidInput(format!("factors must be square, got {shape:?}")));
    }
    let mut cdf = Vec::with_capacity(atoms.len());
    let mut total = 0.0;
    for atom in atoms {
        if atom.matrix.shape() != shape {
            return Err(Error::InvalidInput("atoms have different shapes".into()));
        }
        if !(atom.prob >= 0.0) || !atom.prob.is_finite() {
            return Err(Error::InvalidInput(format!("invalid probability {}", atom.prob)));
        }
        total += atom.prob;
        cdf.push(total);
    }
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidInput(format!("probabilities sum to {total}, expected 1")));
    }
    Ok(cdf)
}

fn support_mean(atoms: &[Atom]) -> DenseMatrix {
    let (r, c) = atoms[0].matrix.shape();
    atoms.iter().fold(DenseMatrix::zeros(r, c), |acc, a| acc.add_scaled(&a.matrix, a.prob).expect("same shape"))
}

/// Exact statistics of a finite support at order 2.
fn support_stats(atoms: &[Atom], mean: &DenseMatrix) -> Result<FactorStats> {
    let m = spectral_norm(mean);
    if !(m > 0.0) {
        return Err(Error::InvalidParameter("the mean factor is zero, so relative deviations are undefined".into()));
    }
    let devs: Vec<f64> = atoms.iter().map(|a| spectral_norm(&(&a.matrix - mean))).collect();
    let second: f64 = atoms.iter().zip(&devs).map(|(a, d)| a.prob * d * d).sum();
    let max_dev = atoms.iter().zip(&devs).filter(|(a, _)| a.prob > 0.0).fold(0.0_f64, |acc, (_, d)| acc.max(*d));
    let norms: Vec<f64> = atoms.iter().map(|a| spectral_norm(&a.matrix)).collect();
    let b = atoms.iter().zip(&norms).filter(|(a, _)| a.prob > 0.0).fold(0.0_f64, |acc, (_, n)| acc.max(*n));
    let contraction_stat = if b <= 1.0 + CONTRACTION_SLACK {
        let d = mean.rows();
        let gram = atoms.iter().fold(DenseMatrix::zeros(d, d), |acc, a| {
            acc.add_scaled(&(&a.matrix.transpose() * &a.matrix), a.prob).expect("same shape")
        });
        let c = spectral_norm(&gram).sqrt();
        (c > 0.0).then_some(c.min(1.0))
    } else {
        None
    };
    let xi = spectral_norm(&(mean - &DenseMatrix::identity(mean.rows())));
    Ok(FactorStats {
        m,
        sigma: second.sqrt() / m,
        order: 2.0,
        uniform_bound: Some(b.max(m)),
        deviation_uniform: Some(max_dev / m),
        contraction_stat,
        xi: Some(xi),
        perturbation_sigma: Some(max_dev),
        provenance: Provenance::Exact,
    })
}

impl FactorEnsemble {
    pub fn from_config(config: &EnsembleConfig) -> Result<Self> {
        match config.clone() {
            EnsembleConfig::BoundedPerturbation { dim, mean, radius, n_scale, support, direction } => {
                Self::bounded_perturbation(dim, mean, radius, n_scale, support, direction)
            }
            EnsembleConfig::GaussianPerturbation { dim, mean, scale, n_scale } => {
                Self::gaussian_perturbation(dim, mean, scale, n_scale)
            }
            EnsembleConfig::RademacherRankOne { dim } => Self::rademacher_rank_one(dim),
            EnsembleConfig::ProjectorContraction { dim, rows } => match rows {
                None => Self::coordinate_projectors(dim),
                Some(rows) => Self::kaczmarz_rows(dim, &rows),
            },
            EnsembleConfig::FiniteSupport { atoms } => Self::from_support(atoms),
            EnsembleConfig::Deterministic { matrix } => Self::deterministic(matrix),
        }
    }

    /// `Y = I + X / n_scale` with `E X = A` and `‖X − A‖ ≤ b` almost surely.
    pub fn bounded_perturbation(
        dim: usize,
        mean: Option<DenseMatrix>,
        radius: f64,
        n_scale: f64,
        support: PerturbationSupport,
        direction: Option<DenseMatrix>,
    ) -> Result<Self> {
        check_dim(dim)?;
        check_scale("radius", radius)?;
        check_scale("n_scale", n_scale)?;
        let a = mean_or_zero(dim, mean)?;
        let a_norm = spectral_norm(&a);
        let base = identity_plus(&a, 1.0 / n_scale);
        let xi = a_norm / n_scale;
        let dev = radius / n_scale;
        let stats = FactorStats {
            m: 1.0 + xi,
            sigma: dev,
            order: 2.0,
            uniform_bound: Some(1.0 + (a_norm + radius) / n_scale),
            deviation_uniform: Some(dev),
            contraction_stat: None,
            xi: Some(xi),
            perturbation_sigma: Some(dev),
            provenance: Provenance::Analytic,
        };
        let (sampler, label) = match support {
            PerturbationSupport::TwoPoint => {
                let u = match direction {
                    None => DenseMatrix::identity(dim),
                    Some(u) if u.shape() == (dim, dim) => {
                        let norm = spectral_norm(&u);
                        if norm == 0.0 {
                            return Err(Error::InvalidParameter("direction must be nonzero".into()));
                        }
                        u.scale(1.0 / norm)
                    }
                    Some(u) => {
                        return Err(Error::InvalidInput(format!(
                            "direction has shape {:?}, expected {dim}x{dim}",
                            u.shape()
                        )))
                    }
                };
                let atoms = vec![
                    Atom { matrix: base.add_scaled(&u, dev)?, prob: 0.5 },
                    Atom { matrix: base.add_scaled(&u, -dev)?, prob: 0.5 },
                ];
                let cdf = build_cdf(&atoms)?;
                (Sampler::Atoms { atoms, cdf }, "bounded-perturbation/two-point")
            }
            PerturbationSupport::UniformSphere => {
                (Sampler::Sphere { base: base.clone(), scale: dev }, "bounded-perturbation/uniform-sphere")
            }
        };
        Ok(Self { dim, label: label.into(), sampler, mean: Some(base), stats, projected: None })
    }

    /// Unbounded Gaussian perturbation. Carries no almost-sure bounds.
    pub fn gaussian_perturbation(dim: usize, mean: Option<DenseMatrix>, scale: f64, n_scale: f64) -> Result<Self> {
        check_dim(dim)?;
        check_scale("scale", scale)?;
        check_scale("n_scale", n_scale)?;
        let a = mean_or_zero(dim, mean)?;
        let xi = spectral_norm(&a) / n_scale;
        let base = identity_plus(&a, 1.0 / n_scale);
        // E‖G‖² ≤ E‖G‖_F² = d²
        let dev = scale * dim as f64 / n_scale;
        let stats = FactorStats {
            m: 1.0 + xi,
            sigma: dev,
            order: 2.0,
            uniform_bound: None,
            deviation_uniform: None,
            contraction_stat: None,
            xi: Some(xi),
            perturbation_sigma: None,
            provenance: Provenance::Analytic,
        };
        Ok(Self {
            dim,
            label: "gaussian-perturbation".into(),
            sampler: Sampler::Gaussian { base: base.clone(), scale: scale / n_scale },
            mean: Some(base),
            stats,
            projected: None,
        })
    }

    pub fn rademacher_rank_one(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let p = 1.0 / (2 * dim) as f64;
        let mut atoms = Vec::with_capacity(2 * dim);
        for j in 0..dim {
            for eps in [1.0, -1.0] {
                let mut y = DenseMatrix::identity(dim);
                y.set(j, j, 1.0 + eps);
                atoms.push(Atom { matrix: y, prob: p });
            }
        }
        let cdf = build_cdf(&atoms)?;
        let stats = FactorStats {
            m: 1.0,
            sigma: 1.0,
            order: 2.0,
            uniform_bound: Some(2.0),
            deviation_uniform: Some(1.0),
            contraction_stat: None,
            xi: Some(0.0),
            perturbation_sigma: Some(1.0),
            provenance: Provenance::Analytic,
        };
        Ok(Self {
            dim,
            label: "rademacher-rank-one".into(),
            sampler: Sampler::Atoms { atoms, cdf },
            mean: Some(DenseMatrix::identity(dim)),
            stats,
            projected: Some(ProjectedAnalytic::RankOne { dim }),
        })
    }

    /// `Y = I − e_j e_jᵀ` with `j` uniform.
    pub fn coordinate_projectors(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Self::kaczmarz_rows(dim, &DenseMatrix::identity(dim)).map(|mut e| {
            e.label = "projector-contraction/coordinate".into();
            e
        })
    }

    /// `Y = I − a aᵀ / ‖a‖²` with `a` a uniformly chosen row of `rows`.
    pub fn kaczmarz_rows(dim: usize, rows: &DenseMatrix) -> Result<Self> {
        check_dim(dim)?;
        if rows.cols() != dim {
            return Err(Error::InvalidInput(format!("rows have {} columns, expected {dim}", rows.cols())));
        }
        let k = rows.rows();
        let mut atoms = Vec::with_capacity(k);
        for i in 0..k {
            let a = rows.row(i);
            let norm2: f64 = a.iter().map(|x| x * x).sum();
            if !(norm2 > 0.0) {
                return Err(Error::InvalidParameter(format!("row {i} is the zero vector")));
            }
            let proj = DenseMatrix::outer(a, a)?.scale(1.0 / norm2);
            atoms.push(Atom { matrix: &DenseMatrix::identity(dim) - &proj, prob: 1.0 / k as f64 });
        }
        Self::from_atoms(atoms, "projector-contraction/kaczmarz-row")
    }

    pub fn from_support(atoms: Vec<Atom>) -> Result<Self> {
        Self::from_atoms(atoms, "finite-support")
    }

    pub fn deterministic(matrix: DenseMatrix) -> Result<Self> {
        Self::from_atoms(vec![Atom { matrix, prob: 1.0 }], "deterministic")
    }

    fn from_atoms(atoms: Vec<Atom>, label: &str) -> Result<Self> {
        let cdf = build_cdf(&atoms)?;
        let mean = support_mean(&atoms);
        let stats = support_stats(&atoms, &mean)?;
        Ok(Self {
            dim: mean.rows(),
            label: label.into(),
            sampler: Sampler::Atoms { atoms, cdf },
            mean: Some(mean),
            stats,
            projected: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn stats(&self) -> &FactorStats {
        &self.stats
    }

    /// Exact `E Y`, when known.
    pub fn mean(&self) -> Option<&DenseMatrix> {
        self.mean.as_ref()
    }

    pub fn finite_support(&self) -> Option<&[Atom]> {
        match &self.sampler {
            Sampler::Atoms { atoms, .. } => Some(atoms),
            _ => None,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.finite_support().is_some_and(|a| a.iter().filter(|x| x.prob > 0.0).count() == 1)
    }

    /// One draw of `Y`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Cow<'_, DenseMatrix> {
        self.sampler.sample(rng)
    }

    /// Draw for stream `index` of `seed`.
    pub fn sample_stream(&self, seed: u64, index: u64) -> DenseMatrix {
        self.sample(&mut rng::stream(seed, index)).into_owned()
    }

    /// Relative deviation bound at order `q`, falling back to exact support moments.
    pub fn sigma_at(&self, q: f64) -> Option<f64> {
        self.stats.sigma_at(q).or_else(|| {
            let atoms = self.finite_support()?;
            let mean = self.mean.as_ref()?;
            let moment: f64 = atoms.iter().map(|a| a.prob * spectral_norm(&(&a.matrix - mean)).powf(q)).sum();
            Some(moment.powf(1.0 / q) / self.stats.m)
        })
    }

    /// The ensemble of `S⁻¹ Y S`.
    pub fn conjugated(&self, s: &DenseMatrix, s_inv: &DenseMatrix) -> Result<Self> {
        if s.shape() != (self.dim, self.dim) {
            return Err(Error::InvalidInput(format!(
                "similarity has shape {:?}, expected {}x{}",
                s.shape(),
                self.dim,
                self.dim
            )));
        }
        let kappa = condition_number(s)?;
        if !(kappa <= MAX_CONDITION) {
            return Err(Error::InvalidInput(format!("similarity is numerically singular (condition {kappa:e})")));
        }
        let conj = |y: &DenseMatrix| &(s_inv * y) * s;
        let label = format!("{} (conjugated)", self.label);
        if let Some(atoms) = self.finite_support() {
            let atoms: Vec<Atom> = atoms.iter().map(|a| Atom { matrix: conj(&a.matrix), prob: a.prob }).collect();
            let mut e = Self::from_atoms(atoms, &label)?;
            e.label = label;
            return Ok(e);
        }
        let mean =
            self.mean.as_ref().ok_or_else(|| Error::UnsupportedEnsemble("conjugation needs an exact mean".into()))?;
        let mean_c = conj(mean);
        let mut e = Self {
            dim: self.dim,
            label,
            sampler: Sampler::Conjugated { inner: Box::new(self.sampler.clone()), s: s.clone(), s_inv: s_inv.clone() },
            mean: Some(mean_c.clone()),
            stats: self.stats.clone(),
            projected: None,
        };
        let m = spectral_norm(&mean_c);
        if !(m > 0.0) {
            return Err(Error::InvalidParameter("conjugated mean is zero".into()));
        }
        let estimated = estimate_factor_stats(&e, 2.0, CONJUGATED_STAT_TRIALS, rng::DEFAULT_SEED)?;
        let old_m = self.stats.m;
        e.stats = FactorStats {
            m,
            uniform_bound: self.stats.uniform_bound.map(|b| (kappa * b).max(m)),
            deviation_uniform: self.stats.deviation_uniform.map(|s| kappa * s * old_m / m),
            contraction_stat: None,
            xi: None,
            perturbation_sigma: None,
            ..estimated
        };
        Ok(e)
    }
}

/// Plug-in estimates of `m` and `σ` at order `q` with bootstrap errors.
///
/// Deviations are measured against the exact mean. The ensemble's own
/// statistics are left untouched.
pub fn estimate_factor_stats(e: &FactorEnsemble, q: f64, trials: usize, seed: u64) -> Result<FactorStats> {
    if !(q >= 2.0) {
        return Err(Error::InvalidParameter(format!("order q must be at least 2, got {q}")));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let mean = e.mean().ok_or_else(|| Error::UnsupportedEnsemble(format!("{} has no exact mean", e.label())))?;
    let m = spectral_norm(mean);
    if !(m > 0.0) {
        return Err(Error::InvalidParameter("mean factor is zero".into()));
    }
    let devs: Vec<f64> =
        (0..trials).into_par_iter().map(|k| spectral_norm(&(&e.sample_stream(seed, k as u64) - mean))).collect();
    let statistic = |xs: &[f64]| {
        let moment = xs.iter().map(|x| x.powf(q)).sum::<f64>() / xs.len() as f64;
        moment.powf(1.0 / q) / m
    };
    let sigma = statistic(&devs);
    let std_error = stats::bootstrap_se(&devs, rng::derive_seed(seed, 0xB007), statistic);
    Ok(FactorStats {
        m,
        sigma,
        order: q,
        uniform_bound: None,
        deviation_uniform: None,
        contraction_stat: None,
        xi: None,
        perturbation_sigma: None,
        provenance: Provenance::MonteCarlo { trials, confidence: CI_LEVEL, std_error },
    })
}

/// Deviation statistic restricted to rank-`r` projectors,
/// `sup_P (E‖(Y − EY)P‖²)^{1/2}`.
///
/// Analytic where the ensemble provides a closed form. Otherwise the
/// supremum is approximated by the best of `trials` random projectors built
/// from nested columns of random orthonormal bases, and flagged as a lower
/// estimate.
pub fn projected_deviation_stat(e: &FactorEnsemble, r: usize, trials: usize, seed: u64) -> Result<ProjectedStat> {
    let d = e.dim();
    if r == 0 || r > d {
        return Err(Error::InvalidParameter(format!("rank must lie in 1..={d}, got {r}")));
    }
    if let Some(ProjectedAnalytic::RankOne { dim }) = e.projected {
        return Ok(ProjectedStat { rank: r, value: (r as f64 / dim as f64).sqrt(), quality: StatQuality::Analytic });
    }
    let mean = e.mean().ok_or_else(|| Error::UnsupportedEnsemble(format!("{} has no exact mean", e.label())))?;
    if e.is_deterministic() {
        return Ok(ProjectedStat { rank: r, value: 0.0, quality: StatQuality::Exact });
    }
    // Weighted deviations: exact support or a fixed batch of draws.
    let deviations: Vec<(DenseMatrix, f64)> = match e.finite_support() {
        Some(atoms) => atoms.iter().map(|a| (&a.matrix - mean, a.prob)).collect(),
        None => {
            let draws = 1000usize;
            let s = rng::derive_seed(seed, 0xD1A);
            (0..draws).map(|k| (&e.sample_stream(s, k as u64) - mean, 1.0 / draws as f64)).collect()
        }
    };
    let exact_support = e.finite_support().is_some();
    if r == d {
        let second: f64 = deviations.iter().map(|(x, w)| w * spectral_norm(x).powi(2)).sum();
        let quality = if exact_support { StatQuality::Exact } else { StatQuality::Estimate };
        return Ok(ProjectedStat { rank: r, value: second.sqrt(), quality });
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let best = (0..trials)
        .into_par_iter()
        .map(|j| {
            let q = rng::orthogonal_matrix(&mut rng::stream(seed, j as u64), d);
            let cols: Vec<f64> = (0..d).flat_map(|i| q.row(i)[..r].to_vec()).collect();
            let qr = DenseMatrix::new(d, r, cols).expect("shape");
            deviations.iter().map(|(x, w)| w * spectral_norm(&(x * &qr)).powi(2)).sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0_f64, f64::max);
    Ok(ProjectedStat { rank: r, value: best.sqrt(), quality: StatQuality::LowerEstimate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_point_stats_and_support() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let e =
            FactorEnsemble::bounded_perturbation(2, Some(a), 0.5, 10.0, PerturbationSupport::TwoPoint, None).unwrap();
        let s = e.stats();
        assert_relative_eq!(s.m, 1.1, max_relative = 1e-14);
        assert_relative_eq!(s.sigma, 0.05, max_relative = 1e-14);
        assert_relative_eq!(s.xi.unwrap(), 0.1, max_relative = 1e-14);
        let atoms = e.finite_support().unwrap();
        assert_eq!(atoms.len(), 2);
        let mean = support_mean(atoms);
        assert!((&mean - e.mean().unwrap()).max_abs() < 1e-15);
        for atom in atoms {
            assert_relative_eq!(spectral_norm(&(&atom.matrix - &mean)), 0.05, max_relative = 1e-12);
        }
        s.validate().unwrap();
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(matches!(
            FactorEnsemble::bounded_perturbation(2, None, 0.0, 1.0, PerturbationSupport::TwoPoint, None),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            FactorEnsemble::bounded_perturbation(2, None, -1.0, 1.0, PerturbationSupport::UniformSphere, None),
            Err(Error::InvalidParameter(_))
        ));
        let rows = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(FactorEnsemble::kaczmarz_rows(2, &rows), Err(Error::InvalidParameter(_))));
        let atoms = vec![Atom { matrix: DenseMatrix::identity(2), prob: 0.7 }];
        assert!(matches!(FactorEnsemble::from_support(atoms), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rank_one_projected_stat_is_analytic() {
        let e = FactorEnsemble::rademacher_rank_one(100).unwrap();
        let s = projected_deviation_stat(&e, 1, 10, 1).unwrap();
        assert_eq!(s.quality, StatQuality::Analytic);
        assert_relative_eq!(s.value, 0.1, max_relative = 1e-15);
        let full = projected_deviation_stat(&e, 100, 10, 1).unwrap();
        assert_relative_eq!(full.value, 1.0, max_relative = 1e-15);
        assert!(projected_deviation_stat(&e, 0, 10, 1).is_err());
        assert!(projected_deviation_stat(&e, 101, 10, 1).is_err());
    }

    #[test]
    fn coordinate_contraction_stat() {
        let d = 8;
        let e = FactorEnsemble::coordinate_projectors(d).unwrap();
        let c = e.stats().contraction_stat.unwrap();
        assert_relative_eq!(c, (1.0 - 1.0 / d as f64).sqrt(), max_relative = 1e-12);
        let single = DenseMatrix::from_rows(&[vec![1.0, 2.0, 0.0]]).unwrap();
        let e = FactorEnsemble::kaczmarz_rows(3, &single).unwrap();
        assert_eq!(e.stats().sigma, 0.0);
    }

    #[test]
    fn sampler_support_matches_atoms() {
        let e = FactorEnsemble::rademacher_rank_one(3).unwrap();
        let atoms = e.finite_support().unwrap();
        let mut seen = vec![0usize; atoms.len()];
        for k in 0..600 {
            let y = e.sample_stream(9, k);
            let idx = atoms.iter().position(|a| a.matrix == y).expect("draw is an atom");
            seen[idx] += 1;
        }
        assert!(seen.iter().all(|&c| c > 50));
    }
}

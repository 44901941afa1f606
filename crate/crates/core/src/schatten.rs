//! Schatten norms, singular values, spectral radius, and the uniform
//! smoothness gap of the Schatten classes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Above this order the norm is accumulated in the log domain.
const LOG_DOMAIN_ORDER: f64 = 64.0;
/// Singular values below this are treated as zero in the log domain.
const TINY_SINGULAR_VALUE: f64 = 1e-300;

/// Order of a Schatten norm. `Infinity` is the spectral norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchattenOrder {
    Finite(f64),
    Infinity,
}

impl SchattenOrder {
    pub fn validate(self) -> Result<Self> {
        match self {
            SchattenOrder::Finite(p) if !(p >= 1.0) || !p.is_finite() => {
                Err(Error::InvalidParameter(format!("Schatten order must satisfy p >= 1, got {p}")))
            }
            other => Ok(other),
        }
    }
}

impl From<f64> for SchattenOrder {
    fn from(p: f64) -> Self {
        if p == f64::INFINITY {
            SchattenOrder::Infinity
        } else {
            SchattenOrder::Finite(p)
        }
    }
}

impl fmt::Display for SchattenOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchattenOrder::Finite(p) => write!(f, "{p}"),
            SchattenOrder::Infinity => write!(f, "inf"),
        }
    }
}

/// The uniform smoothness constant `C_p = p - 1`.
pub fn smoothness_constant(p: f64) -> f64 {
    p - 1.0
}

/// Parameters `(p, q, C_p)` recorded with every bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SchattenParams {
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub cp: Option<f64>,
}

impl SchattenParams {
    pub fn new(p: f64, q: Option<f64>) -> Self {
        Self { p: Some(p), q, cp: Some(smoothness_constant(p)) }
    }

    /// Validates `2 <= q <= p` for joint use.
    pub fn joint(p: f64, q: f64) -> Result<Self> {
        if !(q >= 2.0) || !(q <= p) || !p.is_finite() {
            return Err(Error::InvalidParameter(format!("moment bounds need 2 <= q <= p < inf, got p = {p}, q = {q}")));
        }
        Ok(Self::new(p, Some(q)))
    }
}

/// Singular values in nonincreasing order, length `min(rows, cols)`.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    // DenseMatrix guarantees finite entries; re-check for values built by hand.
    if m.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite entries".into()));
    }
    let mut sv: Vec<f64> = if m.rows() == 1 || m.cols() == 1 {
        vec![m.frobenius_norm()]
    } else {
        m.to_nalgebra().singular_values().iter().map(|s| s.max(0.0)).collect()
    };
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// `ℓ_p` norm of a nonnegative vector, overflow-safe.
pub fn lp_norm_of(values: &[f64], order: SchattenOrder) -> Result<f64> {
    match order.validate()? {
        SchattenOrder::Infinity => Ok(values.iter().fold(0.0_f64, |a, &x| a.max(x))),
        SchattenOrder::Finite(p) => {
            let max = values.iter().fold(0.0_f64, |a, &x| a.max(x));
            if max == 0.0 {
                return Ok(0.0);
            }
            if p > LOG_DOMAIN_ORDER {
                let logs: Vec<f64> =
                    values.iter().filter(|&&s| s >= TINY_SINGULAR_VALUE).map(|&s| p * s.ln()).collect();
                let top = logs.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
                Ok((lse / p).exp())
            } else {
                let sum: f64 = values.iter().map(|&s| (s / max).powf(p)).sum();
                Ok(max * sum.powf(1.0 / p))
            }
        }
    }
}

pub fn schatten_norm(m: &DenseMatrix, order: impl Into<SchattenOrder>) -> Result<f64> {
    let order = order.into().validate()?;
    lp_norm_of(&singular_values(m)?, order)
}

pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    schatten_norm(m, SchattenOrder::Infinity).expect("DenseMatrix entries are finite")
}

/// Ratio of largest to smallest singular value; infinite when singular.
pub fn condition_number(m: &DenseMatrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!("condition number needs a square matrix, got {:?}", m.shape())));
    }
    let sv = singular_values(m)?;
    let smin = *sv.last().expect("nonempty");
    Ok(if smin > 0.0 { sv[0] / smin } else { f64::INFINITY })
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DenseMatrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!("spectral radius needs a square matrix, got {:?}", m.shape())));
    }
    if m.rows() == 1 {
        return Ok(m.get(0, 0).abs());
    }
    let schur = nalgebra::Schur::try_new(m.to_nalgebra(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::InvalidInput("eigenvalue iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().fold(0.0_f64, |a, z| a.max(z.norm())))
}

/// Right side minus left side of the uniform smoothness inequality
/// `[½(‖a+b‖_p^p + ‖a−b‖_p^p)]^{2/p} ≤ ‖a‖_p² + (p−1)‖b‖_p²`.
///
/// Nonnegative for `p ≥ 2`, nonpositive for `1 ≤ p ≤ 2`, zero at `p = 2`.
pub fn smoothness_gap(a: &DenseMatrix, b: &DenseMatrix, p: f64) -> Result<f64> {
    let (lhs, rhs) = smoothness_sides(a, b, p)?;
    Ok(rhs - lhs)
}

/// `(left, right)` sides of the uniform smoothness inequality.
pub fn smoothness_sides(a: &DenseMatrix, b: &DenseMatrix, p: f64) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidParameter(format!("need finite p >= 1, got {p}")));
    }
    let norm_a = schatten_norm(a, p)?;
    let norm_b = schatten_norm(b, p)?;
    let plus = schatten_norm(&(a + b), p)?;
    let minus = schatten_norm(&(a - b), p)?;
    let top = plus.max(minus);
    let lhs = if top == 0.0 {
        0.0
    } else {
        let mean = 0.5 * ((plus / top).powf(p) + (minus / top).powf(p));
        top * top * mean.powf(2.0 / p)
    };
    let rhs = norm_a * norm_a + smoothness_constant(p) * norm_b * norm_b;
    Ok((lhs, rhs))
}

/// Smoothness gap for the 1×1 instance `a = 1`, `b = ε`, evaluated by a
/// truncated power series in `x = ε²` so the leading `(p−1)ε²` terms cancel
/// symbolically instead of in floating point.
///
/// Accurate for `|ε| ≤ 0.1`.
pub fn scalar_smoothness_gap_series(p: f64, eps: f64) -> f64 {
    const DEGREE: usize = 12;
    let x = eps * eps;
    // h(x) = ½((1+ε)^p + (1−ε)^p) − 1 = Σ_{k≥1} C(p, 2k) x^k
    let mut h = [0.0; DEGREE + 1];
    for (k, slot) in h.iter_mut().enumerate().skip(1) {
        *slot = binomial(p, 2 * k);
    }
    // g(h) = (1+h)^{2/p} − 1 = Σ_{j≥1} C(2/p, j) h^j, composed as a series in x.
    let alpha = 2.0 / p;
    let mut g = [0.0; DEGREE + 1];
    let mut power = [0.0; DEGREE + 1];
    power[0] = 1.0;
    for j in 1..=DEGREE {
        let mut next = [0.0; DEGREE + 1];
        for (a, &pa) in power.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (b, &hb) in h.iter().enumerate().skip(1) {
                if a + b > DEGREE {
                    break;
                }
                next[a + b] += pa * hb;
            }
        }
        power = next;
        let c = binomial(alpha, j);
        for k in 0..=DEGREE {
            g[k] += c * power[k];
        }
    }
    // gap = (p−1)x − g(x); the x¹ coefficient of g is exactly p−1.
    let mut gap = 0.0;
    for k in (2..=DEGREE).rev() {
        gap = gap * x + (-g[k]);
    }
    gap * x * x
}

/// Generalized binomial coefficient `C(a, k)` for real `a`.
fn binomial(a: f64, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (a - i as f64) / (i as f64 + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn singular_values_of_simple_matrices() {
        let d = DenseMatrix::diag(&[3.0, 4.0]).unwrap();
        let sv = singular_values(&d).unwrap();
        assert_relative_eq!(sv[0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(sv[1], 3.0, epsilon = 1e-12);

        let sv = singular_values(&DenseMatrix::identity(5)).unwrap();
        assert_eq!(sv.len(), 5);
        for s in sv {
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }

        // |u| = 2, |v| = 3
        let m = DenseMatrix::outer(&[2.0, 0.0, 0.0], &[0.0, 3.0, 0.0, 0.0]).unwrap();
        let sv = singular_values(&m).unwrap();
        assert_eq!(sv.len(), 3);
        assert_relative_eq!(sv[0], 6.0, epsilon = 1e-12);
        assert!(sv[1].abs() < 1e-12 && sv[2].abs() < 1e-12);
    }

    #[test]
    fn schatten_norm_examples() {
        let d = DenseMatrix::diag(&[3.0, 4.0]).unwrap();
        assert_relative_eq!(schatten_norm(&d, 2.0).unwrap(), 5.0, epsilon = 1e-12);
        assert_relative_eq!(schatten_norm(&d, SchattenOrder::Infinity).unwrap(), 4.0, epsilon = 1e-12);
        for &p in &[1.0, 1.5, 2.0, 3.7, 64.0, 65.0, 1000.0] {
            let dim = 7usize;
            let got = schatten_norm(&DenseMatrix::identity(dim), p).unwrap();
            assert_relative_eq!(got, (dim as f64).powf(1.0 / p), max_relative = 1e-12);
        }
        assert!(matches!(schatten_norm(&d, 0.5), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn large_order_does_not_overflow() {
        let d = DenseMatrix::diag(&[1e200, 1e200, 1e-310_f64.max(0.0)]).unwrap();
        let got = schatten_norm(&d, 500.0).unwrap();
        assert_relative_eq!(got, 1e200 * 2f64.powf(1.0 / 500.0), max_relative = 1e-12);
        let got = schatten_norm(&d, 10.0).unwrap();
        assert_relative_eq!(got, 1e200 * 2f64.powf(0.1), max_relative = 1e-12);
    }

    #[test]
    fn spectral_radius_examples() {
        let nil = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(spectral_radius(&nil).unwrap().abs() < 1e-12);
        assert_relative_eq!(spectral_norm(&nil), 1.0, epsilon = 1e-12);
        assert_relative_eq!(spectral_radius(&DenseMatrix::identity(4)).unwrap(), 1.0, epsilon = 1e-12);
        let d = DenseMatrix::diag(&[-2.0, 1.0]).unwrap();
        assert_relative_eq!(spectral_radius(&d).unwrap(), 2.0, epsilon = 1e-12);
        let rot = DenseMatrix::from_rows(&[vec![0.0, -2.0], vec![2.0, 0.0]]).unwrap();
        assert_relative_eq!(spectral_radius(&rot).unwrap(), 2.0, epsilon = 1e-12);
        assert!(spectral_radius(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn smoothness_gap_examples() {
        let a = DenseMatrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.1, 0.2], vec![-0.7, 0.4]]).unwrap();
        assert!(smoothness_gap(&a, &b, 2.0).unwrap().abs() < 1e-10);
        for &p in &[1.0, 1.5, 2.0, 3.0, 8.0] {
            let zero = DenseMatrix::zeros(2, 2);
            assert!(smoothness_gap(&a, &zero, p).unwrap().abs() < 1e-12);
        }
        assert!(smoothness_gap(&a, &b, 4.0).unwrap() >= 0.0);
        assert!(smoothness_gap(&a, &b, 1.5).unwrap() <= 0.0);
        assert!(smoothness_gap(&a, &DenseMatrix::zeros(1, 2), 3.0).is_err());
    }

    /// Independent closed form for p = 4:
    /// gap = 1 + 3ε² − sqrt(1 + 6ε² + ε⁴) = 8ε⁴ / (1 + 3ε² + sqrt(1 + 6ε² + ε⁴)).
    fn p4_gap_oracle(eps: f64) -> f64 {
        let e2 = eps * eps;
        8.0 * e2 * e2 / (1.0 + 3.0 * e2 + (1.0 + 6.0 * e2 + e2 * e2).sqrt())
    }

    #[test]
    fn scalar_sharpness_probe_p4() {
        let one = DenseMatrix::identity(1);
        for &eps in &[1e-2, 1e-3, 1e-4] {
            let oracle = p4_gap_oracle(eps);
            let series = scalar_smoothness_gap_series(4.0, eps);
            assert_relative_eq!(series, oracle, max_relative = 1e-12);
            assert!(series >= 0.0);
            // gap / ε² → 0
            assert!(series / (eps * eps) < 5.0 * eps * eps);
        }
        // Direct floating-point route agrees where cancellation is mild.
        let direct = smoothness_gap(&one, &DenseMatrix::diag(&[1e-2]).unwrap(), 4.0).unwrap();
        assert_relative_eq!(direct, p4_gap_oracle(1e-2), max_relative = 1e-6);
    }

    #[test]
    fn series_matches_direct_for_other_orders() {
        let one = DenseMatrix::identity(1);
        for &p in &[2.5, 3.0, 8.0, 16.0] {
            let eps = 0.05;
            let direct = smoothness_gap(&one, &DenseMatrix::diag(&[eps]).unwrap(), p).unwrap();
            let series = scalar_smoothness_gap_series(p, eps);
            assert_relative_eq!(series, direct, max_relative = 1e-7);
        }
        assert!(scalar_smoothness_gap_series(2.0, 1e-3).abs() < 1e-30);
    }
}

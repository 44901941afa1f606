//! Acceptance run: thirteen criteria, one pass/fail line each. Reference
//! values are recomputed here from first principles, independently of the
//! library code paths under test.

use std::io::Write;
use std::time::{Duration, Instant};

use matprod::rng::DEFAULT_SEED;
use matprod::run::CompareOutput;
use matprod::scenarios::{self, ScenarioReport, SCENARIOS};
use matprod::verify::{
    check_martingale_bound, check_number_inequality, check_subquadratic, check_uniform_smoothness, DominanceRow,
    Quantity, SubquadraticConstant,
};

const E: f64 = std::f64::consts::E;

type Criterion = (&'static str, fn() -> Outcome, Duration);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(f64::MIN_POSITIVE)
}

fn find_row<'a>(out: &'a CompareOutput, kind: &str, quantity: Quantity) -> &'a DominanceRow {
    out.report
        .rows
        .iter()
        .find(|r| r.bound_kind == kind && r.quantity == quantity)
        .unwrap_or_else(|| panic!("missing {kind} row"))
}

fn failed(report: &ScenarioReport) -> String {
    let list: Vec<String> =
        report.failed_checks().iter().map(|c| format!("{} ({} vs {})", c.name, c.value, c.limit)).collect();
    if list.is_empty() {
        String::new()
    } else {
        format!("; failed: {}", list.join(", "))
    }
}

/// Largest singular value of a 2×2 matrix `[[a, b], [c, d]]`.
fn norm2x2(m: [f64; 4]) -> f64 {
    let f2: f64 = m.iter().map(|x| x * x).sum();
    let det = m[0] * m[3] - m[1] * m[2];
    ((f2 + (f2 * f2 - 4.0 * det * det).max(0.0).sqrt()) / 2.0).sqrt()
}

fn mul2x2(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]]
}

fn lin2x2(terms: &[(f64, [f64; 4])]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (c, m) in terms {
        for k in 0..4 {
            out[k] += c * m[k];
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let reports =
        check_uniform_smoothness(&[1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 8.0, 16.0], 8, 10_000, DEFAULT_SEED).unwrap();
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let p2 = reports.iter().find(|r| r.name == "uniform-smoothness p=2").expect("p = 2 report");
    let per_p_ok = reports.iter().filter(|r| r.name.starts_with("uniform-smoothness")).all(|r| r.instances == 10_000);
    outcome(
        violations == 0 && p2.max_abs_margin <= 1e-10 && per_p_ok,
        format!("{} reports, {violations} violations, p=2 max |margin| {:.2e}", reports.len(), p2.max_abs_margin),
    )
}

fn criterion_2() -> Outcome {
    let mut violations = 0;
    for (i, (p, q)) in [(2.0, 2.0), (4.0, 2.0), (4.0, 4.0), (8.0, 2.0), (8.0, 8.0)].into_iter().enumerate() {
        let r = check_subquadratic(p, q, SubquadraticConstant::Sharp, 1000, DEFAULT_SEED + i as u64).unwrap();
        assert!(r.instances >= 1000);
        violations += r.violations;
    }
    let control = check_subquadratic(2.0, 2.0, SubquadraticConstant::Halved, 1000, DEFAULT_SEED).unwrap();
    outcome(
        violations == 0 && control.violations >= 1,
        format!("{violations} violations with C_p = p - 1; negative control found {} violations", control.violations),
    )
}

fn criterion_3() -> Outcome {
    let mut violations = 0;
    let mut equality = f64::NAN;
    for (i, (p, q)) in [(2.0, 2.0), (4.0, 2.0), (4.0, 4.0)].into_iter().enumerate() {
        let r = check_martingale_bound(p, q, 10, &[1, 2], 200, DEFAULT_SEED + i as u64).unwrap();
        violations += r.violations;
        if p == 2.0 {
            equality = r.max_abs_margin;
        }
    }
    // scalar orthogonality by hand: E(Σ ε_i a_i)² = Σ a_i²
    let a = [0.3, -1.2, 2.0, 0.7, -0.1];
    let n = a.len();
    let mut second = 0.0;
    for path in 0..(1u32 << n) {
        let s: f64 = a.iter().enumerate().map(|(i, x)| if path >> i & 1 == 1 { *x } else { -x }).sum();
        second += s * s / (1u32 << n) as f64;
    }
    let sum_sq: f64 = a.iter().map(|x| x * x).sum();
    let hand = ((second - sum_sq) / sum_sq).abs();
    outcome(
        violations == 0 && equality <= 1e-10 && hand <= 1e-10,
        format!("{violations} violations; p=q=2 equality gap {equality:.2e}, scalar hand gap {hand:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    let r = scenarios::exact_oracle_dominance(DEFAULT_SEED).unwrap();
    // outcomes 1.21, 0.99, 0.99, 0.81 with mean 1
    let exact = [1.21f64, 0.99, 0.99, 0.81].iter().map(|z| (z - 1.0).abs()).sum::<f64>() / 4.0;
    let bound = (0.02f64.exp() - 1.0).sqrt();
    let row = find_row(&r.comparisons[0], "concentration-moment", Quantity::Deviation);
    let oracle_ok = rel_close(row.exact.unwrap(), exact, 1e-12) && rel_close(row.bound, bound, 1e-12);
    let ratio = bound / exact;
    outcome(
        r.passed && oracle_ok && (ratio - 1.354).abs() <= 1e-3,
        format!(
            "hand instance exact {exact:.6} vs bound {bound:.6} (ratio {ratio:.4}){}",
            if r.passed { "; 100 random specs clean".to_string() } else { failed(&r) }
        ),
    )
}

fn criterion_5() -> Outcome {
    let r = scenarios::perturbation_scenario(DEFAULT_SEED).unwrap();
    let mc = &r.comparisons[0];
    let expectation = E * (0.005 * (1.0 + 2.0 * 10f64.ln())).sqrt();
    let row = find_row(mc, "expectation-concentration", Quantity::Deviation);
    let mut oracle_ok = rel_close(row.bound, expectation, 1e-12);
    for t in [0.5, 1.0, 2.0] {
        let tail = 10.0 * (-(t * t) / (2.0 * E * E * 0.005)).exp();
        let row = find_row(mc, "perturbation-tail-concentration", Quantity::DeviationTail { threshold: t });
        oracle_ok &= rel_close(row.bound, tail, 1e-12);
    }
    let ucl = row.empirical.map_or(f64::NAN, |e| e.ucl);
    outcome(
        r.passed && oracle_ok,
        format!("UCL {ucl:.4} vs expectation bound {expectation:.4}; tails at t = 0.5, 1, 2 dominated{}", failed(&r)),
    )
}

fn criterion_6() -> Outcome {
    let r = scenarios::triangular_rate(DEFAULT_SEED).unwrap();
    let reference = (1.0 + 2.0 * 5f64.ln()).sqrt() * E;
    let oracle_ok = r.triangular.iter().all(|row| rel_close(row.reference_bound, reference, 1e-12));
    let scaled: Vec<String> = r.triangular.iter().map(|row| format!("{:.3}", row.scaled_deviation)).collect();
    outcome(
        r.passed && oracle_ok && r.triangular.len() == 3,
        format!("sqrt(n)·mean = [{}] vs {reference:.4}{}", scaled.join(", "), failed(&r)),
    )
}

fn criterion_7() -> Outcome {
    let r = scenarios::kaczmarz_contraction(DEFAULT_SEED).unwrap();
    let m = (7.0f64 / 8.0).powf(25.0);
    let v: f64 = 50.0 * 7.0 / 8.0;
    let bound = (8.0 * v).sqrt() * m;
    let row = find_row(&r.comparisons[0], "contraction-concentration", Quantity::Deviation);
    let oracle_ok = rel_close(row.bound, bound, 1e-12);
    outcome(
        r.passed && oracle_ok,
        format!(
            "UCL {:.4} vs sqrt(dv)M = {bound:.4} (M = {m:.4}, v = {v}){}",
            row.empirical.map_or(f64::NAN, |e| e.ucl),
            failed(&r)
        ),
    )
}

fn criterion_8() -> Outcome {
    let r = scenarios::low_rank_improvement(DEFAULT_SEED).unwrap();
    let p = 2.0 * (1.0 + 100f64.ln());
    let low = ((p - 1.0) * 50.0 * 0.01).exp_m1().sqrt();
    let row = find_row(&r.comparisons[0], "low-rank-concentration", Quantity::Deviation);
    let full = find_row(&r.comparisons[0], "concentration-moment", Quantity::Deviation);
    let oracle_ok = rel_close(row.bound, low, 1e-10);
    outcome(
        r.passed && oracle_ok,
        format!(
            "low-rank bound {low:.4}, full bound {:.3e}, UCL {:.4}{}",
            full.bound,
            row.empirical.map_or(f64::NAN, |e| e.ucl),
            failed(&r)
        ),
    )
}

fn criterion_9() -> Outcome {
    let r = scenarios::inverse_products(DEFAULT_SEED).unwrap();
    let rr: f64 = 0.04;
    let penalty = rr * rr / (1.0 - rr);
    let xi_bar = 10.0 * (0.02 + penalty);
    let v_bar = 10.0 * (0.02 + 2.0 * penalty).powi(2);
    let growth = (xi_bar + (2.0 * v_bar * 4f64.ln()).sqrt()).exp();
    let row = find_row(&r.comparisons[0], "inverse-expectation-growth", Quantity::Norm);
    let oracle_ok = rel_close(row.bound, growth, 1e-12);
    outcome(
        r.passed && oracle_ok,
        format!(
            "(ξ̄, v̄) = ({xi_bar:.4}, {v_bar:.5}); E|Z^-1| UCL {:.4} vs {growth:.4}{}",
            row.empirical.map_or(f64::NAN, |e| e.ucl),
            failed(&r)
        ),
    )
}

fn criterion_10() -> Outcome {
    let r = scenarios::adapted_sign_flip(DEFAULT_SEED).unwrap();
    let (b, d, h, threshold) = ([1.0, 0.5, 0.0, -0.5], [0.3, 0.0, 0.2, 0.4], 0.1, 1.05);
    let id = [1.0, 0.0, 0.0, 1.0];
    // all 256 sign paths, tracking Z_i and F_i = E[Y_i | past] F_{i−1}
    let mut exact = 0.0;
    for path in 0..256u32 {
        let (mut z, mut f) = (id, id);
        for i in 0..8 {
            let s = if norm2x2(z) <= threshold { 1.0 } else { -1.0 };
            let e = if path >> i & 1 == 1 { 1.0 } else { -1.0 };
            let mean = lin2x2(&[(1.0, id), (h * s, b)]);
            let y = lin2x2(&[(1.0, mean), (h * e, d)]);
            z = mul2x2(y, z);
            f = mul2x2(mean, f);
        }
        exact += norm2x2(lin2x2(&[(1.0, z), (-1.0, f)])) / 256.0;
    }
    let m = norm2x2(lin2x2(&[(1.0, id), (h, b)])).max(norm2x2(lin2x2(&[(1.0, id), (-h, b)])));
    let dev = h * norm2x2(d) / m;
    let bound = (8.0 * dev * dev).exp_m1().sqrt() * 2f64.sqrt() * m.powi(8);
    let row = find_row(&r.comparisons[0], "adapted-concentration-moment", Quantity::Deviation);
    let oracle_ok = rel_close(row.exact.unwrap(), exact, 1e-12) && rel_close(row.bound, bound, 1e-12);
    outcome(
        r.passed && oracle_ok,
        format!("exact E|Z - F| = {exact:.6} vs bound {bound:.6} over 256 paths{}", failed(&r)),
    )
}

fn criterion_11() -> Outcome {
    let r = scenarios::spectral_radius_conjugation(DEFAULT_SEED).unwrap();
    // triangular factors: ϱ(Z) = max(Π a_i, Π b_i) = Π a_i, so E ϱ = ((0.7 + 0.5)/2)^10
    let radius = 0.6f64.powi(10);
    let rows: Vec<&DominanceRow> =
        r.comparisons[0].report.rows.iter().filter(|x| x.bound_kind == "spectral-radius-expectation").collect();
    let oracle_ok = rows.iter().all(|x| rel_close(x.exact.unwrap(), radius, 1e-12));
    outcome(
        r.passed && oracle_ok,
        format!(
            "E rho = {radius:.6}; bound {:.4} (S = I) vs {:.4} (S = diag(1, 0.1)){}",
            rows[0].bound,
            rows[1].bound,
            failed(&r)
        ),
    )
}

fn criterion_12() -> Outcome {
    let r = check_number_inequality(100_000, DEFAULT_SEED, (1, 50)).unwrap();
    outcome(
        r.violations == 0 && r.instances == 100_000,
        format!("{} sequences, {} violations", r.instances, r.violations),
    )
}

fn criterion_13() -> Outcome {
    let mut mismatched = Vec::new();
    for (name, f) in SCENARIOS {
        let a = serde_json::to_vec(&f(DEFAULT_SEED).unwrap()).unwrap();
        let b = serde_json::to_vec(&f(DEFAULT_SEED).unwrap()).unwrap();
        if a != b {
            mismatched.push(name);
        }
    }
    outcome(mismatched.is_empty(), format!("{} scenarios run twice; mismatches: {mismatched:?}", SCENARIOS.len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 13] = [
        ("uniform smoothness", criterion_1, Duration::from_secs(30)),
        ("subquadratic averages", criterion_2, Duration::from_secs(60)),
        ("martingale bound", criterion_3, Duration::from_secs(30)),
        ("exact-oracle dominance", criterion_4, Duration::from_secs(120)),
        ("perturbation scenario", criterion_5, Duration::from_secs(300)),
        ("triangular-array rate", criterion_6, Duration::from_secs(300)),
        ("contraction bounds", criterion_7, Duration::from_secs(180)),
        ("low-rank improvement", criterion_8, Duration::from_secs(180)),
        ("inverse products", criterion_9, Duration::from_secs(120)),
        ("adapted sequences", criterion_10, Duration::from_secs(30)),
        ("spectral radius", criterion_11, Duration::from_secs(60)),
        ("exponential-sum inequality", criterion_12, Duration::from_secs(10)),
        ("determinism", criterion_13, Duration::from_secs(600)),
    ];
    let mut failures = Vec::new();
    let mut err = std::io::stderr().lock();
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let passed = o.passed && elapsed <= *limit;
        let line = format!(
            "criterion {:>2} {:<28} {}  [{:.1}s / {}s] {}\n",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            o.detail
        );
        // written directly so the lines survive output capture
        let _ = err.write_all(line.as_bytes());
        if !passed {
            failures.push(i + 1);
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}

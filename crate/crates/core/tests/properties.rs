use matprod::bounds::{concentration_moment_bound, growth_moment_bound, ln_expm1, InitialMatrix, ProductStats};
use matprod::ensembles::FactorStats;
use matprod::matrix::DenseMatrix;
use matprod::rng::{orthogonal_matrix, stream};
use matprod::schatten::{schatten_norm, singular_values, smoothness_gap, spectral_norm, spectral_radius};
use matprod::stats::{cp_lower, cp_upper, TailEstimate};
use proptest::prelude::*;

fn matrix(max_dim: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |data| DenseMatrix::new(r, c, data).unwrap())
    })
}

fn square_pair(max_dim: usize) -> impl Strategy<Value = (DenseMatrix, DenseMatrix)> {
    (1..=max_dim).prop_flat_map(|d| {
        let entries = prop::collection::vec(-5.0f64..5.0, d * d);
        (entries.clone(), entries)
            .prop_map(move |(a, b)| (DenseMatrix::new(d, d, a).unwrap(), DenseMatrix::new(d, d, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn schatten_two_is_frobenius(a in matrix(5)) {
        let s2 = schatten_norm(&a, 2.0).unwrap();
        prop_assert!((s2 - a.frobenius_norm()).abs() <= 1e-12 * (1.0 + s2));
    }

    #[test]
    fn schatten_norms_decrease_in_p(a in matrix(5), p in 1.0f64..6.0, dp in 0.0f64..6.0) {
        let lo = schatten_norm(&a, p + dp).unwrap();
        let hi = schatten_norm(&a, p).unwrap();
        let top = spectral_norm(&a);
        prop_assert!(lo <= hi * (1.0 + 1e-12) + 1e-300);
        prop_assert!(top <= lo * (1.0 + 1e-12) + 1e-300);
        let rank = a.rows().min(a.cols()) as f64;
        prop_assert!(hi <= rank.powf(1.0 / p) * top * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn schatten_triangle_inequality((a, b) in square_pair(4), p in 1.0f64..10.0) {
        let sum = schatten_norm(&(&a + &b), p).unwrap();
        let bound = schatten_norm(&a, p).unwrap() + schatten_norm(&b, p).unwrap();
        prop_assert!(sum <= bound * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn schatten_orthogonal_invariance(a in matrix(4), p in 1.0f64..8.0, seed in any::<u64>()) {
        let mut rng = stream(seed, 0);
        let u = orthogonal_matrix(&mut rng, a.rows());
        let v = orthogonal_matrix(&mut rng, a.cols());
        let rotated = &(&u * &a) * &v;
        let x = schatten_norm(&a, p).unwrap();
        let y = schatten_norm(&rotated, p).unwrap();
        prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x));
    }

    #[test]
    fn schatten_holder_with_spectral((a, b) in square_pair(4), p in 1.0f64..8.0) {
        let ab = schatten_norm(&(&a * &b), p).unwrap();
        prop_assert!(ab <= spectral_norm(&a) * schatten_norm(&b, p).unwrap() * (1.0 + 1e-10) + 1e-10);
    }

    #[test]
    fn singular_values_sorted_and_match_transpose(a in matrix(5)) {
        let s = singular_values(&a).unwrap();
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|x| *x >= 0.0));
        let t = singular_values(&a.transpose()).unwrap();
        for (x, y) in s.iter().zip(&t) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + s[0]));
        }
    }

    #[test]
    fn spectral_radius_below_norm((a, _) in square_pair(5)) {
        prop_assert!(spectral_radius(&a).unwrap() <= spectral_norm(&a) * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn smoothness_gap_sign((a, b) in square_pair(3), p in 2.0f64..12.0, r in 1.0f64..2.0) {
        let scale = 1.0 + schatten_norm(&a, p).unwrap().powi(2) + schatten_norm(&b, p).unwrap().powi(2);
        prop_assert!(smoothness_gap(&a, &b, p).unwrap() >= -1e-10 * scale);
        let scale = 1.0 + schatten_norm(&a, r).unwrap().powi(2) + schatten_norm(&b, r).unwrap().powi(2);
        prop_assert!(smoothness_gap(&a, &b, r).unwrap() <= 1e-10 * scale);
    }

    #[test]
    fn json_and_csv_round_trip(a in matrix(6)) {
        prop_assert_eq!(DenseMatrix::from_json(&a.to_json().unwrap()).unwrap(), a.clone());
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        prop_assert_eq!(DenseMatrix::read_csv(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn clopper_pearson_brackets_frequency(trials in 1usize..5000, frac in 0.0f64..=1.0) {
        let hits = ((trials as f64) * frac).floor() as usize;
        let t = TailEstimate::new(1.0, hits, trials);
        prop_assert!(t.ci_low <= t.frequency && t.frequency <= t.ci_high);
        prop_assert!(t.lcl <= t.frequency && t.frequency <= t.ucl);
        prop_assert!(t.ci_low <= t.lcl && t.ucl <= t.ci_high);
        if hits < trials {
            prop_assert!(cp_upper(hits, trials, 0.01) <= cp_upper(hits + 1, trials, 0.01));
            prop_assert!(cp_lower(hits, trials, 0.01) <= cp_lower(hits + 1, trials, 0.01));
        }
    }

    #[test]
    fn ln_expm1_matches_direct(a in 1e-8f64..50.0) {
        let direct = a.exp_m1().ln();
        prop_assert!((ln_expm1(a) - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn moment_bounds_square_sum(
        factors in prop::collection::vec((0.1f64..3.0, 0.0f64..0.5), 1..20),
        d in 1usize..6,
        p in 2.0f64..10.0,
    ) {
        let stats: Vec<FactorStats> = factors
            .iter()
            .map(|&(m, sigma)| FactorStats { sigma, ..FactorStats::deterministic(m) })
            .collect();
        let s = ProductStats::from_factors(d, InitialMatrix::Identity(d), &stats, 2.0).unwrap();
        let growth = growth_moment_bound(&s, p, 2.0).unwrap().value;
        let conc = concentration_moment_bound(&s, p, 2.0).unwrap().value;
        let m: f64 = factors.iter().map(|f| f.0).product();
        let base = m * (d as f64).powf(1.0 / p);
        prop_assert!(growth >= base * (1.0 - 1e-12));
        // at q = 2: growth² = base² + concentration²
        prop_assert!((growth * growth - base * base - conc * conc).abs() <= 1e-9 * growth * growth);
    }
}

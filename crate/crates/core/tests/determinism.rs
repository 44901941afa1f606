use matprod::config::{parse, SpecConfig};
use matprod::presets;
use matprod::simulate::simulate_product;

const SPEC: &str = r#"{
    "factors": [
        {"repeat": 6, "ensemble": {"kind": "gaussian-perturbation", "dim": 3, "scale": 0.5, "n_scale": 6}},
        {"repeat": 4, "ensemble": {"kind": "rademacher-rank-one", "dim": 3}}
    ]
}"#;

fn products(threads: usize, seed: u64) -> Vec<Vec<f64>> {
    let spec = parse::<SpecConfig>(SPEC).unwrap().build().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let run = pool.install(|| simulate_product(&spec, 300, seed)).unwrap();
    run.trials.into_iter().map(|t| t.value.data().to_vec()).collect()
}

#[test]
fn trials_do_not_depend_on_thread_count() {
    let one = products(1, 5);
    assert_eq!(one.len(), 300);
    assert_eq!(one, products(4, 5));
    assert_ne!(one, products(1, 6));
}

#[test]
fn trial_streams_are_prefix_stable() {
    let spec = parse::<SpecConfig>(SPEC).unwrap().build().unwrap();
    let short = simulate_product(&spec, 50, 9).unwrap();
    let long = simulate_product(&spec, 300, 9).unwrap();
    for (a, b) in short.trials.iter().zip(&long.trials) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn preset_runs_repeat_exactly() {
    let p = presets::find("kaczmarz").unwrap();
    let run = |seed: &str| {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = matprod::cli::run(
            ["matprod", "compare", "--preset", p.name, "--trials", "3000", "--seed", seed],
            &mut out,
            &mut err,
        );
        (code, out)
    };
    assert_eq!(run("1"), run("1"));
}

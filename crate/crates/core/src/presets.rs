//! Named configuration templates shipped with the crate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    /// Subcommand the template is written for.
    pub command: &'static str,
    pub summary: &'static str,
    pub text: &'static str,
}

macro_rules! preset {
    ($name:literal, $command:literal, $summary:literal) => {
        Preset {
            name: $name,
            command: $command,
            summary: $summary,
            text: include_str!(concat!("../presets/", $name, ".json")),
        }
    };
}

pub const PRESETS: &[Preset] = &[
    preset!(
        "scalar-demo",
        "compare",
        "scalar two-point factors 1 ± 0.1, n = 2, exact moments against the moment bounds"
    ),
    preset!("scalar-exact", "simulate", "scalar two-point factors 1 ± 0.1, n = 2, exact enumeration"),
    preset!("deterministic", "compare", "deterministic factors 1.5·I, where the growth bound is attained"),
    preset!(
        "identity-perturbation",
        "compare",
        "d = 10, n = 200 two-point perturbations of the identity, b = 1, zero mean"
    ),
    preset!("identity-perturbation-bound", "bound", "growth and concentration tails for perturbations of the identity"),
    preset!("triangular-array", "bound", "triangular-array deviation bounds with T = 0, L = 1, d = 5"),
    preset!("v-zero", "bound", "moment bounds with zero variance"),
    preset!("rank-one", "compare", "rank-one Rademacher factors at d = 100 applied to a unit vector"),
    preset!("kaczmarz", "compare", "random coordinate projections in d = 8, n = 50"),
    preset!("inverse", "compare", "inverses of ten perturbations of the identity in d = 4"),
    preset!("adapted-sign-flip", "compare", "history-dependent two-point factors, exact over 256 paths"),
    preset!("spectral-radius", "compare", "upper-triangular factors with and without a diagonal similarity"),
];

pub fn find(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        Error::InvalidInput(format!("unknown preset {name:?}; available: {}", names.join(", ")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse, BoundConfig, CompareConfig, SimulateConfig};

    #[test]
    fn every_preset_parses_for_its_command() {
        for p in PRESETS {
            let ok = match p.command {
                "compare" => parse::<CompareConfig>(p.text).map(|c| c.spec.build().map(|_| ())),
                "simulate" => parse::<SimulateConfig>(p.text).map(|c| c.spec.build().map(|_| ())),
                "bound" => parse::<BoundConfig>(p.text).map(|_| Ok(())),
                other => panic!("unexpected command {other}"),
            };
            assert!(matches!(ok, Ok(Ok(()))), "{}: {ok:?}", p.name);
        }
        assert!(find("nope").is_err());
    }
}

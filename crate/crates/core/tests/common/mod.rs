#![allow(dead_code)]

use clap::Parser;
use funnel_equity::cli::{execute, Cli};
use funnel_equity::synth::{PopulationSpec, StratumSpec};

/// Two-layer population over one covariate `segment` with strata `A` and `B`.
/// Counts are `[focal, reference]` per stratum, rates are per stratum.
pub fn two_strata(
    seed: u64,
    counts: [[u64; 2]; 2],
    focal_rates: [f64; 2],
    reference_rates: [f64; 2],
) -> PopulationSpec {
    PopulationSpec {
        seed,
        layers: vec!["base".into(), "next".into()],
        covariates: vec!["segment".into()],
        focal_label: "focal".into(),
        reference_label: "reference".into(),
        strata: ["A", "B"]
            .iter()
            .enumerate()
            .map(|(i, key)| StratumSpec {
                key: vec![(*key).into()],
                focal_count: counts[i][0],
                reference_count: counts[i][1],
                focal_conversion: vec![focal_rates[i]],
                reference_conversion: vec![reference_rates[i]],
            })
            .collect(),
    }
}

/// Delta-method standard error of the adjusted ratio for the first
/// transition, from the spec's true parameters. Base counts are fixed, so
/// the stratum shares are constants.
pub fn oracle_ratio_se(spec: &PopulationSpec) -> f64 {
    let m: f64 = spec.total_units() as f64;
    let (mut p, mut var_p, mut q, mut var_q) = (0.0, 0.0, 0.0, 0.0);
    for s in &spec.strata {
        let a = (s.focal_count + s.reference_count) as f64 / m;
        let (ps, qs) = (s.focal_conversion[0], s.reference_conversion[0]);
        p += a * ps;
        q += a * qs;
        var_p += a * a * ps * (1.0 - ps) / s.focal_count as f64;
        var_q += a * a * qs * (1.0 - qs) / s.reference_count as f64;
    }
    (p / q) * (var_p / (p * p) + var_q / (q * q)).sqrt()
}

/// Kolmogorov-Smirnov statistic of a sample against Uniform(0, 1).
pub fn ks_uniform(sample: &[f64]) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            (x - i as f64 / n).max((i + 1) as f64 / n - x)
        })
        .fold(0.0, f64::max)
}

pub struct CliRun {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run_cli(args: &[&str]) -> CliRun {
    let cli = Cli::try_parse_from(std::iter::once("funnel-equity").chain(args.iter().copied()))
        .unwrap_or_else(|e| panic!("bad arguments {args:?}: {e}"));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = execute(&cli, &mut out, &mut err);
    CliRun {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub const SEGMENT_CONFIG: &str = r#"
[funnel]
layers = ["base", "next"]

[groups]
focal = "focal"
reference = "reference"

[[covariates]]
name = "segment"
kind = "categorical"
"#;

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::HashSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use funnel_equity::analysis::{analyze_counts, analyze_experiment, analyze_units};
use funnel_equity::cem::{cem_weights, coarsen, stratify_and_prune};
use funnel_equity::inference::log_sr_variance;
use funnel_equity::ingest::{load_units, ColumnMapping, UnitFormat};
use funnel_equity::metrics::FunnelCounts;
use funnel_equity::model::{
    AnalysisConfig, CovariateSpec, CovariateValue, FunnelSpec, GroupRole, UnitRecord,
};
use funnel_equity::report::{render_funnel_table, RenderOptions};
use funnel_equity::status::{classify, Status, ThresholdProfile};
use funnel_equity::synth::{self, PopulationSpec, StratumSpec};

use common::{ks_uniform, oracle_ratio_se, run_cli, two_strata, SEGMENT_CONFIG};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(elapsed: Duration, budget_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < budget_s, || {
        format!("took {:.2} s, budget {budget_s} s", elapsed.as_secs_f64())
    })
}

fn contributor_funnel_reproduction() -> Outcome {
    let start = Instant::now();
    const M: u64 = 1_000_000;
    let layers = ["Active Users", "Contributors", "Contributors with Response"];
    let funnel = FunnelSpec::new(layers).map_err(|e| e.to_string())?;
    let config = AnalysisConfig::new(funnel, "Female", "Male").map_err(|e| e.to_string())?;
    let counts = FunnelCounts::new(
        layers.iter().map(|s| s.to_string()).collect(),
        vec![100 * M, 15 * M, 5 * M],
        vec![150 * M, 25 * M, 10 * M],
    )
    .map_err(|e| e.to_string())?;
    let analysis = analyze_counts(&config, &counts, 0).map_err(|e| e.to_string())?;
    let table = &analysis.table;
    let expected_raw = [66.7, 60.0, 50.0];
    let expected_norm = [100.0, 90.0, 75.0];
    let expected_surv = [90.0, 83.3];
    let close = |got: f64, want: f64| (got * 100.0 - want).abs() <= 0.05;
    for (k, layer) in table.layers.iter().enumerate() {
        ensure(close(layer.raw_ratio, expected_raw[k]), || {
            format!("raw ratio at layer {k}: {}", layer.raw_ratio)
        })?;
        ensure(close(layer.normalized_ratio, expected_norm[k]), || {
            format!("normalized ratio at layer {k}: {}", layer.normalized_ratio)
        })?;
    }
    for (t, tr) in table.transitions.iter().enumerate() {
        ensure(close(tr.survival_ratio, expected_surv[t]), || {
            format!("survival ratio at transition {t}: {}", tr.survival_ratio)
        })?;
    }
    let text = render_funnel_table(table, &RenderOptions::default()).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = text.lines().skip(1).collect();
    for (row, cells) in rows.iter().zip([
        ["66.7%", "100.0%", "n.a."],
        ["60.0%", "90.0%", "90.0%"],
        ["50.0%", "75.0%", "83.3%"],
    ]) {
        for cell in cells {
            ensure(row.contains(cell), || {
                format!("rendered row {row:?} lacks {cell}")
            })?;
        }
    }
    within_budget(start.elapsed(), 1.0)?;
    Ok("raw 66.7/60.0/50.0, normalized 100/90/75, survival n.a./90.0/83.3".into())
}

fn segment_config(layers: &[&str]) -> AnalysisConfig {
    AnalysisConfig::new(FunnelSpec::new(layers.iter().copied()).unwrap(), "f", "r")
        .unwrap()
        .with_covariates(vec![CovariateSpec::categorical("segment")])
        .unwrap()
}

fn weight_conservation() -> Outcome {
    let start = Instant::now();
    let config = segment_config(&["base", "next"]);
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n_strata = rng.random_range(1..=50usize);
        let mut units = Vec::new();
        for s in 0..n_strata {
            // Stratum 0 always holds both groups so matching is possible.
            let lo = usize::from(s == 0);
            for (label, count) in [
                ("f", rng.random_range(lo..=100)),
                ("r", rng.random_range(lo..=100)),
            ] {
                for i in 0..count {
                    units.push(UnitRecord {
                        unit_id: format!("{trial}-{s}-{label}-{i}"),
                        group: label.into(),
                        covariates: vec![CovariateValue::Categorical(format!("s{s}"))],
                        layer_reached: vec![true, rng.random_bool(0.4)],
                    });
                }
            }
        }
        let keys = coarsen(&units, &config.covariates).map_err(|e| e.to_string())?;
        let strata = stratify_and_prune(&keys, &units, &config, 0).map_err(|e| e.to_string())?;
        let weights = cem_weights(&strata);
        ensure(weights.len() == units.len(), || {
            format!(
                "trial {trial}: {} weights for {} units",
                weights.len(),
                units.len()
            )
        })?;
        let unmatched: HashSet<&str> = strata
            .strata
            .values()
            .filter(|s| !s.matched())
            .flat_map(|s| s.focal.iter().chain(&s.reference))
            .map(|m| m.unit_id.as_str())
            .collect();
        let (mut sum_f, mut sum_r) = (0.0, 0.0);
        for w in &weights {
            if unmatched.contains(w.unit_id.as_str()) {
                ensure(w.weight == 0.0, || {
                    format!(
                        "trial {trial}: unmatched unit '{}' weighs {}",
                        w.unit_id, w.weight
                    )
                })?;
            }
            match w.role {
                GroupRole::Focal => sum_f += w.weight,
                GroupRole::Reference => sum_r += w.weight,
            }
        }
        let rel_f = (sum_f - strata.m_focal as f64).abs() / strata.m_focal as f64;
        let rel_r = (sum_r - strata.m_reference as f64).abs() / strata.m_reference as f64;
        worst = worst.max(rel_f).max(rel_r);
        ensure(rel_f <= 1e-9 && rel_r <= 1e-9, || {
            format!(
                "trial {trial}: sums {sum_f}/{sum_r} vs m {}/{}",
                strata.m_focal, strata.m_reference
            )
        })?;
    }
    within_budget(start.elapsed(), 10.0)?;
    Ok(format!(
        "1000 configurations, worst relative error {worst:.1e}"
    ))
}

fn single_stratum_collapse() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let rate =
            |rng: &mut ChaCha20Rng| vec![rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)];
        let spec = PopulationSpec {
            seed: trial,
            layers: vec!["a".into(), "b".into(), "c".into()],
            covariates: vec![],
            focal_label: "f".into(),
            reference_label: "r".into(),
            strata: vec![StratumSpec {
                key: vec![],
                focal_count: rng.random_range(500..=5000),
                reference_count: rng.random_range(500..=5000),
                focal_conversion: rate(&mut rng),
                reference_conversion: rate(&mut rng),
            }],
        };
        let units = synth::generate(&spec).map_err(|e| e.to_string())?.units;
        let config = spec.analysis_config().map_err(|e| e.to_string())?;
        let analysis = analyze_units(&config, &units, trial).map_err(|e| e.to_string())?;
        for tr in &analysis.table.transitions {
            let adjusted = tr.adjusted.as_ref().ok_or("missing adjusted ratio")?.point;
            let rel = (adjusted - tr.survival_ratio).abs() / tr.survival_ratio;
            worst = worst.max(rel);
            ensure(rel <= 1e-12, || {
                format!(
                    "trial {trial}: adjusted {adjusted} vs unadjusted {}",
                    tr.survival_ratio
                )
            })?;
        }
    }
    Ok(format!("100 populations, worst relative gap {worst:.1e}"))
}

fn confounding_removal() -> Outcome {
    let start = Instant::now();
    // Identical rates per stratum; focal units concentrate in the high-rate stratum.
    let spec = two_strata(
        1,
        [[40_000, 10_000], [10_000, 40_000]],
        [1.0, 0.9],
        [1.0, 0.9],
    );
    let units = synth::generate(&spec).map_err(|e| e.to_string())?.units;
    let config = spec.analysis_config().map_err(|e| e.to_string())?;
    let analysis = analyze_units(&config, &units, 0).map_err(|e| e.to_string())?;
    let tr = &analysis.table.transitions[0];
    let unadjusted = tr.survival_ratio;
    let adjusted = tr.adjusted.as_ref().ok_or("missing adjusted ratio")?.point;
    ensure((unadjusted - 1.0).abs() >= 0.05, || {
        format!("unadjusted {unadjusted:.4} within 5% of parity")
    })?;
    ensure((0.995..=1.005).contains(&adjusted), || {
        format!("adjusted {adjusted:.5} outside [0.995, 1.005]")
    })?;
    within_budget(start.elapsed(), 30.0)?;
    Ok(format!(
        "n={}, unadjusted {unadjusted:.4}, adjusted {adjusted:.5}",
        units.len()
    ))
}

fn oracle_equivalence() -> Outcome {
    let base = two_strata(0, [[3000, 2000], [2000, 3000]], [0.30, 0.55], [0.35, 0.45]);
    let oracle = synth::oracle_adjusted_ratio(&base, 0).map_err(|e| e.to_string())?;
    let se = oracle_ratio_se(&base);
    let config = base.analysis_config().map_err(|e| e.to_string())?;
    let results: Vec<Result<bool, String>> = (0..300u64)
        .into_par_iter()
        .map(|r| {
            let spec = PopulationSpec {
                seed: 10_000 + r,
                ..base.clone()
            };
            let units = synth::generate(&spec).map_err(|e| e.to_string())?.units;
            let analysis = analyze_units(&config, &units, r).map_err(|e| e.to_string())?;
            let point = analysis.table.transitions[0]
                .adjusted
                .as_ref()
                .map(|a| a.point)
                .ok_or("missing")?;
            Ok((point - oracle).abs() <= 3.0 * se)
        })
        .collect();
    let hits = results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .filter(|h| **h)
        .count();
    let frac = hits as f64 / 300.0;
    ensure(frac >= 0.99, || {
        format!("{hits}/300 within 3 SE of oracle {oracle:.4}")
    })?;
    Ok(format!(
        "{hits}/300 within 3 SE (oracle {oracle:.4}, SE {se:.4})"
    ))
}

fn katz_variance_validity() -> Outcome {
    let grid = [0.1, 0.3, 0.5, 0.9];
    let cases: Vec<(f64, f64, u64)> = grid
        .iter()
        .flat_map(|&p| grid.iter().map(move |&q| (p, q)))
        .flat_map(|(p, q)| [1_000u64, 10_000].map(|n| (p, q, n)))
        .collect();
    let results: Vec<(f64, f64, u64, f64, f64)> = cases
        .par_iter()
        .enumerate()
        .map(|(i, &(p, q, n))| {
            let mut rng = ChaCha20Rng::seed_from_u64(600 + i as u64);
            let (bp, bq) = (Binomial::new(n, p).unwrap(), Binomial::new(n, q).unwrap());
            let draws = 100_000;
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..draws {
                let x = bp.sample(&mut rng) as f64;
                let y = bq.sample(&mut rng) as f64;
                let v = (x / y).ln();
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / draws as f64;
            let empirical = (sum_sq - draws as f64 * mean * mean) / (draws - 1) as f64;
            let analytic = log_sr_variance(p, n as f64, q, n as f64).unwrap();
            (p, q, n, analytic, empirical)
        })
        .collect();
    let mut worst = 0.0f64;
    for (p, q, n, analytic, empirical) in results {
        let rel = (analytic - empirical).abs() / empirical;
        worst = worst.max(rel);
        ensure(rel <= 0.10, || {
            format!("p={p} q={q} n={n}: analytic {analytic:.3e} vs empirical {empirical:.3e}")
        })?;
    }
    Ok(format!(
        "32 cases, worst relative gap {:.1}%",
        worst * 100.0
    ))
}

fn ci_coverage() -> Outcome {
    let base = two_strata(0, [[6000, 4000], [4000, 6000]], [0.30, 0.40], [0.32, 0.38]);
    let truth = synth::oracle_adjusted_ratio(&base, 0).map_err(|e| e.to_string())?;
    let config = base.analysis_config().map_err(|e| e.to_string())?;
    let covered: Vec<Result<bool, String>> = (0..1000u64)
        .into_par_iter()
        .map(|r| {
            let spec = PopulationSpec {
                seed: 20_000 + r,
                ..base.clone()
            };
            let units = synth::generate(&spec).map_err(|e| e.to_string())?.units;
            let analysis = analyze_units(&config, &units, r).map_err(|e| e.to_string())?;
            let est = analysis.table.transitions[0]
                .adjusted
                .clone()
                .ok_or("missing")?;
            Ok(est.ci_low <= truth && truth <= est.ci_high)
        })
        .collect();
    let hits = covered
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .filter(|c| **c)
        .count();
    let coverage = hits as f64 / 1000.0;
    ensure((0.93..=0.97).contains(&coverage), || {
        format!("coverage {:.1}% outside 95 +/- 2 pp", coverage * 100.0)
    })?;
    Ok(format!(
        "coverage {:.1}% over 1000 replications",
        coverage * 100.0
    ))
}

fn null_uniformity() -> Outcome {
    let base = two_strata(0, [[6000, 4000], [4000, 6000]], [0.30, 0.40], [0.32, 0.38]);
    let config = base.analysis_config().map_err(|e| e.to_string())?;
    let p_values: Vec<Result<f64, String>> = (0..1000u64)
        .into_par_iter()
        .map(|r| {
            let arm = |seed| {
                synth::generate(&PopulationSpec {
                    seed,
                    ..base.clone()
                })
                .map(|g| g.units)
                .map_err(|e| e.to_string())
            };
            let (treatment, control) = (arm(30_000 + 2 * r)?, arm(30_001 + 2 * r)?);
            let report =
                analyze_experiment(&config, &treatment, &control, r).map_err(|e| e.to_string())?;
            Ok(report.comparisons[0].survival.p_value)
        })
        .collect();
    let p_values = p_values.into_iter().collect::<Result<Vec<_>, _>>()?;
    let ks = ks_uniform(&p_values);
    ensure(ks <= 0.05, || format!("KS statistic {ks:.4} > 0.05"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("config.toml");
    let units = dir.path().join("units.csv");
    fs::write(&cfg, SEGMENT_CONFIG).map_err(|e| e.to_string())?;
    let spec = two_strata(5, [[300, 200], [200, 300]], [0.3, 0.4], [0.35, 0.4]);
    let generated = synth::generate(&spec).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    synth::write_units_csv(&mut buf, &spec.covariates, &spec.layers, &generated.units)
        .map_err(|e| e.to_string())?;
    fs::write(&units, buf).map_err(|e| e.to_string())?;
    let (cfg, units) = (cfg.to_str().unwrap(), units.to_str().unwrap());
    let run = run_cli(&[
        "abtest",
        "--config",
        cfg,
        "--treatment",
        units,
        "--control",
        units,
    ]);
    ensure(run.code == 0, || {
        format!("abtest exit {}: {}", run.code, run.stderr)
    })?;
    ensure(run.stdout.contains("(0.0%, 1.00)**"), || {
        format!("identical arms printed:\n{}", run.stdout)
    })?;
    Ok(format!(
        "KS statistic {ks:.4}; identical arms print lift 0.0%, p 1.00"
    ))
}

fn color_coding() -> Outcome {
    let cases = [
        (ThresholdProfile::strict(), [0.995, 0.95, 0.85]),
        (ThresholdProfile::middle(), [0.98, 0.90, 0.80]),
        (ThresholdProfile::loose(), [0.97, 0.85, 0.75]),
    ];
    let mut checked = 0;
    for (profile, [green, yellow, red]) in cases {
        for (sr, want) in [
            (green, Status::Green),
            (yellow, Status::Yellow),
            (red, Status::Red),
        ] {
            for v in [sr, 2.0 - sr] {
                let got = classify(v, &profile);
                ensure(got == want, || {
                    format!("{profile}: {v} -> {got}, expected {want}")
                })?;
                checked += 1;
            }
        }
        for threshold in [profile.green_below, profile.red_above] {
            for v in [1.0 - threshold / 100.0, 1.0 + threshold / 100.0] {
                let got = classify(v, &profile);
                ensure(got == Status::Yellow, || {
                    format!("{profile}: boundary {v} -> {got}")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "9 profile x band combinations, {checked} values incl. boundaries"
    ))
}

fn round_trip_and_determinism() -> Outcome {
    let mut spec = two_strata(11, [[400, 250], [150, 500]], [0.5, 0.2], [0.45, 0.25]);
    spec.layers.push("last".into());
    for s in &mut spec.strata {
        s.focal_conversion.push(0.6);
        s.reference_conversion.push(0.5);
    }
    let generated = synth::generate(&spec).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    synth::write_units_csv(&mut buf, &spec.covariates, &spec.layers, &generated.units)
        .map_err(|e| e.to_string())?;
    let config = spec.analysis_config().map_err(|e| e.to_string())?;
    let mapping = ColumnMapping::default_for(&config);
    let back = load_units(buf.as_slice(), UnitFormat::Csv, &mapping, &config)
        .map_err(|e| e.to_string())?;
    ensure(back == generated.units, || {
        "ingested units differ from generated units".into()
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    fs::write(
        path("spec.toml"),
        toml::to_string(&spec).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let config_text = r#"
[funnel]
layers = ["base", "next", "last"]

[groups]
labels = ["focal", "reference"]

[[covariates]]
name = "segment"
kind = "categorical"

[inference]
ci_method = "bootstrap"
bootstrap_resamples = 300
"#;
    fs::write(path("config.toml"), config_text).map_err(|e| e.to_string())?;
    let mut invocations = 0;
    for round in 0..2 {
        let units = path(&format!("units{round}.csv"));
        let gen = run_cli(&["generate", "--spec", &path("spec.toml"), "--out", &units]);
        ensure(gen.code == 0, || format!("generate failed: {}", gen.stderr))?;
        let gen_stdout = gen.stdout.replace(&units, "<units>");
        let measure = run_cli(&[
            "measure",
            "--config",
            &path("config.toml"),
            "--units",
            &units,
            "--seed",
            "7",
            "--strata-out",
            &path(&format!("strata{round}.csv")),
        ]);
        let measure_csv = run_cli(&[
            "measure",
            "--config",
            &path("config.toml"),
            "--units",
            &units,
            "--seed",
            "7",
            "--format",
            "csv",
        ]);
        let abtest = run_cli(&[
            "abtest",
            "--config",
            &path("config.toml"),
            "--treatment",
            &units,
            "--control",
            &path("units0.csv"),
            "--seed",
            "7",
        ]);
        let validate = run_cli(&[
            "validate",
            "--config",
            &path("config.toml"),
            "--units",
            &units,
        ]);
        ensure(validate.code == 0, || {
            format!("validate: {}", validate.stdout)
        })?;
        for run in [&measure, &measure_csv, &abtest] {
            ensure(run.code != 1, || format!("command failed: {}", run.stderr))?;
        }
        let outputs = [
            gen_stdout,
            measure.stdout,
            measure_csv.stdout,
            abtest.stdout,
            validate.stdout,
        ];
        invocations += outputs.len();
        let snapshot = outputs.join("\u{0}");
        if round == 0 {
            fs::write(path("snapshot"), snapshot).map_err(|e| e.to_string())?;
        } else {
            let first = fs::read_to_string(path("snapshot")).map_err(|e| e.to_string())?;
            ensure(first == snapshot, || {
                "CLI output differs between runs".into()
            })?;
        }
    }
    for pair in [("units0.csv", "units1.csv"), ("strata0.csv", "strata1.csv")] {
        let a = fs::read(path(pair.0)).map_err(|e| e.to_string())?;
        let b = fs::read(path(pair.1)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{} and {} differ", pair.0, pair.1))?;
    }
    Ok(format!(
        "{} units round-trip exactly; {invocations} CLI runs byte-identical",
        back.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("contributor funnel reproduction", contributor_funnel_reproduction),
        ("matching weight conservation", weight_conservation),
        ("single-stratum collapse", single_stratum_collapse),
        ("confounding removal", confounding_removal),
        ("oracle equivalence", oracle_equivalence),
        ("log-ratio variance validity", katz_variance_validity),
        ("confidence interval coverage", ci_coverage),
        ("null p-value uniformity", null_uniformity),
        ("color coding", color_coding),
        ("round trip and determinism", round_trip_and_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.2} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {why} [{secs:.2} s]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

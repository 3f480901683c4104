//! End-to-end measurement: counts, matching, inference and status for one
//! population, and arm-by-arm comparison for experiments.

use serde::Serialize;

use crate::cem::{self, ImbalanceReport, StratumTable, WeightedUnit};
use crate::error::{Error, Result};
use crate::inference::{self, CiMethod, LiftResult, RatioEstimate, WeightedCell};
use crate::metrics::{self, FunnelCounts, MetricTable};
use crate::model::{self, AnalysisConfig, GroupRole, Orientation, UnitRecord, ViolationKind};
use crate::status::classify;

/// Matching artefacts for one transition.
#[derive(Clone, Debug)]
pub struct TransitionMatch {
    pub strata: StratumTable,
    pub weights: Vec<WeightedUnit>,
    pub imbalance: ImbalanceReport,
}

#[derive(Clone, Debug)]
pub struct FunnelAnalysis {
    /// Config with group orientation resolved.
    pub config: AnalysisConfig,
    pub counts: FunnelCounts,
    pub table: MetricTable,
    /// One entry per transition; empty for pre-aggregated input.
    pub matches: Vec<TransitionMatch>,
}

fn transition_seed(seed: u64, transition: usize) -> u64 {
    seed.wrapping_add((transition as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn finish_estimate(
    config: &AnalysisConfig,
    mut estimate: RatioEstimate,
    cells: &[WeightedCell],
    seed: u64,
) -> Result<RatioEstimate> {
    if config.ci_method == CiMethod::Bootstrap {
        let (lo, hi) = inference::bootstrap_interval(
            cells,
            config.confidence_level,
            config.bootstrap_resamples,
            seed,
        )?;
        estimate.ci_low = lo;
        estimate.ci_high = hi;
    }
    Ok(estimate)
}

/// Measures a unit-level population, adjusting every transition by matching
/// on the configured covariates at the transition's upstream layer.
pub fn analyze_units(
    config: &AnalysisConfig,
    units: &[UnitRecord],
    seed: u64,
) -> Result<FunnelAnalysis> {
    let config = config.oriented(units);
    if let Some(v) = model::validate_config(&config, units)
        .violations
        .into_iter()
        .find(|v| !matches!(v.kind, ViolationKind::EmptyLayer { .. }))
    {
        return Err(Error::Invalid(v));
    }
    let counts = metrics::layer_counts(
        units,
        &config.funnel,
        &config.focal_group,
        &config.reference_group,
    );
    let mut table = metrics::build_metric_table(
        &counts,
        &config.focal_group.name,
        &config.reference_group.name,
    )?;
    let keys = cem::coarsen(units, &config.covariates)?;
    let names: Vec<String> = config.covariates.iter().map(|c| c.name.clone()).collect();
    let mut matches = Vec::with_capacity(config.funnel.transitions());
    for (t, transition) in table.transitions.iter_mut().enumerate() {
        let (from, to) = (transition.from, transition.to);
        let strata = cem::stratify_and_prune(&keys, units, &config, from)?;
        let weights = cem::cem_weights(&strata);
        let rates = cem::weighted_rates(&strata, &weights, from, to)?;
        let estimate = RatioEstimate::katz(
            rates.focal_rate,
            rates.focal_ess,
            rates.reference_rate,
            rates.reference_ess,
            config.confidence_level,
        )
        .map_err(|e| at_transition(e, &config, to))?;
        let cells = cem::weighted_cells(&strata, to);
        let estimate = finish_estimate(&config, estimate, &cells, transition_seed(seed, t))?;
        transition.status = Some(classify(estimate.point, &config.color_profile));
        transition.adjusted = Some(estimate);
        let imbalance = cem::imbalance_report(&strata, &weights, &names);
        matches.push(TransitionMatch {
            strata,
            weights,
            imbalance,
        });
    }
    Ok(FunnelAnalysis {
        config,
        counts,
        table,
        matches,
    })
}

fn at_transition(e: Error, config: &AnalysisConfig, to: usize) -> Error {
    match e {
        Error::DegenerateRate { what } => Error::DegenerateRate {
            what: format!("{what} into layer '{}'", config.funnel.name(to)),
        },
        other => other,
    }
}

/// Measures pre-aggregated counts. Without unit covariates no matching is
/// possible, so the adjusted column is the single-stratum estimate and any
/// configured covariate is an error.
pub fn analyze_counts(
    config: &AnalysisConfig,
    counts: &FunnelCounts,
    seed: u64,
) -> Result<FunnelAnalysis> {
    if !config.covariates.is_empty() {
        return Err(Error::InvalidArgument(
            "pre-aggregated counts cannot be stratified; covariate adjustment needs unit-level input"
                .into(),
        ));
    }
    let mut config = config.clone();
    let mut counts = counts.clone();
    if config.orientation == Orientation::Auto && counts.focal[0] > counts.reference[0] {
        std::mem::swap(
            &mut config.focal_group.name,
            &mut config.reference_group.name,
        );
        std::mem::swap(&mut counts.focal, &mut counts.reference);
    }
    config.orientation = Orientation::Fixed;
    let mut table = metrics::build_metric_table(
        &counts,
        &config.focal_group.name,
        &config.reference_group.name,
    )?;
    for t in 0..table.transitions.len() {
        let (from, to) = (table.transitions[t].from, table.transitions[t].to);
        let (p, q) = table.conversion_rates(t);
        let (n_p, n_q) = (counts.focal[from], counts.reference[from]);
        let estimate = RatioEstimate::katz(p, n_p as f64, q, n_q as f64, config.confidence_level)
            .map_err(|e| at_transition(e, &config, to))?;
        let cells = [
            WeightedCell {
                role: GroupRole::Focal,
                units: n_p,
                converted: counts.focal[to],
                unit_weight: 1.0,
            },
            WeightedCell {
                role: GroupRole::Reference,
                units: n_q,
                converted: counts.reference[to],
                unit_weight: 1.0,
            },
        ];
        let estimate = finish_estimate(&config, estimate, &cells, transition_seed(seed, t))?;
        let tr = &mut table.transitions[t];
        tr.status = Some(classify(estimate.point, &config.color_profile));
        tr.adjusted = Some(estimate);
    }
    Ok(FunnelAnalysis {
        config,
        counts,
        table,
        matches: Vec::new(),
    })
}

/// Per-transition experiment comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitionComparison {
    pub from: usize,
    pub to: usize,
    /// Lift of the focal group's conversion rate; `None` when a rate is zero.
    pub focal_rate: Option<LiftResult>,
    pub reference_rate: Option<LiftResult>,
    /// Lift of the (adjusted) survival ratio.
    pub survival: LiftResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub control: MetricTable,
    pub treatment: MetricTable,
    pub comparisons: Vec<TransitionComparison>,
}

pub fn compare_arms(treatment: &MetricTable, control: &MetricTable) -> Result<ExperimentReport> {
    let mut comparisons = Vec::with_capacity(control.transitions.len());
    for t in 0..control.transitions.len() {
        let survival = inference::compare_experiments(treatment, control, t)?;
        let (from, to) = (control.transitions[t].from, control.transitions[t].to);
        let (pt, qt) = treatment.conversion_rates(t);
        let (pc, qc) = control.conversion_rates(t);
        let n = |table: &MetricTable, role: GroupRole| {
            let layer = &table.layers[from];
            match role {
                GroupRole::Focal => layer.focal_count as f64,
                GroupRole::Reference => layer.reference_count as f64,
            }
        };
        comparisons.push(TransitionComparison {
            from,
            to,
            focal_rate: inference::rate_lift(
                pt,
                n(treatment, GroupRole::Focal),
                pc,
                n(control, GroupRole::Focal),
            )
            .ok(),
            reference_rate: inference::rate_lift(
                qt,
                n(treatment, GroupRole::Reference),
                qc,
                n(control, GroupRole::Reference),
            )
            .ok(),
            survival,
        });
    }
    Ok(ExperimentReport {
        control: control.clone(),
        treatment: treatment.clone(),
        comparisons,
    })
}

/// Analyzes both arms under one orientation (resolved on the control arm).
pub fn analyze_experiment(
    config: &AnalysisConfig,
    treatment: &[UnitRecord],
    control: &[UnitRecord],
    seed: u64,
) -> Result<ExperimentReport> {
    let config = config.oriented(control);
    let c = analyze_units(&config, control, seed)?;
    let t = analyze_units(&config, treatment, seed.wrapping_add(1))?;
    compare_arms(&t.table, &c.table)
}

pub fn analyze_experiment_counts(
    config: &AnalysisConfig,
    treatment: &FunnelCounts,
    control: &FunnelCounts,
    seed: u64,
) -> Result<ExperimentReport> {
    let mut config = config.clone();
    let swap = config.orientation == Orientation::Auto && control.focal[0] > control.reference[0];
    if swap {
        std::mem::swap(
            &mut config.focal_group.name,
            &mut config.reference_group.name,
        );
    }
    config.orientation = Orientation::Fixed;
    let orient = |c: &FunnelCounts| {
        let mut c = c.clone();
        if swap {
            std::mem::swap(&mut c.focal, &mut c.reference);
        }
        c
    };
    let c = analyze_counts(&config, &orient(control), seed)?;
    let t = analyze_counts(&config, &orient(treatment), seed.wrapping_add(1))?;
    compare_arms(&t.table, &c.table)
}

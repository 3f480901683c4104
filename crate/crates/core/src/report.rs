//! Text and CSV rendering of funnel and experiment tables.
//!
//! Funnel CSV columns, in order:
//! `step,layer,focal_count,reference_count,raw_ratio,raw_ratio_pct,
//! normalized_ratio,normalized_ratio_pct,survival_ratio,survival_ratio_pct,
//! adjusted_ratio,adjusted_ratio_pct,ci_low,ci_high,status`.
//! Unsuffixed ratio columns hold unrounded values; `_pct` columns hold the
//! displayed percentages. Experiment CSV columns: `arm,metric,value,lift,p_value`.

use std::fmt::Write as _;

use crate::analysis::{ExperimentReport, TransitionMatch};
use crate::error::{Error, Result};
use crate::inference::LiftResult;
use crate::metrics::MetricTable;

pub const NOT_APPLICABLE: &str = "n.a.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    pub format: Format,
    pub percent_digits: usize,
    pub show_ci: bool,
    pub show_status: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            format: Format::Text,
            percent_digits: 1,
            show_ci: true,
            show_status: true,
        }
    }
}

impl RenderOptions {
    pub fn new(format: Format, percent_digits: usize) -> Result<Self> {
        if percent_digits > 4 {
            return Err(Error::InvalidArgument(format!(
                "percent_digits must be in [0, 4], got {percent_digits}"
            )));
        }
        Ok(Self {
            format,
            percent_digits,
            ..Self::default()
        })
    }
}

/// `0.667 -> "66.7%"`; never prints a negative zero.
pub fn format_pct(ratio: f64, digits: usize) -> String {
    let s = format!("{:.*}", digits, ratio * 100.0);
    match s.strip_prefix('-') {
        Some(rest) if rest.chars().all(|c| c == '0' || c == '.') => format!("{rest}%"),
        _ => format!("{s}%"),
    }
}

pub fn format_p(p: f64) -> String {
    format!("{p:.2}")
}

fn align(rows: &[Vec<String>]) -> String {
    let n_cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..n_cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            let pad = widths[c] - cell.chars().count();
            line.push_str(cell);
            line.extend(std::iter::repeat_n(' ', pad));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.write_record(&row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn render_funnel_table(table: &MetricTable, opts: &RenderOptions) -> Result<String> {
    let d = opts.percent_digits;
    match opts.format {
        Format::Text => {
            let mut header = vec![
                "Funnel Step".to_owned(),
                "Funnel Event".to_owned(),
                format!("{} obs", table.focal_label),
                format!("{} obs", table.reference_label),
                "Raw Ratio".to_owned(),
                "Normalized Ratio".to_owned(),
                "Funnel Survival Ratio".to_owned(),
                "Adjusted Funnel Survival Ratio".to_owned(),
            ];
            if opts.show_status {
                header.push("Status".to_owned());
            }
            let mut rows = vec![header];
            for (k, layer) in table.layers.iter().enumerate() {
                let tr = k.checked_sub(1).and_then(|t| table.transitions.get(t));
                let survival = tr.map_or(NOT_APPLICABLE.to_owned(), |t| {
                    format_pct(t.survival_ratio, d)
                });
                let adjusted = match tr.and_then(|t| t.adjusted.as_ref()) {
                    Some(a) if opts.show_ci => format!(
                        "{} (CI {}-{})",
                        format_pct(a.point, d),
                        format_pct(a.ci_low, d),
                        format_pct(a.ci_high, d)
                    ),
                    Some(a) => format_pct(a.point, d),
                    None => NOT_APPLICABLE.to_owned(),
                };
                let mut row = vec![
                    (k + 1).to_string(),
                    layer.name.clone(),
                    layer.focal_count.to_string(),
                    layer.reference_count.to_string(),
                    format_pct(layer.raw_ratio, d),
                    format_pct(layer.normalized_ratio, d),
                    survival,
                    adjusted,
                ];
                if opts.show_status {
                    row.push(
                        tr.and_then(|t| t.status)
                            .map_or(NOT_APPLICABLE.to_owned(), |s| s.to_string()),
                    );
                }
                rows.push(row);
            }
            Ok(align(&rows))
        }
        Format::Csv => {
            let mut rows = vec![[
                "step",
                "layer",
                "focal_count",
                "reference_count",
                "raw_ratio",
                "raw_ratio_pct",
                "normalized_ratio",
                "normalized_ratio_pct",
                "survival_ratio",
                "survival_ratio_pct",
                "adjusted_ratio",
                "adjusted_ratio_pct",
                "ci_low",
                "ci_high",
                "status",
            ]
            .map(String::from)
            .to_vec()];
            for (k, layer) in table.layers.iter().enumerate() {
                let tr = k.checked_sub(1).and_then(|t| table.transitions.get(t));
                let adjusted = tr.and_then(|t| t.adjusted.as_ref());
                let raw = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                let pct =
                    |v: Option<f64>| v.map_or(NOT_APPLICABLE.to_owned(), |v| format_pct(v, d));
                let survival = tr.map(|t| t.survival_ratio);
                let point = adjusted.map(|a| a.point);
                rows.push(vec![
                    (k + 1).to_string(),
                    layer.name.clone(),
                    layer.focal_count.to_string(),
                    layer.reference_count.to_string(),
                    layer.raw_ratio.to_string(),
                    format_pct(layer.raw_ratio, d),
                    layer.normalized_ratio.to_string(),
                    format_pct(layer.normalized_ratio, d),
                    raw(survival),
                    pct(survival),
                    raw(point),
                    pct(point),
                    raw(adjusted.map(|a| a.ci_low)),
                    raw(adjusted.map(|a| a.ci_high)),
                    tr.and_then(|t| t.status)
                        .map_or(NOT_APPLICABLE.to_owned(), |s| s.to_string()),
                ]);
            }
            csv_string(rows)
        }
    }
}

fn with_lift(value: &str, lift: Option<&LiftResult>, digits: usize) -> String {
    match lift {
        Some(l) => format!(
            "{value} ({}, {})",
            format_pct(l.lift, digits),
            format_p(l.p_value)
        ),
        None => value.to_owned(),
    }
}

fn transition_label(report: &ExperimentReport, from: usize, to: usize) -> String {
    let names = &report.control.layers;
    if report.control.transitions.len() == 1 {
        String::new()
    } else {
        format!(" ({} -> {})", names[from].name, names[to].name)
    }
}

pub fn render_experiment_table(report: &ExperimentReport, opts: &RenderOptions) -> Result<String> {
    let d = opts.percent_digits;
    let (control, treatment) = (&report.control, &report.treatment);
    match opts.format {
        Format::Text => {
            let focal_obs = format!("{} obs", control.focal_label);
            let reference_obs = format!("{} obs", control.reference_label);
            let mut rows = vec![
                vec![
                    String::new(),
                    String::new(),
                    "Baseline Model".to_owned(),
                    String::new(),
                    String::new(),
                    "Treatment Model".to_owned(),
                    String::new(),
                ],
                vec![
                    "Funnel Event".to_owned(),
                    focal_obs.clone(),
                    reference_obs.clone(),
                    "Raw Ratio".to_owned(),
                    focal_obs,
                    reference_obs,
                    "Raw Ratio".to_owned(),
                ],
            ];
            for (c, t) in control.layers.iter().zip(&treatment.layers) {
                rows.push(vec![
                    c.name.clone(),
                    c.focal_count.to_string(),
                    c.reference_count.to_string(),
                    format_pct(c.raw_ratio, d),
                    t.focal_count.to_string(),
                    t.reference_count.to_string(),
                    format_pct(t.raw_ratio, d),
                ]);
            }
            for (i, cmp) in report.comparisons.iter().enumerate() {
                let (pc, qc) = control.conversion_rates(i);
                let (pt, qt) = treatment.conversion_rates(i);
                let suffix = transition_label(report, cmp.from, cmp.to);
                rows.push(vec![
                    format!("{} percentage", control.layers[cmp.to].name),
                    format_pct(pc, d),
                    format_pct(qc, d),
                    format_pct(control.transitions[i].survival_ratio, d),
                    with_lift(&format_pct(pt, d), cmp.focal_rate.as_ref(), d),
                    with_lift(&format_pct(qt, d), cmp.reference_rate.as_ref(), d),
                    format_pct(treatment.transitions[i].survival_ratio, d),
                ]);
                rows.push(vec![
                    format!("Adjusted Funnel Survival Ratio{suffix}"),
                    String::new(),
                    String::new(),
                    format_pct(cmp.survival.sr_control, d),
                    String::new(),
                    String::new(),
                    format!(
                        "**{}**",
                        with_lift(
                            &format_pct(cmp.survival.sr_treatment, d),
                            Some(&cmp.survival),
                            d
                        )
                    ),
                ]);
            }
            Ok(align(&rows))
        }
        Format::Csv => {
            let mut rows = vec![["arm", "metric", "value", "lift", "p_value"]
                .map(String::from)
                .to_vec()];
            let plain = |arm: &str, metric: String, value: String| {
                vec![arm.to_owned(), metric, value, String::new(), String::new()]
            };
            let tested = |metric: String, value: f64, lift: Option<&LiftResult>| {
                vec![
                    "treatment".to_owned(),
                    metric,
                    value.to_string(),
                    lift.map_or(String::new(), |l| l.lift.to_string()),
                    lift.map_or(String::new(), |l| l.p_value.to_string()),
                ]
            };
            for (arm, table) in [("baseline", control), ("treatment", treatment)] {
                for layer in &table.layers {
                    rows.push(plain(
                        arm,
                        format!("{}:focal_count", layer.name),
                        layer.focal_count.to_string(),
                    ));
                    rows.push(plain(
                        arm,
                        format!("{}:reference_count", layer.name),
                        layer.reference_count.to_string(),
                    ));
                    rows.push(plain(
                        arm,
                        format!("{}:raw_ratio", layer.name),
                        layer.raw_ratio.to_string(),
                    ));
                }
                for (i, cmp) in report.comparisons.iter().enumerate() {
                    let key = format!(
                        "{}->{}",
                        table.layers[cmp.from].name, table.layers[cmp.to].name
                    );
                    let (p, q) = table.conversion_rates(i);
                    let survival = table.transitions[i].survival_ratio;
                    let adjusted = table.transitions[i].headline_ratio();
                    if arm == "baseline" {
                        rows.push(plain(arm, format!("{key}:focal_rate"), p.to_string()));
                        rows.push(plain(arm, format!("{key}:reference_rate"), q.to_string()));
                        rows.push(plain(
                            arm,
                            format!("{key}:survival_ratio"),
                            survival.to_string(),
                        ));
                        rows.push(plain(
                            arm,
                            format!("{key}:adjusted_survival_ratio"),
                            adjusted.to_string(),
                        ));
                    } else {
                        rows.push(tested(
                            format!("{key}:focal_rate"),
                            p,
                            cmp.focal_rate.as_ref(),
                        ));
                        rows.push(tested(
                            format!("{key}:reference_rate"),
                            q,
                            cmp.reference_rate.as_ref(),
                        ));
                        rows.push(plain(
                            arm,
                            format!("{key}:survival_ratio"),
                            survival.to_string(),
                        ));
                        rows.push(tested(
                            format!("{key}:adjusted_survival_ratio"),
                            adjusted,
                            Some(&cmp.survival),
                        ));
                    }
                }
            }
            csv_string(rows)
        }
    }
}

/// One line per transition and covariate: L1 group imbalance before and after matching.
pub fn render_balance(table: &MetricTable, matches: &[TransitionMatch]) -> String {
    let mut out = String::new();
    for (tr, m) in table.transitions.iter().zip(matches) {
        let strata = &m.strata;
        let _ = writeln!(
            out,
            "matching at '{}': {} of {} strata matched, m_T={}, m_C={}",
            table.layers[tr.from].name,
            strata.matched_count(),
            strata.strata.len(),
            strata.m_focal,
            strata.m_reference
        );
        for c in &m.imbalance.covariates {
            let _ = writeln!(
                out,
                "  {}: L1 imbalance {:.4} -> {:.4}",
                c.name, c.before, c.after
            );
        }
    }
    out
}

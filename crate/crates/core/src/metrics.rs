//! Unadjusted representation metrics over per-layer group counts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::RatioEstimate;
use crate::model::{FunnelSpec, GroupLabel, UnitRecord};
use crate::status::Status;

/// Per-layer counts of focal and reference units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FunnelCounts {
    pub layers: Vec<String>,
    pub focal: Vec<u64>,
    pub reference: Vec<u64>,
}

impl FunnelCounts {
    pub fn new(layers: Vec<String>, focal: Vec<u64>, reference: Vec<u64>) -> Result<Self> {
        if layers.len() != focal.len() || layers.len() != reference.len() {
            return Err(Error::InvalidArgument(
                "layer, focal and reference lengths differ".into(),
            ));
        }
        let counts = Self {
            layers,
            focal,
            reference,
        };
        for (name, series) in [("focal", &counts.focal), ("reference", &counts.reference)] {
            if let Some(k) = series.windows(2).position(|w| w[1] > w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "{name} counts increase at layer '{}'",
                    counts.layers[k + 1]
                )));
            }
        }
        Ok(counts)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layers whose reference count is zero while the focal count is not;
    /// every ratio at such a layer is undefined.
    pub fn undefined_layers(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| self.reference[k] == 0 && self.focal[k] > 0)
            .collect()
    }

    /// Multiplies every count by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            layers: self.layers.clone(),
            focal: self.focal.iter().map(|c| c * factor).collect(),
            reference: self.reference.iter().map(|c| c * factor).collect(),
        }
    }
}

/// Counts units reaching each layer, per group. Units in other groups are ignored.
pub fn layer_counts(
    units: &[UnitRecord],
    funnel: &FunnelSpec,
    focal: &GroupLabel,
    reference: &GroupLabel,
) -> FunnelCounts {
    let n = funnel.len();
    let mut f = vec![0u64; n];
    let mut r = vec![0u64; n];
    for unit in units {
        let counts = if unit.group == focal.name {
            &mut f
        } else if unit.group == reference.name {
            &mut r
        } else {
            continue;
        };
        for (k, slot) in counts.iter_mut().enumerate() {
            *slot += u64::from(unit.reached(k));
        }
    }
    FunnelCounts {
        layers: funnel.layers().to_vec(),
        focal: f,
        reference: r,
    }
}

pub fn raw_ratio(focal_count: u64, reference_count: u64) -> Result<f64> {
    if reference_count == 0 {
        return Err(Error::undefined("raw ratio"));
    }
    Ok(focal_count as f64 / reference_count as f64)
}

pub fn normalized_ratio(
    focal_k: u64,
    reference_k: u64,
    focal_base: u64,
    reference_base: u64,
) -> Result<f64> {
    if focal_base == 0 || reference_base == 0 || reference_k == 0 {
        return Err(Error::undefined("normalized ratio"));
    }
    let focal_mean = focal_k as f64 / focal_base as f64;
    let reference_mean = reference_k as f64 / reference_base as f64;
    Ok(focal_mean / reference_mean)
}

pub fn funnel_survival_ratio(normalized_k: f64, normalized_prev: f64) -> Result<f64> {
    if normalized_prev <= 0.0 {
        return Err(Error::undefined("funnel survival ratio"));
    }
    Ok(normalized_k / normalized_prev)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub name: String,
    pub focal_count: u64,
    pub reference_count: u64,
    pub raw_ratio: f64,
    pub normalized_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitionMetrics {
    pub from: usize,
    pub to: usize,
    pub survival_ratio: f64,
    /// Matched and weighted estimate; `None` until adjustment runs.
    pub adjusted: Option<RatioEstimate>,
    pub status: Option<Status>,
}

impl TransitionMetrics {
    /// Adjusted estimate when present, otherwise the unadjusted ratio.
    pub fn headline_ratio(&self) -> f64 {
        self.adjusted
            .as_ref()
            .map_or(self.survival_ratio, |a| a.point)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricTable {
    pub focal_label: String,
    pub reference_label: String,
    pub layers: Vec<LayerMetrics>,
    pub transitions: Vec<TransitionMetrics>,
}

impl MetricTable {
    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    /// Focal and reference conversion rates for transition `t`.
    pub fn conversion_rates(&self, t: usize) -> (f64, f64) {
        let tr = &self.transitions[t];
        let (a, b) = (&self.layers[tr.from], &self.layers[tr.to]);
        (
            b.focal_count as f64 / a.focal_count as f64,
            b.reference_count as f64 / a.reference_count as f64,
        )
    }

    pub fn any_red(&self) -> bool {
        self.transitions
            .iter()
            .any(|t| t.status == Some(Status::Red))
    }
}

/// Builds the per-layer and per-transition unadjusted metrics.
pub fn build_metric_table(
    counts: &FunnelCounts,
    focal_label: &str,
    reference_label: &str,
) -> Result<MetricTable> {
    if counts.len() < 2 {
        return Err(Error::InvalidArgument(
            "a funnel needs at least two layers".into(),
        ));
    }
    let (focal_base, reference_base) = (counts.focal[0], counts.reference[0]);
    let mut layers = Vec::with_capacity(counts.len());
    for k in 0..counts.len() {
        let at_layer = |e: Error| match e {
            Error::UndefinedRatio { context } => {
                Error::undefined(format!("{context} for layer '{}'", counts.layers[k]))
            }
            other => other,
        };
        let raw = raw_ratio(counts.focal[k], counts.reference[k]).map_err(at_layer)?;
        let normalized = if k == 0 {
            if focal_base == 0 || reference_base == 0 {
                return Err(at_layer(Error::undefined("base population")));
            }
            1.0
        } else {
            normalized_ratio(
                counts.focal[k],
                counts.reference[k],
                focal_base,
                reference_base,
            )
            .map_err(at_layer)?
        };
        layers.push(LayerMetrics {
            name: counts.layers[k].clone(),
            focal_count: counts.focal[k],
            reference_count: counts.reference[k],
            raw_ratio: raw,
            normalized_ratio: normalized,
        });
    }
    let transitions = (1..counts.len())
        .map(|k| {
            let survival =
                funnel_survival_ratio(layers[k].normalized_ratio, layers[k - 1].normalized_ratio)
                    .map_err(|_| {
                    Error::undefined(format!(
                        "funnel survival ratio for layer '{}'",
                        counts.layers[k]
                    ))
                })?;
            Ok(TransitionMetrics {
                from: k - 1,
                to: k,
                survival_ratio: survival,
                adjusted: None,
                status: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricTable {
        focal_label: focal_label.to_owned(),
        reference_label: reference_label.to_owned(),
        layers,
        transitions,
    })
}

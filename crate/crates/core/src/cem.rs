//! Coarsened exact matching.
//!
//! Covariates are coarsened into buckets, units are grouped into strata by
//! their bucket tuple, and strata lacking either group are pruned. A matched
//! unit `i` in stratum `s` is weighted
//!
//! ```text
//! w_i = (m_T / m_T^s) * (m^s / m)   focal
//! w_i = (m_C / m_C^s) * (m^s / m)   reference
//! ```
//!
//! where `m_T^s`, `m_C^s` count matched focal and reference units in `s`,
//! `m^s = m_T^s + m_C^s`, and `m_T`, `m_C`, `m` are the totals over matched
//! strata. Unmatched units weigh 0. Group weights therefore sum to `m_T` and
//! `m_C`, and every group sees the strata in proportion `m^s / m`.
//!
//! The adjusted survival ratio divides the weighted focal conversion rate by
//! the weighted reference conversion rate, both taken from the matching layer
//! to the next one.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{effective_sample_size, WeightedCell};
use crate::model::{
    AnalysisConfig, CovariateKind, CovariateSpec, CovariateValue, GroupRole, UnitRecord,
    UNKNOWN_BUCKET,
};

/// Coarsened covariate signature of a unit.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct StratumKey(pub Vec<String>);

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str("*")
        } else {
            f.write_str(&self.0.join("|"))
        }
    }
}

/// A covariate with its coarsening fully determined.
#[derive(Clone, Debug, PartialEq)]
pub enum Coarsening {
    Categorical {
        buckets: BTreeMap<String, String>,
        catch_all: Option<String>,
    },
    Numeric {
        cut_points: Vec<f64>,
    },
}

impl Coarsening {
    pub fn bucket(&self, value: &CovariateValue) -> String {
        match (self, value) {
            (Coarsening::Categorical { buckets, catch_all }, value) => {
                let raw = value.to_string();
                if buckets.is_empty() {
                    return if raw.is_empty() {
                        UNKNOWN_BUCKET.to_owned()
                    } else {
                        raw
                    };
                }
                buckets
                    .get(&raw)
                    .or(catch_all.as_ref())
                    .cloned()
                    .unwrap_or_else(|| UNKNOWN_BUCKET.to_owned())
            }
            (Coarsening::Numeric { cut_points }, CovariateValue::Numeric(v)) => {
                numeric_bucket(cut_points, *v)
            }
            (Coarsening::Numeric { .. }, CovariateValue::Categorical(_)) => {
                UNKNOWN_BUCKET.to_owned()
            }
        }
    }
}

fn numeric_bucket(cuts: &[f64], v: f64) -> String {
    let Some((first, last)) = cuts.first().zip(cuts.last()) else {
        return "all".to_owned();
    };
    if v < *first {
        return format!("<{first}");
    }
    if v >= *last {
        return format!(">={last}");
    }
    // Index of the first cut strictly above v; v lies in [cuts[i-1], cuts[i]).
    let i = cuts.partition_point(|c| *c <= v);
    format!("[{},{})", cuts[i - 1], cuts[i])
}

/// Nearest-rank quintile cut points over the finite values, deduplicated.
pub fn quintile_cut_points(values: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return Vec::new();
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(4);
    for q in [0.2, 0.4, 0.6, 0.8] {
        let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
        let c = sorted[rank - 1];
        if cuts.last().is_none_or(|last| c > *last) {
            cuts.push(c);
        }
    }
    cuts
}

/// Fixes every covariate's coarsening, computing quintile cuts from `units`
/// where none were configured.
pub fn resolve_coarsening(covariates: &[CovariateSpec], units: &[UnitRecord]) -> Vec<Coarsening> {
    covariates
        .iter()
        .enumerate()
        .map(|(j, spec)| match &spec.kind {
            CovariateKind::Categorical { buckets, catch_all } => Coarsening::Categorical {
                buckets: buckets.clone(),
                catch_all: catch_all.clone(),
            },
            CovariateKind::Numeric {
                cut_points: Some(cuts),
            } => Coarsening::Numeric {
                cut_points: cuts.clone(),
            },
            CovariateKind::Numeric { cut_points: None } => {
                let values: Vec<f64> = units
                    .iter()
                    .filter_map(|u| match u.covariates.get(j) {
                        Some(CovariateValue::Numeric(v)) => Some(*v),
                        _ => None,
                    })
                    .collect();
                Coarsening::Numeric {
                    cut_points: quintile_cut_points(&values),
                }
            }
        })
        .collect()
}

/// Assigns each unit its stratum key; the result is aligned with `units`.
pub fn coarsen(units: &[UnitRecord], covariates: &[CovariateSpec]) -> Result<Vec<StratumKey>> {
    let rules = resolve_coarsening(covariates, units);
    units
        .iter()
        .map(|unit| {
            if unit.covariates.len() != covariates.len() {
                return Err(Error::InvalidArgument(format!(
                    "unit '{}' has {} covariates, expected {}",
                    unit.unit_id,
                    unit.covariates.len(),
                    covariates.len()
                )));
            }
            rules
                .iter()
                .zip(&unit.covariates)
                .zip(covariates)
                .map(|((rule, value), spec)| match value {
                    CovariateValue::Numeric(v) if v.is_nan() => Err(Error::NanCovariate {
                        covariate: spec.name.clone(),
                        unit_id: unit.unit_id.clone(),
                    }),
                    value => Ok(rule.bucket(value)),
                })
                .collect::<Result<Vec<_>>>()
                .map(StratumKey)
        })
        .collect()
}

/// A unit placed in a stratum, with the number of leading layers it reached.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Member {
    pub unit_id: String,
    pub depth: usize,
}

impl Member {
    pub fn reached(&self, layer: usize) -> bool {
        self.depth > layer
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stratum {
    /// Focal units at the matching layer, sorted by id.
    pub focal: Vec<Member>,
    pub reference: Vec<Member>,
}

impl Stratum {
    pub fn matched(&self) -> bool {
        !self.focal.is_empty() && !self.reference.is_empty()
    }

    pub fn members(&self, role: GroupRole) -> &[Member] {
        match role {
            GroupRole::Focal => &self.focal,
            GroupRole::Reference => &self.reference,
        }
    }

    pub fn size(&self) -> usize {
        self.focal.len() + self.reference.len()
    }

    pub fn count_reaching(&self, role: GroupRole, layer: usize) -> usize {
        self.members(role)
            .iter()
            .filter(|m| m.reached(layer))
            .count()
    }
}

/// Strata over the units at one matching layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StratumTable {
    pub matching_layer: usize,
    pub n_layers: usize,
    pub strata: BTreeMap<StratumKey, Stratum>,
    /// Matched focal units, `m_T`.
    pub m_focal: usize,
    /// Matched reference units, `m_C`.
    pub m_reference: usize,
}

impl StratumTable {
    /// Total matched units, `m`.
    pub fn m(&self) -> usize {
        self.m_focal + self.m_reference
    }

    pub fn matched(&self) -> impl Iterator<Item = (&StratumKey, &Stratum)> {
        self.strata.iter().filter(|(_, s)| s.matched())
    }

    pub fn matched_count(&self) -> usize {
        self.matched().count()
    }

    /// Common weight of `role` units in `stratum`; 0 for unmatched strata.
    pub fn unit_weight(&self, stratum: &Stratum, role: GroupRole) -> f64 {
        if !stratum.matched() {
            return 0.0;
        }
        let group_total = match role {
            GroupRole::Focal => self.m_focal,
            GroupRole::Reference => self.m_reference,
        } as f64;
        let in_stratum = stratum.members(role).len() as f64;
        (group_total / in_stratum) * (stratum.size() as f64 / self.m() as f64)
    }
}

/// Builds strata over units reaching `matching_layer` and marks which match.
pub fn stratify_and_prune(
    keys: &[StratumKey],
    units: &[UnitRecord],
    config: &AnalysisConfig,
    matching_layer: usize,
) -> Result<StratumTable> {
    let n_layers = config.funnel.len();
    if matching_layer >= n_layers {
        return Err(Error::InvalidArgument(format!(
            "matching layer {matching_layer} out of range"
        )));
    }
    if keys.len() != units.len() {
        return Err(Error::InvalidArgument(
            "stratum keys are not aligned with units".into(),
        ));
    }
    let mut strata: BTreeMap<StratumKey, Stratum> = BTreeMap::new();
    for (key, unit) in keys.iter().zip(units) {
        if !unit.reached(matching_layer) {
            continue;
        }
        let Some(role) = config.role_of(&unit.group) else {
            continue;
        };
        let stratum = strata.entry(key.clone()).or_default();
        let member = Member {
            unit_id: unit.unit_id.clone(),
            depth: unit.depth(),
        };
        match role {
            GroupRole::Focal => stratum.focal.push(member),
            GroupRole::Reference => stratum.reference.push(member),
        }
    }
    let (mut m_focal, mut m_reference) = (0, 0);
    for stratum in strata.values_mut() {
        stratum.focal.sort();
        stratum.reference.sort();
        if stratum.matched() {
            m_focal += stratum.focal.len();
            m_reference += stratum.reference.len();
        }
    }
    if m_focal == 0 {
        return Err(Error::NoOverlap {
            layer: config.funnel.name(matching_layer).to_owned(),
        });
    }
    Ok(StratumTable {
        matching_layer,
        n_layers,
        strata,
        m_focal,
        m_reference,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightedUnit {
    pub unit_id: String,
    pub role: GroupRole,
    pub weight: f64,
}

/// Matching weights for every unit in the table, pruned units included at 0.
pub fn cem_weights(strata: &StratumTable) -> Vec<WeightedUnit> {
    let mut out = Vec::with_capacity(strata.strata.values().map(Stratum::size).sum());
    for stratum in strata.strata.values() {
        for role in [GroupRole::Focal, GroupRole::Reference] {
            let w = strata.unit_weight(stratum, role);
            out.extend(stratum.members(role).iter().map(|m| WeightedUnit {
                unit_id: m.unit_id.clone(),
                role,
                weight: w,
            }));
        }
    }
    out
}

fn weight_lookup(weights: &[WeightedUnit]) -> HashMap<&str, f64> {
    weights
        .iter()
        .map(|w| (w.unit_id.as_str(), w.weight))
        .collect()
}

/// Weighted conversion rates of both groups over matched strata.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightedRates {
    pub focal_rate: f64,
    pub reference_rate: f64,
    /// Kish effective sample sizes of the matched units behind each rate.
    pub focal_ess: f64,
    pub reference_ess: f64,
}

fn check_transition(strata: &StratumTable, from_layer: usize, to_layer: usize) -> Result<()> {
    if from_layer != strata.matching_layer {
        return Err(Error::InvalidArgument(format!(
            "strata were matched at layer {}, not {from_layer}",
            strata.matching_layer
        )));
    }
    if to_layer != from_layer + 1 || to_layer >= strata.n_layers {
        return Err(Error::InvalidArgument(format!(
            "invalid transition {from_layer} -> {to_layer}"
        )));
    }
    Ok(())
}

pub fn weighted_rates(
    strata: &StratumTable,
    weights: &[WeightedUnit],
    from_layer: usize,
    to_layer: usize,
) -> Result<WeightedRates> {
    check_transition(strata, from_layer, to_layer)?;
    let lookup = weight_lookup(weights);
    let rate = |role: GroupRole| -> Result<(f64, f64)> {
        let (mut num, mut den) = (0.0, 0.0);
        let mut unit_weights = Vec::new();
        for (_, stratum) in strata.matched() {
            let members = stratum.members(role);
            let mut w_sum = 0.0;
            for m in members {
                let w = lookup.get(m.unit_id.as_str()).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("no weight for unit '{}'", m.unit_id))
                })?;
                w_sum += w;
                unit_weights.push(w);
            }
            let converted = members.iter().filter(|m| m.reached(to_layer)).count();
            let y = converted as f64 / members.len() as f64;
            num += y * w_sum;
            den += w_sum;
        }
        if den <= 0.0 {
            return Err(Error::undefined("weighted conversion rate"));
        }
        Ok((num / den, effective_sample_size(&unit_weights)?))
    };
    let (focal_rate, focal_ess) = rate(GroupRole::Focal)?;
    let (reference_rate, reference_ess) = rate(GroupRole::Reference)?;
    Ok(WeightedRates {
        focal_rate,
        reference_rate,
        focal_ess,
        reference_ess,
    })
}

/// Weighted focal conversion rate over weighted reference conversion rate.
pub fn adjusted_survival_ratio(
    strata: &StratumTable,
    weights: &[WeightedUnit],
    from_layer: usize,
    to_layer: usize,
) -> Result<f64> {
    let rates = weighted_rates(strata, weights, from_layer, to_layer)?;
    if rates.reference_rate == 0.0 {
        return Err(Error::undefined("adjusted funnel survival ratio"));
    }
    Ok(rates.focal_rate / rates.reference_rate)
}

/// Matched cells with counts at the matching layer and conversions to `to_layer`.
pub fn weighted_cells(strata: &StratumTable, to_layer: usize) -> Vec<WeightedCell> {
    strata
        .matched()
        .flat_map(|(_, s)| {
            [GroupRole::Focal, GroupRole::Reference].map(|role| WeightedCell {
                role,
                units: s.members(role).len() as u64,
                converted: s.count_reaching(role, to_layer) as u64,
                unit_weight: strata.unit_weight(s, role),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovariateImbalance {
    pub name: String,
    /// L1 distance between the focal and reference bucket distributions.
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImbalanceReport {
    pub covariates: Vec<CovariateImbalance>,
    /// Same distance over full stratum keys.
    pub joint_before: f64,
    pub joint_after: f64,
}

type Distribution = BTreeMap<String, (f64, f64)>;

fn l1(dist: &Distribution) -> f64 {
    let (tf, tr) = dist
        .values()
        .fold((0.0, 0.0), |(a, b), (f, r)| (a + f, b + r));
    if tf == 0.0 || tr == 0.0 {
        return 0.0;
    }
    dist.values().map(|(f, r)| (f / tf - r / tr).abs()).sum()
}

/// Group imbalance on coarsened covariates before matching (all units at the
/// matching layer, unweighted) and after (matched units, weighted).
pub fn imbalance_report(
    strata: &StratumTable,
    weights: &[WeightedUnit],
    covariate_names: &[String],
) -> ImbalanceReport {
    let lookup = weight_lookup(weights);
    let n_cov = covariate_names.len();
    let mut before: Vec<Distribution> = vec![BTreeMap::new(); n_cov + 1];
    let mut after: Vec<Distribution> = vec![BTreeMap::new(); n_cov + 1];
    for (key, stratum) in &strata.strata {
        let joint = key.to_string();
        for (dim, bucket) in key.0.iter().chain(std::iter::once(&joint)).enumerate() {
            for role in [GroupRole::Focal, GroupRole::Reference] {
                let members = stratum.members(role);
                let count = members.len() as f64;
                let weight: f64 = members
                    .iter()
                    .map(|m| lookup.get(m.unit_id.as_str()).copied().unwrap_or(0.0))
                    .sum();
                let dim = dim.min(n_cov);
                for (dist, amount) in [(&mut before[dim], count), (&mut after[dim], weight)] {
                    let slot = dist.entry(bucket.clone()).or_insert((0.0, 0.0));
                    match role {
                        GroupRole::Focal => slot.0 += amount,
                        GroupRole::Reference => slot.1 += amount,
                    }
                }
            }
        }
    }
    ImbalanceReport {
        covariates: covariate_names
            .iter()
            .enumerate()
            .map(|(j, name)| CovariateImbalance {
                name: name.clone(),
                before: l1(&before[j]),
                after: l1(&after[j]),
            })
            .collect(),
        joint_before: l1(&before[n_cov]),
        joint_after: l1(&after[n_cov]),
    }
}

/// Writes the audit dump: `stratum_key,group,layer,count,weight_sum`, one row
/// per stratum and group at each table's matching layer.
pub fn write_strata_dump<W: Write>(
    out: W,
    tables: &[(StratumTable, Vec<WeightedUnit>)],
    config: &AnalysisConfig,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["stratum_key", "group", "layer", "count", "weight_sum"])?;
    for (table, weights) in tables {
        let layer = config.funnel.name(table.matching_layer);
        let lookup = weight_lookup(weights);
        for (key, stratum) in &table.strata {
            for (role, label) in [
                (GroupRole::Focal, &config.focal_group.name),
                (GroupRole::Reference, &config.reference_group.name),
            ] {
                let members = stratum.members(role);
                if members.is_empty() {
                    continue;
                }
                let weight_sum: f64 = members
                    .iter()
                    .map(|m| lookup.get(m.unit_id.as_str()).copied().unwrap_or(0.0))
                    .sum();
                writer.write_record([
                    key.to_string(),
                    label.clone(),
                    layer.to_owned(),
                    members.len().to_string(),
                    weight_sum.to_string(),
                ])?;
            }
        }
    }
    writer.flush().map_err(|source| Error::Io {
        path: "strata dump".into(),
        source,
    })?;
    Ok(())
}

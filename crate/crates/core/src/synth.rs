//! Seeded synthetic populations with closed-form ground truth.
//!
//! Base-layer counts are fixed by the spec; each unit then survives every
//! transition with its stratum's and group's conversion probability, stopping
//! at its first failure. Stratum `i` draws from ChaCha20 seeded with
//! `seed_from_u64(seed)` on stream `i`; a Bernoulli(p) draw takes the top 53
//! bits of one `next_u64` as `u` in `[0, 1)` and succeeds when `u < p`. The
//! stream is value-stable across platforms and releases of `rand_chacha`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnalysisConfig, CovariateSpec, CovariateValue, FunnelSpec, UnitRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumSpec {
    /// Bucket per covariate.
    pub key: Vec<String>,
    pub focal_count: u64,
    pub reference_count: u64,
    /// Probability of moving from layer `k` to `k + 1`, per transition.
    pub focal_conversion: Vec<f64>,
    pub reference_conversion: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    #[serde(default)]
    pub seed: u64,
    pub layers: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "default_focal")]
    pub focal_label: String,
    #[serde(default = "default_reference")]
    pub reference_label: String,
    pub strata: Vec<StratumSpec>,
}

fn default_focal() -> String {
    "focal".into()
}

fn default_reference() -> String {
    "reference".into()
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        FunnelSpec::new(self.layers.iter().cloned())?;
        if self.focal_label == self.reference_label {
            return Err(Error::config("focal_label", "group labels must differ"));
        }
        let transitions = self.layers.len() - 1;
        let mut keys = HashSet::new();
        for (i, s) in self.strata.iter().enumerate() {
            let at = |field: &str| format!("strata[{i}].{field}");
            if s.key.len() != self.covariates.len() {
                return Err(Error::config(
                    at("key"),
                    "one bucket per covariate is required",
                ));
            }
            if !keys.insert(&s.key) {
                return Err(Error::config(at("key"), "duplicate stratum key"));
            }
            for (field, probs) in [
                ("focal_conversion", &s.focal_conversion),
                ("reference_conversion", &s.reference_conversion),
            ] {
                if probs.len() != transitions {
                    return Err(Error::config(
                        at(field),
                        format!("expected {transitions} probabilities"),
                    ));
                }
                if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::config(at(field), "probabilities must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn parse_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)
            .map_err(|e| Error::config("population", e.message().to_owned()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse_toml(&text)
    }

    pub fn total_units(&self) -> u64 {
        self.strata
            .iter()
            .map(|s| s.focal_count + s.reference_count)
            .sum()
    }

    /// Analysis config matching the generated files: identity-coarsened
    /// categorical covariates, defaults elsewhere.
    pub fn analysis_config(&self) -> Result<AnalysisConfig> {
        let funnel = FunnelSpec::new(self.layers.iter().cloned())?;
        AnalysisConfig::new(funnel, &self.focal_label, &self.reference_label)?.with_covariates(
            self.covariates
                .iter()
                .map(CovariateSpec::categorical)
                .collect(),
        )
    }
}

/// Generated units plus exact per-layer bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPopulation {
    pub units: Vec<UnitRecord>,
    pub focal_totals: Vec<u64>,
    pub reference_totals: Vec<u64>,
}

fn uniform(rng: &mut ChaCha20Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn generate_stratum(
    spec: &PopulationSpec,
    index: usize,
    stratum: &StratumSpec,
) -> (Vec<UnitRecord>, Vec<u64>, Vec<u64>) {
    let n_layers = spec.layers.len();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let covariates: Vec<CovariateValue> = stratum
        .key
        .iter()
        .map(|b| CovariateValue::Categorical(b.clone()))
        .collect();
    let mut units = Vec::with_capacity((stratum.focal_count + stratum.reference_count) as usize);
    let mut totals = [vec![0u64; n_layers], vec![0u64; n_layers]];
    let groups = [
        (
            &spec.focal_label,
            stratum.focal_count,
            &stratum.focal_conversion,
        ),
        (
            &spec.reference_label,
            stratum.reference_count,
            &stratum.reference_conversion,
        ),
    ];
    for (g, (label, count, probs)) in groups.into_iter().enumerate() {
        for i in 0..count {
            let mut layer_reached = vec![false; n_layers];
            layer_reached[0] = true;
            for (k, p) in probs.iter().enumerate() {
                if uniform(&mut rng) < *p {
                    layer_reached[k + 1] = true;
                } else {
                    break;
                }
            }
            for (k, reached) in layer_reached.iter().enumerate() {
                totals[g][k] += u64::from(*reached);
            }
            units.push(UnitRecord {
                unit_id: format!("s{index}-{label}-{i}"),
                group: label.clone(),
                covariates: covariates.clone(),
                layer_reached,
            });
        }
    }
    let [focal, reference] = totals;
    (units, focal, reference)
}

pub fn generate(spec: &PopulationSpec) -> Result<GeneratedPopulation> {
    spec.validate()?;
    let parts: Vec<_> = spec
        .strata
        .par_iter()
        .enumerate()
        .map(|(i, s)| generate_stratum(spec, i, s))
        .collect();
    let n_layers = spec.layers.len();
    let mut out = GeneratedPopulation {
        units: Vec::with_capacity(spec.total_units() as usize),
        focal_totals: vec![0; n_layers],
        reference_totals: vec![0; n_layers],
    };
    for (units, focal, reference) in parts {
        out.units.extend(units);
        for k in 0..n_layers {
            out.focal_totals[k] += focal[k];
            out.reference_totals[k] += reference[k];
        }
    }
    Ok(out)
}

/// Expected units of each group reaching `layer` in every stratum.
pub fn expected_counts(spec: &PopulationSpec, layer: usize) -> Vec<(f64, f64)> {
    spec.strata
        .iter()
        .map(|s| {
            let survive = |base: u64, probs: &[f64]| {
                probs[..layer].iter().fold(base as f64, |acc, p| acc * p)
            };
            (
                survive(s.focal_count, &s.focal_conversion),
                survive(s.reference_count, &s.reference_conversion),
            )
        })
        .collect()
}

/// Adjusted survival ratio for `from_layer -> from_layer + 1` evaluated at
/// the true conversion probabilities, with matching weights computed from
/// expected stratum counts.
pub fn oracle_adjusted_ratio(spec: &PopulationSpec, from_layer: usize) -> Result<f64> {
    spec.validate()?;
    if from_layer + 1 >= spec.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "no transition out of layer {from_layer}"
        )));
    }
    let expected = expected_counts(spec, from_layer);
    let matched: Vec<usize> = (0..spec.strata.len())
        .filter(|&i| expected[i].0 > 0.0 && expected[i].1 > 0.0)
        .collect();
    if matched.is_empty() {
        return Err(Error::NoOverlap {
            layer: spec.layers[from_layer].clone(),
        });
    }
    let m_t: f64 = matched.iter().map(|&i| expected[i].0).sum();
    let m_c: f64 = matched.iter().map(|&i| expected[i].1).sum();
    let m = m_t + m_c;
    let (mut num_t, mut den_t, mut num_c, mut den_c) = (0.0, 0.0, 0.0, 0.0);
    for &i in &matched {
        let (e_t, e_c) = expected[i];
        let share = (e_t + e_c) / m;
        // Group weight mass in the stratum: m_T^s * (m_T / m_T^s) * (m^s / m).
        let (w_t, w_c) = (m_t * share, m_c * share);
        let s = &spec.strata[i];
        num_t += s.focal_conversion[from_layer] * w_t;
        den_t += w_t;
        num_c += s.reference_conversion[from_layer] * w_c;
        den_c += w_c;
    }
    let reference_rate = num_c / den_c;
    if reference_rate == 0.0 {
        return Err(Error::undefined("oracle adjusted ratio"));
    }
    Ok((num_t / den_t) / reference_rate)
}

/// Writes units as the CSV that ingest reads by default:
/// `unit_id,group,<covariates...>,<layers...>` with 0/1 flags.
pub fn write_units_csv<W: Write>(
    out: W,
    covariates: &[String],
    layers: &[String],
    units: &[UnitRecord],
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let header: Vec<&str> = ["unit_id", "group"]
        .into_iter()
        .chain(covariates.iter().map(String::as_str))
        .chain(layers.iter().map(String::as_str))
        .collect();
    writer.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for unit in units {
        row.clear();
        row.push(unit.unit_id.clone());
        row.push(unit.group.clone());
        row.extend(unit.covariates.iter().map(ToString::to_string));
        row.extend(
            unit.layer_reached
                .iter()
                .map(|r| if *r { "1" } else { "0" }.to_owned()),
        );
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: "units csv".into(),
        source,
    })?;
    Ok(())
}

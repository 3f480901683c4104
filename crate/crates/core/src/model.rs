//! Domain types shared across the crate.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::CiMethod;
use crate::status::ThresholdProfile;

/// Bucket assigned to covariate values that no coarsening rule covers.
pub const UNKNOWN_BUCKET: &str = "UNKNOWN";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupRole {
    Focal,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroupLabel {
    pub name: String,
    pub role: GroupRole,
}

impl GroupLabel {
    pub fn focal(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role: GroupRole::Focal,
        }
    }

    pub fn reference(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role: GroupRole::Reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Numeric(f64),
    Categorical(String),
}

impl fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateValue::Numeric(v) => write!(f, "{v}"),
            CovariateValue::Categorical(s) => f.write_str(s),
        }
    }
}

/// One member of the analysed population.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    /// Group label name; its role comes from the analysis config.
    pub group: String,
    pub covariates: Vec<CovariateValue>,
    pub layer_reached: Vec<bool>,
}

impl UnitRecord {
    /// Index of the first layer reached without its predecessor, if any.
    pub fn monotonicity_break(&self) -> Option<usize> {
        self.layer_reached
            .windows(2)
            .position(|w| w[1] && !w[0])
            .map(|i| i + 1)
    }

    pub fn reached(&self, layer: usize) -> bool {
        self.layer_reached.get(layer).copied().unwrap_or(false)
    }

    /// Number of consecutive layers reached from the top of the funnel.
    pub fn depth(&self) -> usize {
        self.layer_reached.iter().take_while(|r| **r).count()
    }
}

/// Ordered funnel layers; layer 0 is the base population.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunnelSpec {
    layers: Vec<String>,
}

impl FunnelSpec {
    pub fn new<I, S>(layers: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let layers: Vec<String> = layers.into_iter().map(Into::into).collect();
        if layers.len() < 2 {
            return Err(Error::config(
                "funnel.layers",
                "a funnel needs at least two layers",
            ));
        }
        let mut seen = HashSet::new();
        for name in &layers {
            if name.trim().is_empty() {
                return Err(Error::config(
                    "funnel.layers",
                    "layer names must be non-empty",
                ));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::config(
                    "funnel.layers",
                    format!("duplicate layer name '{name}'"),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn base_layer(&self) -> usize {
        0
    }

    /// Number of survival transitions, always `len() - 1`.
    pub fn transitions(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn name(&self, layer: usize) -> &str {
        &self.layers[layer]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CovariateKind {
    /// Value-to-bucket recoding; unmapped values fall into `catch_all`, or
    /// into [`UNKNOWN_BUCKET`] when none is declared. An empty map is the
    /// identity coarsening.
    Categorical {
        buckets: BTreeMap<String, String>,
        catch_all: Option<String>,
    },
    /// Left-closed bins split at `cut_points`. `None` means quintile cuts
    /// computed over the pooled population.
    Numeric { cut_points: Option<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

impl CovariateSpec {
    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Categorical {
                buckets: BTreeMap::new(),
                catch_all: None,
            },
        }
    }

    pub fn categorical_with_buckets(
        name: impl Into<String>,
        buckets: BTreeMap<String, String>,
        catch_all: Option<String>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Categorical { buckets, catch_all },
        }
    }

    pub fn numeric(name: impl Into<String>, cut_points: Vec<f64>) -> Result<Self> {
        let name = name.into();
        check_cut_points(&name, &cut_points)?;
        Ok(Self {
            name,
            kind: CovariateKind::Numeric {
                cut_points: Some(cut_points),
            },
        })
    }

    pub fn numeric_quintiles(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Numeric { cut_points: None },
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, CovariateKind::Numeric { .. })
    }
}

pub(crate) fn check_cut_points(name: &str, cuts: &[f64]) -> Result<()> {
    if cuts.iter().any(|c| !c.is_finite()) {
        return Err(Error::config(
            format!("covariates.{name}.cut_points"),
            "cut points must be finite",
        ));
    }
    if cuts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(
            format!("covariates.{name}.cut_points"),
            "cut points not increasing",
        ));
    }
    Ok(())
}

/// How focal and reference are assigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Roles are taken as configured.
    Fixed,
    /// Roles are swapped if needed so the base-layer raw ratio is at most 1.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub funnel: FunnelSpec,
    pub focal_group: GroupLabel,
    pub reference_group: GroupLabel,
    pub orientation: Orientation,
    pub covariates: Vec<CovariateSpec>,
    pub color_profile: ThresholdProfile,
    pub confidence_level: f64,
    pub ci_method: CiMethod,
    pub bootstrap_resamples: usize,
}

impl AnalysisConfig {
    pub const DEFAULT_CONFIDENCE_LEVEL: f64 = 0.95;
    pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;

    /// Config with defaults: no covariates, middle profile, 95% level, Katz intervals.
    pub fn new(funnel: FunnelSpec, focal: &str, reference: &str) -> Result<Self> {
        let config = Self {
            funnel,
            focal_group: GroupLabel::focal(focal),
            reference_group: GroupLabel::reference(reference),
            orientation: Orientation::Fixed,
            covariates: Vec::new(),
            color_profile: ThresholdProfile::middle(),
            confidence_level: Self::DEFAULT_CONFIDENCE_LEVEL,
            ci_method: CiMethod::Katz,
            bootstrap_resamples: Self::DEFAULT_BOOTSTRAP_RESAMPLES,
        };
        config.check()?;
        Ok(config)
    }

    pub fn with_covariates(mut self, covariates: Vec<CovariateSpec>) -> Result<Self> {
        self.covariates = covariates;
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        if self.focal_group.name == self.reference_group.name {
            return Err(Error::config(
                "groups",
                "focal and reference groups must differ",
            ));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(Error::config(
                "inference.confidence_level",
                "must lie strictly between 0 and 1",
            ));
        }
        let mut names = HashSet::new();
        for cov in &self.covariates {
            if cov.name.trim().is_empty() {
                return Err(Error::config(
                    "covariates",
                    "covariate names must be non-empty",
                ));
            }
            if !names.insert(cov.name.as_str()) {
                return Err(Error::config(
                    "covariates",
                    format!("duplicate covariate '{}'", cov.name),
                ));
            }
            if let CovariateKind::Numeric {
                cut_points: Some(cuts),
            } = &cov.kind
            {
                check_cut_points(&cov.name, cuts)?;
            }
        }
        Ok(())
    }

    pub fn role_of(&self, group: &str) -> Option<GroupRole> {
        if group == self.focal_group.name {
            Some(GroupRole::Focal)
        } else if group == self.reference_group.name {
            Some(GroupRole::Reference)
        } else {
            None
        }
    }

    /// Resolves [`Orientation::Auto`] against the base-layer counts of `units`.
    pub fn oriented(&self, units: &[UnitRecord]) -> AnalysisConfig {
        let mut config = self.clone();
        if self.orientation == Orientation::Fixed {
            return config;
        }
        let (mut focal, mut reference) = (0u64, 0u64);
        for unit in units.iter().filter(|u| u.reached(0)) {
            match self.role_of(&unit.group) {
                Some(GroupRole::Focal) => focal += 1,
                Some(GroupRole::Reference) => reference += 1,
                None => {}
            }
        }
        if focal > reference {
            config.focal_group = GroupLabel::focal(self.reference_group.name.clone());
            config.reference_group = GroupLabel::reference(self.focal_group.name.clone());
        }
        config.orientation = Orientation::Fixed;
        config
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    MissingColumn { column: String },
    Malformed { message: String },
    DuplicateUnitId,
    UnknownGroup { label: String },
    NonMonotone { layer: String },
    CovariateArity { expected: usize, found: usize },
    LayerArity { expected: usize, found: usize },
    NanCovariate { covariate: String },
    EmptyLayer { layer: String, group: String },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::MissingColumn { column } => write!(f, "missing column '{column}'"),
            ViolationKind::Malformed { message } => f.write_str(message),
            ViolationKind::DuplicateUnitId => f.write_str("duplicate unit_id"),
            ViolationKind::UnknownGroup { label } => write!(f, "unknown group label '{label}'"),
            ViolationKind::NonMonotone { layer } => {
                write!(
                    f,
                    "non-monotone funnel flags: layer '{layer}' reached without its predecessor"
                )
            }
            ViolationKind::CovariateArity { expected, found } => {
                write!(
                    f,
                    "covariate arity mismatch: expected {expected}, found {found}"
                )
            }
            ViolationKind::LayerArity { expected, found } => {
                write!(
                    f,
                    "layer arity mismatch: expected {expected}, found {found}"
                )
            }
            ViolationKind::NanCovariate { covariate } => {
                write!(f, "covariate '{covariate}' is NaN")
            }
            ViolationKind::EmptyLayer { layer, group } => {
                write!(f, "layer '{layer}' has no units of group '{group}'")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub line: Option<u64>,
    pub unit_id: Option<String>,
    pub kind: ViolationKind,
}

impl Violation {
    pub fn new(kind: ViolationKind) -> Self {
        Self {
            line: None,
            unit_id: None,
            kind,
        }
    }

    pub fn for_unit(unit_id: &str, kind: ViolationKind) -> Self {
        Self {
            line: None,
            unit_id: Some(unit_id.to_owned()),
            kind,
        }
    }

    pub fn at_line(mut self, line: u64) -> Self {
        self.line = Some(line);
        self
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(id) = &self.unit_id {
            write!(f, "unit '{id}': ")?;
        }
        write!(f, "{}", self.kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

/// Checks that a single unit fits the config. Shared by ingest and [`validate_config`].
pub(crate) fn unit_violations(config: &AnalysisConfig, unit: &UnitRecord) -> Vec<ViolationKind> {
    let mut out = Vec::new();
    if config.role_of(&unit.group).is_none() {
        out.push(ViolationKind::UnknownGroup {
            label: unit.group.clone(),
        });
    }
    if unit.covariates.len() != config.covariates.len() {
        out.push(ViolationKind::CovariateArity {
            expected: config.covariates.len(),
            found: unit.covariates.len(),
        });
    } else {
        for (spec, value) in config.covariates.iter().zip(&unit.covariates) {
            if matches!(value, CovariateValue::Numeric(v) if v.is_nan()) {
                out.push(ViolationKind::NanCovariate {
                    covariate: spec.name.clone(),
                });
            }
        }
    }
    if unit.layer_reached.len() != config.funnel.len() {
        out.push(ViolationKind::LayerArity {
            expected: config.funnel.len(),
            found: unit.layer_reached.len(),
        });
    } else if let Some(k) = unit.monotonicity_break() {
        out.push(ViolationKind::NonMonotone {
            layer: config.funnel.name(k).to_owned(),
        });
    }
    out
}

/// Lists every problem with `units` under `config`. Never aborts.
pub fn validate_config(config: &AnalysisConfig, units: &[UnitRecord]) -> ValidationReport {
    let mut violations = Vec::new();
    if let Err(e) = config.check() {
        violations.push(Violation::new(ViolationKind::Malformed {
            message: e.to_string(),
        }));
    }

    let n_layers = config.funnel.len();
    let mut focal = vec![0u64; n_layers];
    let mut reference = vec![0u64; n_layers];
    let mut seen = HashSet::new();
    for unit in units {
        if !seen.insert(unit.unit_id.as_str()) {
            violations.push(Violation::for_unit(
                &unit.unit_id,
                ViolationKind::DuplicateUnitId,
            ));
        }
        let problems = unit_violations(config, unit);
        if problems.is_empty() {
            let counts = match config.role_of(&unit.group) {
                Some(GroupRole::Focal) => &mut focal,
                _ => &mut reference,
            };
            for (k, reached) in unit.layer_reached.iter().enumerate() {
                counts[k] += u64::from(*reached);
            }
        }
        violations.extend(
            problems
                .into_iter()
                .map(|kind| Violation::for_unit(&unit.unit_id, kind)),
        );
    }

    for k in 0..n_layers {
        for (count, group) in [
            (focal[k], &config.focal_group.name),
            (reference[k], &config.reference_group.name),
        ] {
            if count == 0 {
                violations.push(Violation::new(ViolationKind::EmptyLayer {
                    layer: config.funnel.name(k).to_owned(),
                    group: group.clone(),
                }));
            }
        }
    }
    ValidationReport { violations }
}

//! Loading unit records, pre-aggregated counts and analysis configs.
//!
//! Units come as UTF-8 CSV (comma delimiter, header required, `.` decimal
//! point) or as JSON lines with the same field names. Layer flags accept
//! `0`, `1`, `true` and `false`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::inference::CiMethod;
use crate::metrics::FunnelCounts;
use crate::model::{
    self, AnalysisConfig, CovariateKind, CovariateSpec, CovariateValue, FunnelSpec, GroupLabel,
    Orientation, UnitRecord, Violation, ViolationKind,
};
use crate::status::ThresholdProfile;

/// Which input columns feed which unit fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMapping {
    pub unit_id_column: String,
    pub group_column: String,
    pub covariate_columns: Vec<String>,
    pub layer_columns: Vec<String>,
}

impl ColumnMapping {
    /// `unit_id`, `group`, then covariate and layer names as columns.
    pub fn default_for(config: &AnalysisConfig) -> Self {
        Self {
            unit_id_column: "unit_id".into(),
            group_column: "group".into(),
            covariate_columns: config.covariates.iter().map(|c| c.name.clone()).collect(),
            layer_columns: config.funnel.layers().to_vec(),
        }
    }

    fn all_columns(&self) -> impl Iterator<Item = &String> {
        [&self.unit_id_column, &self.group_column]
            .into_iter()
            .chain(&self.covariate_columns)
            .chain(&self.layer_columns)
    }

    fn check(&self, config: &AnalysisConfig) -> Result<()> {
        if self.covariate_columns.len() != config.covariates.len() {
            return Err(Error::config(
                "columns.covariates",
                format!(
                    "expected {} covariate columns, found {}",
                    config.covariates.len(),
                    self.covariate_columns.len()
                ),
            ));
        }
        if self.layer_columns.len() != config.funnel.len() {
            return Err(Error::config(
                "columns.layers",
                format!(
                    "expected {} layer columns, found {}",
                    config.funnel.len(),
                    self.layer_columns.len()
                ),
            ));
        }
        let mut seen = HashSet::new();
        for col in self.all_columns() {
            if !seen.insert(col) {
                return Err(Error::config(
                    "columns",
                    format!("column '{col}' used twice"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitFormat {
    Csv,
    JsonLines,
}

impl UnitFormat {
    /// `.jsonl` and `.ndjson` files are JSON lines; everything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => UnitFormat::JsonLines,
            _ => UnitFormat::Csv,
        }
    }
}

/// Units as parsed, before unit-level checks, with their source lines.
#[derive(Clone, Debug, Default)]
pub struct ScannedUnits {
    pub units: Vec<UnitRecord>,
    pub lines: Vec<u64>,
    /// Rows that could not be turned into a unit at all.
    pub row_errors: Vec<Violation>,
}

impl ScannedUnits {
    /// Every problem in the source, row errors first, each tagged with its line.
    pub fn violations(&self, config: &AnalysisConfig) -> Vec<Violation> {
        let line_of: HashMap<&str, u64> = self
            .units
            .iter()
            .zip(&self.lines)
            .rev()
            .map(|(u, l)| (u.unit_id.as_str(), *l))
            .collect();
        let mut out = self.row_errors.clone();
        let mut seen = HashSet::new();
        for (unit, line) in self.units.iter().zip(&self.lines) {
            if !seen.insert(unit.unit_id.as_str()) {
                out.push(
                    Violation::for_unit(&unit.unit_id, ViolationKind::DuplicateUnitId)
                        .at_line(*line),
                );
            }
            out.extend(
                model::unit_violations(config, unit)
                    .into_iter()
                    .map(|k| Violation::for_unit(&unit.unit_id, k).at_line(*line)),
            );
        }
        // Layer-level findings come from the full validation pass.
        out.extend(
            model::validate_config(config, &self.units)
                .violations
                .into_iter()
                .filter(|v| {
                    matches!(
                        v.kind,
                        ViolationKind::EmptyLayer { .. } | ViolationKind::Malformed { .. }
                    )
                }),
        );
        out.sort_by_key(|v| {
            v.line
                .or_else(|| v.unit_id.as_deref().and_then(|id| line_of.get(id).copied()))
                .unwrap_or(u64::MAX)
        });
        out
    }
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.trim() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

fn parse_covariate(spec: &CovariateSpec, raw: &str) -> std::result::Result<CovariateValue, String> {
    match spec.kind {
        CovariateKind::Categorical { .. } => Ok(CovariateValue::Categorical(raw.to_owned())),
        CovariateKind::Numeric { .. } => {
            let t = raw.trim();
            if t.is_empty() {
                return Ok(CovariateValue::Categorical(String::new()));
            }
            t.parse::<f64>()
                .map(CovariateValue::Numeric)
                .map_err(|_| format!("covariate '{}': '{raw}' is not a number", spec.name))
        }
    }
}

/// Reads units leniently: structural problems are recorded per row instead of aborting.
pub fn scan_units<R: Read>(
    reader: R,
    format: UnitFormat,
    mapping: &ColumnMapping,
    config: &AnalysisConfig,
) -> Result<ScannedUnits> {
    mapping.check(config)?;
    match format {
        UnitFormat::Csv => scan_csv(reader, mapping, config),
        UnitFormat::JsonLines => scan_json_lines(reader, mapping, config),
    }
}

fn scan_csv<R: Read>(
    reader: R,
    mapping: &ColumnMapping,
    config: &AnalysisConfig,
) -> Result<ScannedUnits> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &String| -> Result<usize> {
        index
            .get(name.as_str())
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.clone()))
    };
    let id_col = col(&mapping.unit_id_column)?;
    let group_col = col(&mapping.group_column)?;
    let cov_cols = mapping
        .covariate_columns
        .iter()
        .map(col)
        .collect::<Result<Vec<_>>>()?;
    let layer_cols = mapping
        .layer_columns
        .iter()
        .map(col)
        .collect::<Result<Vec<_>>>()?;

    let mut out = ScannedUnits::default();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Malformed {
                line,
                message: e.to_string(),
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            out.row_errors.push(
                Violation::new(ViolationKind::Malformed {
                    message: format!("expected {} fields, found {}", headers.len(), record.len()),
                })
                .at_line(line),
            );
            continue;
        }
        let row = (|| -> std::result::Result<UnitRecord, String> {
            let covariates = config
                .covariates
                .iter()
                .zip(&cov_cols)
                .map(|(spec, &i)| parse_covariate(spec, &record[i]))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let layer_reached = mapping
                .layer_columns
                .iter()
                .zip(&layer_cols)
                .map(|(name, &i)| {
                    parse_flag(&record[i]).ok_or_else(|| {
                        format!(
                            "column '{name}': '{}' is not a 0/1/true/false flag",
                            &record[i]
                        )
                    })
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(UnitRecord {
                unit_id: record[id_col].to_owned(),
                group: record[group_col].to_owned(),
                covariates,
                layer_reached,
            })
        })();
        match row {
            Ok(unit) => {
                out.units.push(unit);
                out.lines.push(line);
            }
            Err(message) => out
                .row_errors
                .push(Violation::new(ViolationKind::Malformed { message }).at_line(line)),
        }
    }
    Ok(out)
}

fn json_text(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        serde_json::Value::Null => Some(String::new()),
        _ => None,
    }
}

fn json_unit(
    obj: &serde_json::Map<String, serde_json::Value>,
    mapping: &ColumnMapping,
    config: &AnalysisConfig,
) -> std::result::Result<UnitRecord, ViolationKind> {
    let text = |name: &String| -> std::result::Result<String, ViolationKind> {
        let value = obj.get(name).ok_or_else(|| ViolationKind::MissingColumn {
            column: name.clone(),
        })?;
        json_text(value).ok_or_else(|| ViolationKind::Malformed {
            message: format!("field '{name}' must be a scalar"),
        })
    };
    let unit_id = text(&mapping.unit_id_column)?;
    let group = text(&mapping.group_column)?;
    // Absent covariates shorten the list and surface as an arity violation.
    let mut covariates = Vec::with_capacity(config.covariates.len());
    for (spec, name) in config.covariates.iter().zip(&mapping.covariate_columns) {
        let Some(value) = obj.get(name) else { continue };
        let parsed = match (value, &spec.kind) {
            (serde_json::Value::Number(n), CovariateKind::Numeric { .. }) => {
                CovariateValue::Numeric(n.as_f64().unwrap_or(f64::NAN))
            }
            (value, _) => {
                let raw = json_text(value).ok_or_else(|| ViolationKind::Malformed {
                    message: format!("field '{name}' must be a scalar"),
                })?;
                parse_covariate(spec, &raw)
                    .map_err(|message| ViolationKind::Malformed { message })?
            }
        };
        covariates.push(parsed);
    }
    let mut layer_reached = Vec::with_capacity(mapping.layer_columns.len());
    for name in &mapping.layer_columns {
        let value = obj.get(name).ok_or_else(|| ViolationKind::MissingColumn {
            column: name.clone(),
        })?;
        let flag = match value {
            serde_json::Value::Bool(b) => Some(*b),
            other => json_text(other).as_deref().and_then(parse_flag),
        };
        layer_reached.push(flag.ok_or_else(|| ViolationKind::Malformed {
            message: format!("column '{name}': {value} is not a 0/1/true/false flag"),
        })?);
    }
    Ok(UnitRecord {
        unit_id,
        group,
        covariates,
        layer_reached,
    })
}

fn scan_json_lines<R: Read>(
    reader: R,
    mapping: &ColumnMapping,
    config: &AnalysisConfig,
) -> Result<ScannedUnits> {
    let mut out = ScannedUnits::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.row_errors.push(
                    Violation::new(ViolationKind::Malformed {
                        message: e.to_string(),
                    })
                    .at_line(line_no),
                );
                continue;
            }
        };
        let Some(obj) = parsed.as_object() else {
            out.row_errors.push(
                Violation::new(ViolationKind::Malformed {
                    message: "expected a JSON object".into(),
                })
                .at_line(line_no),
            );
            continue;
        };
        match json_unit(obj, mapping, config) {
            Ok(unit) => {
                out.units.push(unit);
                out.lines.push(line_no);
            }
            Err(kind) => out.row_errors.push(Violation::new(kind).at_line(line_no)),
        }
    }
    Ok(out)
}

/// Loads units, failing on the first problem with its line number.
pub fn load_units<R: Read>(
    reader: R,
    format: UnitFormat,
    mapping: &ColumnMapping,
    config: &AnalysisConfig,
) -> Result<Vec<UnitRecord>> {
    let scanned = scan_units(reader, format, mapping, config)?;
    if let Some(v) = scanned.row_errors.first() {
        return Err(Error::Invalid(v.clone()));
    }
    let mut seen = HashSet::new();
    for (unit, line) in scanned.units.iter().zip(&scanned.lines) {
        if !seen.insert(unit.unit_id.as_str()) {
            return Err(Error::Invalid(
                Violation::for_unit(&unit.unit_id, ViolationKind::DuplicateUnitId).at_line(*line),
            ));
        }
        if let Some(kind) = model::unit_violations(config, unit).into_iter().next() {
            return Err(Error::Invalid(
                Violation::for_unit(&unit.unit_id, kind).at_line(*line),
            ));
        }
    }
    Ok(scanned.units)
}

pub fn load_units_file(
    path: &Path,
    mapping: &ColumnMapping,
    config: &AnalysisConfig,
) -> Result<Vec<UnitRecord>> {
    let file = open(path)?;
    load_units(file, UnitFormat::from_path(path), mapping, config)
}

pub(crate) fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads pre-aggregated counts: header `layer,<focal label>,<reference label>`
/// (group columns in either order), one row per funnel layer in funnel order.
pub fn load_counts<R: Read>(reader: R, config: &AnalysisConfig) -> Result<FunnelCounts> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let layer_col = find("layer")?;
    let focal_col = find(&config.focal_group.name)?;
    let reference_col = find(&config.reference_group.name)?;
    let mut layers = Vec::new();
    let mut focal = Vec::new();
    let mut reference = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let count = |i: usize| {
            record[i]
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Malformed {
                    line,
                    message: format!("'{}' is not a non-negative integer count", &record[i]),
                })
        };
        layers.push(record[layer_col].to_owned());
        focal.push(count(focal_col)?);
        reference.push(count(reference_col)?);
    }
    if layers.as_slice() != config.funnel.layers() {
        return Err(Error::Mismatch(format!(
            "count rows {:?} do not match funnel layers {:?}",
            layers,
            config.funnel.layers()
        )));
    }
    FunnelCounts::new(layers, focal, reference)
}

// ---- config file -------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    funnel: Option<RawFunnel>,
    groups: Option<RawGroups>,
    columns: Option<RawColumns>,
    #[serde(default)]
    covariates: Vec<RawCovariate>,
    thresholds: Option<RawThresholds>,
    inference: Option<RawInference>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFunnel {
    layers: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroups {
    focal: Option<String>,
    reference: Option<String>,
    labels: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawColumns {
    unit_id: Option<String>,
    group: Option<String>,
    covariates: Option<Vec<String>>,
    layers: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Number {
    Int(i64),
    Float(f64),
}

impl Number {
    fn value(&self) -> f64 {
        match self {
            Number::Int(i) => *i as f64,
            Number::Float(f) => *f,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCovariate {
    name: Option<String>,
    kind: Option<String>,
    cut_points: Option<Vec<Number>>,
    buckets: Option<BTreeMap<String, String>>,
    catch_all: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThresholds {
    profile: Option<String>,
    green_below: Option<Number>,
    red_above: Option<Number>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInference {
    confidence_level: Option<Number>,
    ci_method: Option<String>,
    bootstrap_resamples: Option<u64>,
}

/// Parsed config file: the analysis plus the column layout of unit files.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub analysis: AnalysisConfig,
    pub columns: ColumnMapping,
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(key, "missing required key"))
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_owned()))?;

        let funnel_raw = required(raw.funnel, "funnel")?;
        let funnel = FunnelSpec::new(required(funnel_raw.layers, "funnel.layers")?)?;

        let groups = required(raw.groups, "groups")?;
        let (focal, reference, orientation) = match (groups.focal, groups.reference, groups.labels)
        {
            (Some(f), Some(r), None) => (f, r, Orientation::Fixed),
            (None, None, Some(labels)) => {
                let [a, b]: [String; 2] = labels.try_into().map_err(|_| {
                    Error::config("groups.labels", "exactly two group labels are required")
                })?;
                (a, b, Orientation::Auto)
            }
            (None, None, None) => {
                return Err(Error::config("groups.focal", "missing required key"))
            }
            (Some(_), None, None) => {
                return Err(Error::config("groups.reference", "missing required key"))
            }
            (None, Some(_), None) => {
                return Err(Error::config("groups.focal", "missing required key"))
            }
            _ => {
                return Err(Error::config(
                    "groups.labels",
                    "give either focal/reference or labels, not both",
                ))
            }
        };

        let mut covariates = Vec::with_capacity(raw.covariates.len());
        for (i, c) in raw.covariates.into_iter().enumerate() {
            let name = required(c.name, &format!("covariates[{i}].name"))?;
            let kind = required(c.kind, &format!("covariates.{name}.kind"))?;
            let spec = match kind.as_str() {
                "categorical" => {
                    if c.cut_points.is_some() {
                        return Err(Error::config(
                            format!("covariates.{name}.cut_points"),
                            "cut points apply to numeric covariates only",
                        ));
                    }
                    CovariateSpec::categorical_with_buckets(
                        name,
                        c.buckets.unwrap_or_default(),
                        c.catch_all,
                    )
                }
                "numeric" => {
                    if c.buckets.is_some() || c.catch_all.is_some() {
                        return Err(Error::config(
                            format!("covariates.{name}.buckets"),
                            "bucket maps apply to categorical covariates only",
                        ));
                    }
                    match c.cut_points {
                        Some(cuts) => {
                            CovariateSpec::numeric(name, cuts.iter().map(Number::value).collect())?
                        }
                        None => CovariateSpec::numeric_quintiles(name),
                    }
                }
                other => {
                    return Err(Error::config(
                        format!("covariates.{name}.kind"),
                        format!("unknown covariate kind '{other}' (categorical | numeric)"),
                    ))
                }
            };
            covariates.push(spec);
        }

        let color_profile = match raw.thresholds {
            None => ThresholdProfile::middle(),
            Some(t) => {
                let profile = t.profile.unwrap_or_else(|| "middle".into());
                match (profile.as_str(), t.green_below, t.red_above) {
                    ("custom", Some(g), Some(r)) => ThresholdProfile::custom(g.value(), r.value())?,
                    ("custom", _, _) => {
                        return Err(Error::config(
                            "thresholds.green_below",
                            "custom profile needs green_below and red_above",
                        ))
                    }
                    (name, None, None) => name.parse()?,
                    _ => {
                        return Err(Error::config(
                            "thresholds.profile",
                            "green_below/red_above require profile = \"custom\"",
                        ))
                    }
                }
            }
        };

        let (mut level, mut ci_method, mut resamples) = (
            AnalysisConfig::DEFAULT_CONFIDENCE_LEVEL,
            CiMethod::Katz,
            AnalysisConfig::DEFAULT_BOOTSTRAP_RESAMPLES,
        );
        if let Some(inf) = raw.inference {
            if let Some(l) = inf.confidence_level {
                level = l.value();
            }
            if let Some(m) = inf.ci_method {
                ci_method = match m.as_str() {
                    "katz" => CiMethod::Katz,
                    "bootstrap" => CiMethod::Bootstrap,
                    other => {
                        return Err(Error::config(
                            "inference.ci_method",
                            format!("unknown method '{other}' (katz | bootstrap)"),
                        ))
                    }
                };
            }
            if let Some(r) = inf.bootstrap_resamples {
                if r == 0 {
                    return Err(Error::config(
                        "inference.bootstrap_resamples",
                        "must be positive",
                    ));
                }
                resamples = r as usize;
            }
        }

        let analysis = AnalysisConfig {
            funnel,
            focal_group: GroupLabel::focal(focal),
            reference_group: GroupLabel::reference(reference),
            orientation,
            covariates,
            color_profile,
            confidence_level: level,
            ci_method,
            bootstrap_resamples: resamples,
        };
        analysis.check()?;

        let mut columns = ColumnMapping::default_for(&analysis);
        if let Some(c) = raw.columns {
            if let Some(v) = c.unit_id {
                columns.unit_id_column = v;
            }
            if let Some(v) = c.group {
                columns.group_column = v;
            }
            if let Some(v) = c.covariates {
                columns.covariate_columns = v;
            }
            if let Some(v) = c.layers {
                columns.layer_columns = v;
            }
        }
        columns.check(&analysis)?;
        Ok(Self { analysis, columns })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// Loads and validates an analysis config file.
pub fn load_config(path: &Path) -> Result<AnalysisConfig> {
    ConfigFile::load(path).map(|c| c.analysis)
}

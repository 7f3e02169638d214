//! Observed-data model with explicit missingness indicators.
//!
//! A record carries baseline covariates, an exposure with its measurement
//! indicator, optionally a baseline outcome with its indicator, optionally
//! time-varying covariates, a follow-up outcome with its indicator, and a
//! cluster id. Which pieces are present is determined by the study scenario:
//!
//! - `S1`: complete data — covariates, exposure, outcome.
//! - `S2`: exposure subject to missingness.
//! - `S3`: exposure and follow-up outcome subject to missingness, with
//!   time-varying covariates between them.
//! - `S4`: additionally a baseline outcome subject to missingness; follow-up
//!   measurement only occurs among known baseline-negatives.
//!
//! Missing cells are spelled exactly `NA` on disk and held as a distinct
//! marker in memory, never as a numeric code. Consistency between indicators
//! and values is checked by [`validate`], which reports violations as data
//! rather than failing the load.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::{Error, Result};

/// Study scenario tag; fixes which record fields are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

impl Scenario {
    /// Baseline outcome (and its indicator) present?
    pub fn has_baseline_outcome(self) -> bool {
        matches!(self, Scenario::S4)
    }

    /// Time-varying covariates present?
    pub fn has_time_varying(self) -> bool {
        matches!(self, Scenario::S3 | Scenario::S4)
    }

    /// Exposure measurement can actually be incomplete?
    pub fn exposure_missable(self) -> bool {
        !matches!(self, Scenario::S1)
    }

    /// Follow-up outcome measurement can actually be incomplete?
    pub fn outcome_missable(self) -> bool {
        matches!(self, Scenario::S3 | Scenario::S4)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario '{other}' (expected S1..S4)"
            ))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::S1 => write!(f, "S1"),
            Scenario::S2 => write!(f, "S2"),
            Scenario::S3 => write!(f, "S3"),
            Scenario::S4 => write!(f, "S4"),
        }
    }
}

/// Feature type: real-valued or categorical with a declared level set.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    Real,
    Categorical(Vec<String>),
}

/// A named covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

impl Feature {
    pub fn real(name: &str) -> Self {
        Feature {
            name: name.to_string(),
            kind: FeatureKind::Real,
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        Feature {
            name: name.to_string(),
            kind: FeatureKind::Categorical(levels.iter().map(|s| s.to_string()).collect()),
        }
    }
}

/// Column declaration for a dataset: baseline features, time-varying
/// features, and the name of the clustering column.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub l0: Vec<Feature>,
    pub l1: Vec<Feature>,
    pub cluster_col: String,
}

impl Schema {
    pub fn new(l0: Vec<Feature>, l1: Vec<Feature>) -> Self {
        Schema {
            l0,
            l1,
            cluster_col: "cluster_id".to_string(),
        }
    }
}

/// A covariate value: real number or index into the declared level set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovValue {
    Real(f64),
    Cat(usize),
}

/// One participant row. `None` in an optional field means `NA` (for values)
/// or "not part of this scenario" (for `delta_y0`/`l1` under S1–S3).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedRecord {
    pub l0: Vec<CovValue>,
    pub delta_a: u8,
    pub a: Option<u8>,
    pub delta_y0: Option<u8>,
    pub y0: Option<u8>,
    pub l1: Option<Vec<CovValue>>,
    pub delta_y1: u8,
    pub y1: Option<u8>,
    pub cluster_id: String,
}

/// Immutable dataset: schema, scenario, records in file order, and a
/// cluster index. Construction sorts the distinct cluster ids so that all
/// downstream behavior is invariant to row order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: Schema,
    pub scenario: Scenario,
    pub records: Vec<ObservedRecord>,
    cluster_labels: Vec<String>,
    cluster_of: Vec<usize>,
}

impl Dataset {
    pub fn new(schema: Schema, scenario: Scenario, records: Vec<ObservedRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.l0.len() != schema.l0.len() {
                return Err(Error::InvalidConfig(format!(
                    "record {i} has {} baseline covariates, schema declares {}",
                    r.l0.len(),
                    schema.l0.len()
                )));
            }
            if let Some(l1) = &r.l1 {
                if l1.len() != schema.l1.len() {
                    return Err(Error::InvalidConfig(format!(
                        "record {i} has {} time-varying covariates, schema declares {}",
                        l1.len(),
                        schema.l1.len()
                    )));
                }
            }
            if r.cluster_id.is_empty() {
                return Err(Error::InvalidConfig(format!("record {i} has empty cluster id")));
            }
        }
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for r in &records {
            let next = index.len();
            index.entry(r.cluster_id.clone()).or_insert(next);
        }
        // BTreeMap iteration is sorted; re-number in sorted order.
        let cluster_labels: Vec<String> = index.keys().cloned().collect();
        let rank: BTreeMap<&str, usize> = cluster_labels
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let cluster_of = records
            .iter()
            .map(|r| rank[r.cluster_id.as_str()])
            .collect();
        Ok(Dataset {
            schema,
            scenario,
            records,
            cluster_labels,
            cluster_of,
        })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    /// Cluster index (0-based, in sorted label order) per record.
    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    /// Record indices per cluster, keyed by label.
    pub fn cluster_index(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.cluster_id.as_str()).or_default().push(i);
        }
        map
    }
}

// ---------------------------------------------------------------------------
// Design-matrix expansion
// ---------------------------------------------------------------------------

/// Resolved selection of adjustment features; categorical features one-hot
/// expand (reference level dropped) at this boundary, not at ingestion.
#[derive(Debug, Clone)]
pub struct FeatureSelection {
    l0: Vec<usize>,
    l1: Vec<usize>,
    width: usize,
}

impl FeatureSelection {
    /// Resolve feature names against the schema. `l1_names` must be empty
    /// for scenarios without time-varying covariates.
    pub fn resolve(schema: &Schema, l0_names: &[String], l1_names: &[String]) -> Result<Self> {
        let find = |feats: &[Feature], name: &String| -> Result<usize> {
            feats
                .iter()
                .position(|f| &f.name == name)
                .ok_or_else(|| Error::UnknownFeature(name.clone()))
        };
        let l0 = l0_names
            .iter()
            .map(|n| find(&schema.l0, n))
            .collect::<Result<Vec<_>>>()?;
        let l1 = l1_names
            .iter()
            .map(|n| find(&schema.l1, n))
            .collect::<Result<Vec<_>>>()?;
        let arity = |f: &Feature| match &f.kind {
            FeatureKind::Real => 1,
            FeatureKind::Categorical(levels) => levels.len().saturating_sub(1),
        };
        let width = l0.iter().map(|&i| arity(&schema.l0[i])).sum::<usize>()
            + l1.iter().map(|&i| arity(&schema.l1[i])).sum::<usize>();
        Ok(FeatureSelection { l0, l1, width })
    }

    /// All baseline features, no time-varying ones.
    pub fn all_l0(schema: &Schema) -> Self {
        let names: Vec<String> = schema.l0.iter().map(|f| f.name.clone()).collect();
        Self::resolve(schema, &names, &[]).expect("schema features resolve against themselves")
    }

    pub fn uses_l1(&self) -> bool {
        !self.l1.is_empty()
    }

    /// Number of expanded numeric columns.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Expanded numeric design row for record `i`, or `None` when a selected
    /// time-varying covariate is `NA` for that record.
    pub fn design_row(&self, dataset: &Dataset, i: usize) -> Option<Vec<f64>> {
        let r = &dataset.records[i];
        let mut out = Vec::with_capacity(self.width);
        for &fi in &self.l0 {
            expand_into(&dataset.schema.l0[fi], r.l0[fi], &mut out);
        }
        if !self.l1.is_empty() {
            let l1 = r.l1.as_ref()?;
            for &fi in &self.l1 {
                expand_into(&dataset.schema.l1[fi], l1[fi], &mut out);
            }
        }
        Some(out)
    }
}

fn expand_into(feature: &Feature, value: CovValue, out: &mut Vec<f64>) {
    match (&feature.kind, value) {
        (FeatureKind::Real, CovValue::Real(x)) => out.push(x),
        (FeatureKind::Categorical(levels), CovValue::Cat(c)) => {
            for level in 1..levels.len() {
                out.push(if c == level { 1.0 } else { 0.0 });
            }
        }
        // Mismatches are prevented at construction/parse time.
        (FeatureKind::Real, CovValue::Cat(_)) | (FeatureKind::Categorical(_), CovValue::Real(_)) => {
            unreachable!("covariate value inconsistent with schema kind")
        }
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// The structural rules checked by [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ValidationRule {
    /// `delta_a = 0` requires `a = NA`; `delta_a = 1` requires `a` observed.
    ExposureIndicatorMismatch,
    /// Same consistency for the baseline outcome (S4).
    BaselineIndicatorMismatch,
    /// Same consistency for the follow-up outcome.
    FollowupIndicatorMismatch,
    /// S4: follow-up testing only among known baseline-negatives
    /// (`delta_y1 = 1` requires `delta_y0 = 1` and `y0 = 0`).
    FollowupWithoutBaselineNegative,
    /// Scenario expects a measurement indicator to be constant 1.
    UnexpectedMissingness,
    /// S3 requires time-varying covariates on every record.
    MissingTimeVarying,
}

impl ValidationRule {
    pub fn name(self) -> &'static str {
        match self {
            ValidationRule::ExposureIndicatorMismatch => "exposure_indicator_mismatch",
            ValidationRule::BaselineIndicatorMismatch => "baseline_indicator_mismatch",
            ValidationRule::FollowupIndicatorMismatch => "followup_indicator_mismatch",
            ValidationRule::FollowupWithoutBaselineNegative => "followup_without_baseline_negative",
            ValidationRule::UnexpectedMissingness => "unexpected_missingness",
            ValidationRule::MissingTimeVarying => "missing_time_varying",
        }
    }
}

const ALL_RULES: [ValidationRule; 6] = [
    ValidationRule::ExposureIndicatorMismatch,
    ValidationRule::BaselineIndicatorMismatch,
    ValidationRule::FollowupIndicatorMismatch,
    ValidationRule::FollowupWithoutBaselineNegative,
    ValidationRule::UnexpectedMissingness,
    ValidationRule::MissingTimeVarying,
];

/// Violation counts per rule with the first offending row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RuleReport {
    pub rule: ValidationRule,
    pub count: usize,
    pub first_row: Option<usize>,
}

/// Outcome of [`validate`]: passes iff every count is zero.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationReport {
    pub rules: Vec<RuleReport>,
    pub pass: bool,
}

impl ValidationReport {
    pub fn count(&self, rule: ValidationRule) -> usize {
        self.rules
            .iter()
            .find(|r| r.rule == rule)
            .map(|r| r.count)
            .unwrap_or(0)
    }

    pub fn summary(&self) -> String {
        if self.pass {
            return "all structural rules satisfied".to_string();
        }
        self.rules
            .iter()
            .filter(|r| r.count > 0)
            .map(|r| {
                format!(
                    "{}: {} violation(s), first at row {}",
                    r.rule.name(),
                    r.count,
                    r.first_row.map(|i| i.to_string()).unwrap_or_default()
                )
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Check every structural invariant; violations are reported, not raised.
pub fn validate(dataset: &Dataset) -> ValidationReport {
    let mut counts = [0usize; 6];
    let mut first = [None::<usize>; 6];
    let hit = |rule: ValidationRule, row: usize, counts: &mut [usize; 6], first: &mut [Option<usize>; 6]| {
        let idx = ALL_RULES.iter().position(|r| *r == rule).unwrap();
        counts[idx] += 1;
        first[idx].get_or_insert(row);
    };

    let scen = dataset.scenario;
    for (i, r) in dataset.records.iter().enumerate() {
        let consistent = |delta: u8, value: Option<u8>| match delta {
            0 => value.is_none(),
            _ => value.is_some(),
        };
        if !consistent(r.delta_a, r.a) {
            hit(ValidationRule::ExposureIndicatorMismatch, i, &mut counts, &mut first);
        }
        if scen.has_baseline_outcome() {
            let dy0 = r.delta_y0.unwrap_or(1);
            if !consistent(dy0, r.y0) {
                hit(ValidationRule::BaselineIndicatorMismatch, i, &mut counts, &mut first);
            }
            if r.delta_y1 == 1 && !(dy0 == 1 && r.y0 == Some(0)) {
                hit(
                    ValidationRule::FollowupWithoutBaselineNegative,
                    i,
                    &mut counts,
                    &mut first,
                );
            }
        }
        if !consistent(r.delta_y1, r.y1) {
            hit(ValidationRule::FollowupIndicatorMismatch, i, &mut counts, &mut first);
        }
        if !scen.exposure_missable() && r.delta_a != 1 {
            hit(ValidationRule::UnexpectedMissingness, i, &mut counts, &mut first);
        }
        if !scen.outcome_missable() && r.delta_y1 != 1 {
            hit(ValidationRule::UnexpectedMissingness, i, &mut counts, &mut first);
        }
        if scen == Scenario::S3 && r.l1.is_none() {
            hit(ValidationRule::MissingTimeVarying, i, &mut counts, &mut first);
        }
    }

    let rules: Vec<RuleReport> = ALL_RULES
        .iter()
        .enumerate()
        .map(|(idx, &rule)| RuleReport {
            rule,
            count: counts[idx],
            first_row: first[idx],
        })
        .collect();
    let pass = counts.iter().all(|&c| c == 0);
    ValidationReport { rules, pass }
}

// ---------------------------------------------------------------------------
// CSV ingestion / emission
// ---------------------------------------------------------------------------

const NA: &str = "NA";

fn parse_indicator(cell: &str, row: usize, column: &str) -> Result<u8> {
    match cell.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::UnparseableCell {
            row,
            column: column.to_string(),
            value: other.to_string(),
        }),
    }
}

fn parse_binary_or_na(cell: &str, row: usize, column: &str) -> Result<Option<u8>> {
    match cell.trim() {
        NA => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(Error::UnparseableCell {
            row,
            column: column.to_string(),
            value: other.to_string(),
        }),
    }
}

fn parse_covariate(
    feature: &Feature,
    cell: &str,
    row: usize,
    column: &str,
) -> Result<Option<CovValue>> {
    let cell = cell.trim();
    if cell == NA {
        return Ok(None);
    }
    match &feature.kind {
        FeatureKind::Real => cell
            .parse::<f64>()
            .map(|v| Some(CovValue::Real(v)))
            .map_err(|_| Error::UnparseableCell {
                row,
                column: column.to_string(),
                value: cell.to_string(),
            }),
        FeatureKind::Categorical(levels) => levels
            .iter()
            .position(|l| l == cell)
            .map(|i| Some(CovValue::Cat(i)))
            .ok_or_else(|| Error::UnknownLevel {
                row,
                column: column.to_string(),
                value: cell.to_string(),
            }),
    }
}

/// Load a dataset from CSV. Declared columns must be present; `NA` is the
/// only missing marker. For S1 the `delta_a`/`delta_y1` columns (and for S2
/// the `delta_y1` column) may be omitted and default to 1. Extra columns are
/// ignored.
pub fn load_csv(path: &Path, scenario: Scenario, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| col(name).ok_or_else(|| Error::MissingColumn(name.to_string()));

    let l0_cols = schema
        .l0
        .iter()
        .map(|f| require(&format!("l0.{}", f.name)))
        .collect::<Result<Vec<_>>>()?;
    let l1_cols = if scenario.has_time_varying() {
        schema
            .l1
            .iter()
            .map(|f| require(&format!("l1.{}", f.name)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let delta_a_col = if scenario.exposure_missable() {
        Some(require("delta_a")?)
    } else {
        col("delta_a")
    };
    let a_col = require("a")?;
    let (delta_y0_col, y0_col) = if scenario.has_baseline_outcome() {
        (Some(require("delta_y0")?), Some(require("y0")?))
    } else {
        (None, None)
    };
    let delta_y1_col = if scenario.outcome_missable() {
        Some(require("delta_y1")?)
    } else {
        col("delta_y1")
    };
    let y1_col = require("y1")?;
    let cluster_col = require(&schema.cluster_col)?;

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let rec = result?;
        let cell = |idx: usize| rec.get(idx).unwrap_or("");

        let mut l0 = Vec::with_capacity(schema.l0.len());
        for (f, &ci) in schema.l0.iter().zip(&l0_cols) {
            let name = format!("l0.{}", f.name);
            match parse_covariate(f, cell(ci), row, &name)? {
                Some(v) => l0.push(v),
                None => {
                    return Err(Error::UnparseableCell {
                        row,
                        column: name,
                        value: NA.to_string(),
                    })
                }
            }
        }
        let l1 = if scenario.has_time_varying() {
            let mut vals = Vec::with_capacity(schema.l1.len());
            let mut n_missing = 0usize;
            for (f, &ci) in schema.l1.iter().zip(&l1_cols) {
                let name = format!("l1.{}", f.name);
                match parse_covariate(f, cell(ci), row, &name)? {
                    Some(v) => vals.push(v),
                    None => n_missing += 1,
                }
            }
            if n_missing == 0 {
                Some(vals)
            } else if n_missing == schema.l1.len() {
                None
            } else {
                return Err(Error::UnparseableCell {
                    row,
                    column: "l1.*".to_string(),
                    value: "partially NA time-varying covariates".to_string(),
                });
            }
        } else {
            None
        };

        let delta_a = match delta_a_col {
            Some(ci) => parse_indicator(cell(ci), row, "delta_a")?,
            None => 1,
        };
        let a = parse_binary_or_na(cell(a_col), row, "a")?;
        let delta_y0 = delta_y0_col
            .map(|ci| parse_indicator(cell(ci), row, "delta_y0"))
            .transpose()?;
        let y0 = y0_col
            .map(|ci| parse_binary_or_na(cell(ci), row, "y0"))
            .transpose()?
            .flatten();
        let delta_y1 = match delta_y1_col {
            Some(ci) => parse_indicator(cell(ci), row, "delta_y1")?,
            None => 1,
        };
        let y1 = parse_binary_or_na(cell(y1_col), row, "y1")?;
        let cluster_id = cell(cluster_col).trim().to_string();

        records.push(ObservedRecord {
            l0,
            delta_a,
            a,
            delta_y0,
            y0,
            l1,
            delta_y1,
            y1,
            cluster_id,
        });
    }
    Dataset::new(schema.clone(), scenario, records)
}

fn format_cov(feature: &Feature, value: CovValue) -> String {
    match (value, &feature.kind) {
        (CovValue::Real(x), _) => format!("{x}"),
        (CovValue::Cat(i), FeatureKind::Categorical(levels)) => levels[i].clone(),
        (CovValue::Cat(i), FeatureKind::Real) => format!("{i}"),
    }
}

fn format_binary(v: Option<u8>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => NA.to_string(),
    }
}

/// Write a dataset as CSV with the canonical column order:
/// `l0.* , delta_a, a [, delta_y0, y0][, l1.*], delta_y1, y1, <cluster>`.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let scen = dataset.scenario;
    let mut header: Vec<String> = dataset
        .schema
        .l0
        .iter()
        .map(|f| format!("l0.{}", f.name))
        .collect();
    header.push("delta_a".into());
    header.push("a".into());
    if scen.has_baseline_outcome() {
        header.push("delta_y0".into());
        header.push("y0".into());
    }
    if scen.has_time_varying() {
        for f in &dataset.schema.l1 {
            header.push(format!("l1.{}", f.name));
        }
    }
    header.push("delta_y1".into());
    header.push("y1".into());
    header.push(dataset.schema.cluster_col.clone());
    w.write_record(&header)?;

    for r in &dataset.records {
        let mut row: Vec<String> = dataset
            .schema
            .l0
            .iter()
            .zip(&r.l0)
            .map(|(f, &v)| format_cov(f, v))
            .collect();
        row.push(r.delta_a.to_string());
        row.push(format_binary(r.a));
        if scen.has_baseline_outcome() {
            row.push(r.delta_y0.unwrap_or(1).to_string());
            row.push(format_binary(r.y0));
        }
        if scen.has_time_varying() {
            match &r.l1 {
                Some(vals) => {
                    for (f, &v) in dataset.schema.l1.iter().zip(vals) {
                        row.push(format_cov(f, v));
                    }
                }
                None => {
                    for _ in &dataset.schema.l1 {
                        row.push(NA.to_string());
                    }
                }
            }
        }
        row.push(r.delta_y1.to_string());
        row.push(format_binary(r.y1));
        row.push(r.cluster_id.clone());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Infer a schema from a CSV header plus a scan of the rows: columns named
/// `l0.<x>` / `l1.<x>` become features, real-valued when every non-`NA` cell
/// parses as a number, categorical (with the observed level set) otherwise.
pub fn infer_schema(path: &Path, scenario: Scenario, cluster_col: &str) -> Result<Schema> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut l0_cols: Vec<(usize, String)> = Vec::new();
    let mut l1_cols: Vec<(usize, String)> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(name) = h.strip_prefix("l0.") {
            l0_cols.push((i, name.to_string()));
        } else if let Some(name) = h.strip_prefix("l1.") {
            l1_cols.push((i, name.to_string()));
        }
    }
    if scenario.has_time_varying() != !l1_cols.is_empty() {
        // S3/S4 files may legitimately have zero l1 columns; only flag the
        // inverse case.
        if !scenario.has_time_varying() && !l1_cols.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "scenario {scenario} does not admit l1.* columns"
            )));
        }
    }

    let n_cols = headers.len();
    let mut numeric = vec![true; n_cols];
    let mut levels: Vec<BTreeMap<String, ()>> = vec![BTreeMap::new(); n_cols];
    for result in reader.records() {
        let rec = result?;
        for (i, _) in l0_cols.iter().chain(l1_cols.iter()) {
            let cell = rec.get(*i).unwrap_or("").trim();
            if cell == NA {
                continue;
            }
            if cell.parse::<f64>().is_err() {
                numeric[*i] = false;
            }
            levels[*i].entry(cell.to_string()).or_insert(());
        }
    }
    let build = |cols: &[(usize, String)]| {
        cols.iter()
            .map(|(i, name)| Feature {
                name: name.clone(),
                kind: if numeric[*i] {
                    FeatureKind::Real
                } else {
                    FeatureKind::Categorical(levels[*i].keys().cloned().collect())
                },
            })
            .collect::<Vec<_>>()
    };
    Ok(Schema {
        l0: build(&l0_cols),
        l1: build(&l1_cols),
        cluster_col: cluster_col.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn s2_schema() -> Schema {
        Schema::new(vec![Feature::real("x")], vec![])
    }

    #[test]
    fn loads_fully_observed_file() {
        let f = write_tmp(
            "l0.x,delta_a,a,delta_y1,y1,cluster_id\n\
             0.5,1,1,1,0,h1\n\
             1.5,1,0,1,1,h1\n\
             -1.0,1,1,1,1,h2\n\
             2.0,1,0,1,0,h3\n",
        );
        let ds = load_csv(f.path(), Scenario::S2, &s2_schema()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.n_clusters(), 3);
        assert!(ds.records.iter().all(|r| r.delta_a == 1 && r.a.is_some()));
        assert!(validate(&ds).pass);
    }

    #[test]
    fn na_exposure_parsed_as_missing() {
        let f = write_tmp(
            "l0.x,delta_a,a,delta_y1,y1,cluster_id\n\
             0.5,0,NA,1,0,h1\n",
        );
        let ds = load_csv(f.path(), Scenario::S2, &s2_schema()).unwrap();
        assert_eq!(ds.records[0].a, None);
        assert!(validate(&ds).pass);
    }

    #[test]
    fn inconsistent_exposure_loads_but_flagged() {
        let f = write_tmp(
            "l0.x,delta_a,a,delta_y1,y1,cluster_id\n\
             0.5,0,1,1,0,h1\n",
        );
        let ds = load_csv(f.path(), Scenario::S2, &s2_schema()).unwrap();
        let report = validate(&ds);
        assert!(!report.pass);
        assert_eq!(report.count(ValidationRule::ExposureIndicatorMismatch), 1);
    }

    #[test]
    fn missing_column_is_an_error() {
        let f = write_tmp("l0.x,a,delta_y1,y1,cluster_id\n0.5,1,1,0,h1\n");
        match load_csv(f.path(), Scenario::S2, &s2_schema()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "delta_a"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn unparseable_cell_reports_row_and_column() {
        let f = write_tmp(
            "l0.x,delta_a,a,delta_y1,y1,cluster_id\n\
             0.5,1,1,1,0,h1\n\
             abc,1,0,1,1,h2\n",
        );
        match load_csv(f.path(), Scenario::S2, &s2_schema()) {
            Err(Error::UnparseableCell { row, column, value }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "l0.x");
                assert_eq!(value, "abc");
            }
            other => panic!("expected UnparseableCell, got {other:?}"),
        }
    }

    #[test]
    fn unknown_categorical_level_rejected() {
        let schema = Schema::new(vec![Feature::categorical("site", &["u", "v"])], vec![]);
        let f = write_tmp(
            "l0.site,delta_a,a,delta_y1,y1,cluster_id\n\
             w,1,1,1,0,h1\n",
        );
        assert!(matches!(
            load_csv(f.path(), Scenario::S2, &schema),
            Err(Error::UnknownLevel { .. })
        ));
    }

    #[test]
    fn s1_defaults_indicators_to_one() {
        let f = write_tmp("l0.x,a,y1,cluster_id\n0.5,1,0,h1\n");
        let ds = load_csv(f.path(), Scenario::S1, &s2_schema()).unwrap();
        assert_eq!(ds.records[0].delta_a, 1);
        assert_eq!(ds.records[0].delta_y1, 1);
        assert!(validate(&ds).pass);
    }

    #[test]
    fn s4_followup_rule() {
        let schema = Schema::new(vec![Feature::real("x")], vec![Feature::real("z")]);
        let f = write_tmp(
            "l0.x,delta_a,a,delta_y0,y0,l1.z,delta_y1,y1,cluster_id\n\
             0.1,1,1,0,NA,0.2,1,1,h1\n\
             0.1,1,1,1,0,0.2,1,0,h1\n\
             0.1,1,0,1,1,0.2,0,NA,h2\n",
        );
        let ds = load_csv(f.path(), Scenario::S4, &schema).unwrap();
        let report = validate(&ds);
        assert!(!report.pass);
        assert_eq!(
            report.count(ValidationRule::FollowupWithoutBaselineNegative),
            1
        );
        let rr = report
            .rules
            .iter()
            .find(|r| r.rule == ValidationRule::FollowupWithoutBaselineNegative)
            .unwrap();
        assert_eq!(rr.first_row, Some(0));
    }

    #[test]
    fn empty_dataset_passes() {
        let ds = Dataset::new(s2_schema(), Scenario::S2, vec![]).unwrap();
        assert!(validate(&ds).pass);
    }

    #[test]
    fn outcome_without_measurement_flagged() {
        let f = write_tmp(
            "l0.x,delta_a,a,l1.z,delta_y1,y1,cluster_id\n\
             0.5,1,1,0.3,0,1,h1\n",
        );
        let schema = Schema::new(vec![Feature::real("x")], vec![Feature::real("z")]);
        let ds = load_csv(f.path(), Scenario::S3, &schema).unwrap();
        let report = validate(&ds);
        assert_eq!(report.count(ValidationRule::FollowupIndicatorMismatch), 1);
    }

    #[test]
    fn csv_roundtrip() {
        let schema = Schema::new(
            vec![Feature::real("x"), Feature::categorical("site", &["p", "q", "r"])],
            vec![Feature::real("z")],
        );
        let f = write_tmp(
            "l0.x,l0.site,delta_a,a,delta_y0,y0,l1.z,delta_y1,y1,cluster_id\n\
             0.125,q,1,1,1,0,1.5,1,0,h1\n\
             -3.5,p,0,NA,1,0,0.25,1,1,h1\n\
             1e-3,r,1,0,0,NA,NA,0,NA,h2\n",
        );
        let ds = load_csv(f.path(), Scenario::S4, &schema).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, out.path()).unwrap();
        let ds2 = load_csv(out.path(), Scenario::S4, &schema).unwrap();
        assert_eq!(ds.records, ds2.records);
    }

    #[test]
    fn design_row_expands_categoricals() {
        let schema = Schema::new(
            vec![Feature::categorical("site", &["p", "q", "r"]), Feature::real("x")],
            vec![],
        );
        let rec = ObservedRecord {
            l0: vec![CovValue::Cat(2), CovValue::Real(0.5)],
            delta_a: 1,
            a: Some(1),
            delta_y0: None,
            y0: None,
            l1: None,
            delta_y1: 1,
            y1: Some(0),
            cluster_id: "c".into(),
        };
        let ds = Dataset::new(schema, Scenario::S2, vec![rec]).unwrap();
        let sel = FeatureSelection::resolve(
            &ds.schema,
            &["site".to_string(), "x".to_string()],
            &[],
        )
        .unwrap();
        assert_eq!(sel.width(), 3);
        assert_eq!(sel.design_row(&ds, 0).unwrap(), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn inferred_schema_detects_kinds() {
        let f = write_tmp(
            "l0.x,l0.site,delta_a,a,delta_y1,y1,cluster_id\n\
             0.5,u,1,1,1,0,h1\n\
             1.5,v,0,NA,1,1,h2\n",
        );
        let schema = infer_schema(f.path(), Scenario::S2, "cluster_id").unwrap();
        assert_eq!(schema.l0.len(), 2);
        assert_eq!(schema.l0[0].kind, FeatureKind::Real);
        assert_eq!(
            schema.l0[1].kind,
            FeatureKind::Categorical(vec!["u".into(), "v".into()])
        );
        let ds = load_csv(f.path(), Scenario::S2, &schema).unwrap();
        assert!(validate(&ds).pass);
    }
}

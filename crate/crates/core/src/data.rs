//! Trial records, ingestion and validation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, SieveError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Placebo,
    Vaccine,
}

impl Arm {
    pub fn code(self) -> u8 {
        match self {
            Arm::Placebo => 0,
            Arm::Vaccine => 1,
        }
    }

    pub fn indicator(self) -> f64 {
        f64::from(self.code())
    }

    pub fn from_code(code: u8) -> Option<Arm> {
        match code {
            0 => Some(Arm::Placebo),
            1 => Some(Arm::Vaccine),
            _ => None,
        }
    }

    fn parse(s: &str) -> Option<Arm> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0" | "placebo" => Some(Arm::Placebo),
            "1" | "vaccine" => Some(Arm::Vaccine),
            _ => None,
        }
    }
}

/// Mismatch count `k` out of `m` sequenced reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SeqCounts {
    pub k: u32,
    pub m: u32,
}

impl SeqCounts {
    pub fn new(k: u32, m: u32) -> Result<Self> {
        if k > m {
            return Err(SieveError::Domain(format!("K={k} exceeds M={m}")));
        }
        Ok(Self { k, m })
    }

    /// Observed mismatch fraction; `None` when nothing was sequenced.
    pub fn fraction(&self) -> Option<f64> {
        (self.m > 0).then(|| f64::from(self.k) / f64::from(self.m))
    }
}

/// Collapse per-sequence binary marks (1 = mismatch) into `(K, M)`.
pub fn aggregate_sequences(marks: &[bool]) -> Result<SeqCounts> {
    if marks.is_empty() {
        return Err(SieveError::EmptySequenceSet);
    }
    let k = marks.iter().filter(|&&v| v).count();
    Ok(SeqCounts {
        k: k as u32,
        m: marks.len() as u32,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectRecord {
    pub id: String,
    pub arm: Arm,
    pub covariates: Vec<f64>,
    /// Dense stratum index into [`Dataset::stratum_labels`].
    pub stratum: usize,
    pub time: f64,
    pub event: bool,
    pub counts: Option<SeqCounts>,
    pub sequenced: bool,
    pub auxiliary: Vec<f64>,
}

impl SubjectRecord {
    pub fn is_sequenced_endpoint(&self) -> bool {
        self.event && self.sequenced && self.counts.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    pub covariate_names: Vec<String>,
    pub auxiliary_names: Vec<String>,
    pub stratum_labels: Vec<String>,
}

impl Dataset {
    /// Assemble a dataset from already-typed records, checking the record invariants.
    pub fn new(
        records: Vec<SubjectRecord>,
        covariate_names: Vec<String>,
        auxiliary_names: Vec<String>,
        stratum_labels: Vec<String>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(SieveError::Schema("dataset has no records".into()));
        }
        let p = covariate_names.len();
        let q = auxiliary_names.len();
        let mut issues = Vec::new();
        for (row, r) in records.iter().enumerate() {
            let mut push = |kind| {
                issues.push(ValidationIssue {
                    row: row + 1,
                    id: r.id.clone(),
                    kind,
                })
            };
            if !(r.time.is_finite() && r.time > 0.0) {
                push(IssueKind::NonpositiveTime);
            }
            if r.covariates.len() != p || r.auxiliary.len() != q {
                push(IssueKind::WrongWidth);
            }
            if r.stratum >= stratum_labels.len() {
                push(IssueKind::InvalidValue {
                    field: "stratum".into(),
                    value: r.stratum.to_string(),
                });
            }
            match (r.event, r.sequenced, r.counts) {
                (false, _, Some(_)) => push(IssueKind::MarksOnNonEvent),
                (true, true, None) => push(IssueKind::MissingMarks),
                (true, false, Some(_)) => push(IssueKind::MarksOnUnsequenced),
                (_, _, Some(c)) if c.k > c.m => push(IssueKind::KExceedsM { k: c.k, m: c.m }),
                _ => {}
            }
        }
        if !issues.is_empty() {
            return Err(SieveError::Validation(issues));
        }
        Ok(Self {
            records,
            covariate_names,
            auxiliary_names,
            stratum_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_labels.len()
    }

    pub fn n_events(&self) -> usize {
        self.records.iter().filter(|r| r.event).count()
    }

    pub fn sequenced_endpoints(&self) -> impl Iterator<Item = (usize, &SubjectRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_sequenced_endpoint())
    }

    /// New dataset made of the given record indices (duplicates allowed).
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            auxiliary_names: self.auxiliary_names.clone(),
            stratum_labels: self.stratum_labels.clone(),
        }
    }

    pub fn arm_indices(&self, arm: Arm) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.arm == arm)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub row: usize,
    pub id: String,
    pub kind: IssueKind,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {} (id {}): {}", self.row, self.id, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum IssueKind {
    NonpositiveTime,
    KExceedsM { k: u32, m: u32 },
    MissingMarks,
    MarksOnNonEvent,
    MarksOnUnsequenced,
    UnknownArm { code: String },
    InvalidValue { field: String, value: String },
    MissingValue { field: String },
    WrongWidth,
    DuplicateId,
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IssueKind::NonpositiveTime => write!(f, "nonpositive time"),
            IssueKind::KExceedsM { k, m } => write!(f, "K exceeds M (K={k}, M={m})"),
            IssueKind::MissingMarks => write!(f, "missing K/M for a sequenced event"),
            IssueKind::MarksOnNonEvent => write!(f, "K/M present for a non-event"),
            IssueKind::MarksOnUnsequenced => write!(f, "K/M present but sequenced=0"),
            IssueKind::UnknownArm { code } => write!(f, "unknown arm code {code:?}"),
            IssueKind::InvalidValue { field, value } => {
                write!(f, "invalid value {value:?} in column {field}")
            }
            IssueKind::MissingValue { field } => write!(f, "missing value in column {field}"),
            IssueKind::WrongWidth => write!(f, "row has the wrong number of fields"),
            IssueKind::DuplicateId => write!(f, "duplicate id"),
        }
    }
}

/// One untyped input row, as read from the subject CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawRow {
    pub id: String,
    pub arm: String,
    pub stratum: String,
    pub time: String,
    pub event: String,
    pub k: String,
    pub m: String,
    pub sequenced: String,
    pub x: Vec<String>,
    pub a: Vec<String>,
}

pub const REQUIRED_COLUMNS: [&str; 8] =
    ["id", "arm", "stratum", "time", "event", "k", "m", "sequenced"];

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim() {
        "0" | "false" | "FALSE" => Some(false),
        "1" | "true" | "TRUE" => Some(true),
        _ => None,
    }
}

fn sort_labels(labels: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = labels.into_iter().collect();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    v
}

/// Type-check raw rows and build a [`Dataset`], reporting every violation.
///
/// Row numbers in the diagnostics are 1-based data rows (header excluded).
pub fn validate_dataset(
    rows: &[RawRow],
    covariate_names: &[String],
    auxiliary_names: &[String],
) -> Result<Dataset> {
    if rows.is_empty() {
        return Err(SieveError::Schema("dataset has no rows".into()));
    }
    let strata: BTreeSet<String> = rows.iter().map(|r| r.stratum.trim().to_string()).collect();
    let stratum_labels = sort_labels(strata);
    let stratum_index: BTreeMap<&str, usize> = stratum_labels
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut issues = Vec::new();
    let mut records = Vec::with_capacity(rows.len());
    let mut seen = HashSet::new();
    for (idx, raw) in rows.iter().enumerate() {
        let row = idx + 1;
        let id = raw.id.trim().to_string();
        let before = issues.len();
        let mut issue = |kind| {
            issues.push(ValidationIssue {
                row,
                id: id.clone(),
                kind,
            })
        };
        if !seen.insert(id.clone()) {
            issue(IssueKind::DuplicateId);
        }
        let arm = Arm::parse(&raw.arm);
        if arm.is_none() {
            issue(IssueKind::UnknownArm {
                code: raw.arm.clone(),
            });
        }
        if raw.stratum.trim().is_empty() {
            issue(IssueKind::MissingValue {
                field: "stratum".into(),
            });
        }
        let time = match raw.time.trim().parse::<f64>() {
            Ok(t) if t.is_finite() && t > 0.0 => t,
            Ok(_) => {
                issue(IssueKind::NonpositiveTime);
                f64::NAN
            }
            Err(_) => {
                issue(IssueKind::InvalidValue {
                    field: "time".into(),
                    value: raw.time.clone(),
                });
                f64::NAN
            }
        };
        let event = parse_flag(&raw.event);
        if event.is_none() {
            issue(IssueKind::InvalidValue {
                field: "event".into(),
                value: raw.event.clone(),
            });
        }
        let mut parse_count = |field: &str, s: &str| -> Option<Option<u32>> {
            let s = s.trim();
            if s.is_empty() {
                return Some(None);
            }
            match s.parse::<u32>() {
                Ok(v) => Some(Some(v)),
                Err(_) => {
                    issue(IssueKind::InvalidValue {
                        field: field.into(),
                        value: s.into(),
                    });
                    None
                }
            }
        };
        let k = parse_count("k", &raw.k);
        let m = parse_count("m", &raw.m);
        let mut parse_real = |field: String, s: &str| -> f64 {
            match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    issue(IssueKind::InvalidValue {
                        field,
                        value: s.into(),
                    });
                    f64::NAN
                }
            }
        };
        let covariates: Vec<f64> = covariate_names
            .iter()
            .zip(raw.x.iter().map(String::as_str).chain(std::iter::repeat("")))
            .map(|(name, s)| parse_real(name.clone(), s))
            .collect();
        let auxiliary: Vec<f64> = auxiliary_names
            .iter()
            .zip(raw.a.iter().map(String::as_str).chain(std::iter::repeat("")))
            .map(|(name, s)| parse_real(name.clone(), s))
            .collect();
        let seq_raw = raw.sequenced.trim();
        let counts = match (k, m) {
            (Some(Some(k)), Some(Some(m))) => Some(SeqCounts { k, m }),
            _ => None,
        };
        let partial = matches!((k, m), (Some(Some(_)), Some(None)) | (Some(None), Some(Some(_))));
        let sequenced = if seq_raw.is_empty() {
            Some(counts.is_some())
        } else {
            parse_flag(seq_raw)
        };
        if sequenced.is_none() {
            issue(IssueKind::InvalidValue {
                field: "sequenced".into(),
                value: raw.sequenced.clone(),
            });
        }
        if let (Some(event), Some(sequenced)) = (event, sequenced) {
            match (event, sequenced, counts) {
                (false, _, Some(_)) => issue(IssueKind::MarksOnNonEvent),
                (true, true, None) => issue(IssueKind::MissingMarks),
                (true, false, Some(_)) => issue(IssueKind::MarksOnUnsequenced),
                (true, true, Some(c)) if c.k > c.m => {
                    issue(IssueKind::KExceedsM { k: c.k, m: c.m })
                }
                (false, _, None) if partial => issue(IssueKind::MarksOnNonEvent),
                _ => {}
            }
        }
        if issues.len() == before {
            let event = event.unwrap_or(false);
            records.push(SubjectRecord {
                id,
                arm: arm.unwrap_or(Arm::Placebo),
                covariates,
                stratum: stratum_index[raw.stratum.trim()],
                time,
                event,
                counts,
                sequenced: event && sequenced.unwrap_or(false),
                auxiliary,
            });
        }
    }
    if !issues.is_empty() {
        return Err(SieveError::Validation(issues));
    }
    Dataset::new(
        records,
        covariate_names.to_vec(),
        auxiliary_names.to_vec(),
        stratum_labels,
    )
}

fn is_indexed_column(name: &str, prefix: char) -> bool {
    let mut chars = name.chars();
    chars.next() == Some(prefix)
        && !name[1..].is_empty()
        && name[1..].chars().all(|c| c.is_ascii_digit())
}

/// Parse the subject CSV into raw rows plus covariate and auxiliary column names.
pub fn read_raw_rows<R: Read>(reader: R) -> Result<(Vec<RawRow>, Vec<String>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut required = [0usize; 8];
    for (slot, name) in required.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = col(name)
            .ok_or_else(|| SieveError::Schema(format!("missing required column `{name}`")))?;
    }
    let x_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| is_indexed_column(h, 'x'))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let a_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| is_indexed_column(h, 'a'))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        rows.push(RawRow {
            id: get(required[0]),
            arm: get(required[1]),
            stratum: get(required[2]),
            time: get(required[3]),
            event: get(required[4]),
            k: get(required[5]),
            m: get(required[6]),
            sequenced: get(required[7]),
            x: x_cols.iter().map(|(i, _)| get(*i)).collect(),
            a: a_cols.iter().map(|(i, _)| get(*i)).collect(),
        });
    }
    Ok((
        rows,
        x_cols.into_iter().map(|(_, n)| n).collect(),
        a_cols.into_iter().map(|(_, n)| n).collect(),
    ))
}

/// Read long-format per-sequence marks (`id, seq_index, mark`) and aggregate per subject.
pub fn read_sequence_marks<R: Read>(reader: R) -> Result<BTreeMap<String, SeqCounts>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SieveError::Schema(format!("missing required column `{name}`")))
    };
    let (id_col, idx_col, mark_col) = (col("id")?, col("seq_index")?, col("mark")?);
    let mut marks: BTreeMap<String, BTreeMap<u64, bool>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let seq: u64 = rec
            .get(idx_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| SieveError::Schema(format!("bad seq_index for id {id}")))?;
        let mark = parse_flag(rec.get(mark_col).unwrap_or(""))
            .ok_or_else(|| SieveError::Schema(format!("mark for id {id} is not 0/1")))?;
        marks.entry(id).or_default().insert(seq, mark);
    }
    marks
        .into_iter()
        .map(|(id, m)| {
            let v: Vec<bool> = m.into_values().collect();
            aggregate_sequences(&v).map(|c| (id, c))
        })
        .collect()
}

/// Load a subject CSV, optionally filling `k`/`m` from a long-format marks file.
pub fn load_dataset(path: &Path, marks: Option<&Path>) -> Result<Dataset> {
    let (mut rows, xn, an) = read_raw_rows(std::fs::File::open(path)?)?;
    if let Some(mp) = marks {
        let agg = read_sequence_marks(std::fs::File::open(mp)?)?;
        for row in &mut rows {
            if let Some(c) = agg.get(row.id.trim()) {
                if row.k.trim().is_empty() && row.m.trim().is_empty() {
                    row.k = c.k.to_string();
                    row.m = c.m.to_string();
                }
            }
        }
    }
    validate_dataset(&rows, &xn, &an)
}

pub fn write_dataset_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(data.covariate_names.iter().cloned());
    header.extend(data.auxiliary_names.iter().cloned());
    w.write_record(&header)?;
    for r in &data.records {
        let mut row = vec![
            r.id.clone(),
            r.arm.code().to_string(),
            data.stratum_labels[r.stratum].clone(),
            format!("{}", r.time),
            u8::from(r.event).to_string(),
            r.counts.map(|c| c.k.to_string()).unwrap_or_default(),
            r.counts.map(|c| c.m.to_string()).unwrap_or_default(),
            u8::from(r.sequenced).to_string(),
        ];
        row.extend(r.covariates.iter().map(|v| format!("{v}")));
        row.extend(r.auxiliary.iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Cut points `0 = q_0 < q_1 < ... < q_l = 1` defining `l` failure-type bins.
///
/// Bin `j` covers `[q_j, q_{j+1})`; the top bin is closed at 1. For the binary
/// case this is exactly `J = 1{Q >= cutoff}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdSpec {
    cuts: Vec<f64>,
}

impl ThresholdSpec {
    pub fn new(cuts: Vec<f64>) -> Result<Self> {
        if cuts.len() < 3 {
            return Err(SieveError::InvalidThresholds(
                "need at least one interior cut point".into(),
            ));
        }
        if cuts[0] != 0.0 || *cuts.last().unwrap() != 1.0 {
            return Err(SieveError::InvalidThresholds(
                "cut points must start at 0 and end at 1".into(),
            ));
        }
        if cuts.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SieveError::InvalidThresholds(
                "cut points must be strictly increasing".into(),
            ));
        }
        Ok(Self { cuts })
    }

    pub fn binary(cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff < 1.0) {
            return Err(SieveError::InvalidThresholds(format!(
                "cutoff {cutoff} is outside (0, 1)"
            )));
        }
        Self::new(vec![0.0, cutoff, 1.0])
    }

    /// Interior cut points only, e.g. `[0.01, 0.99]` for three bins.
    pub fn from_interior(interior: &[f64]) -> Result<Self> {
        let mut cuts = Vec::with_capacity(interior.len() + 2);
        cuts.push(0.0);
        cuts.extend_from_slice(interior);
        cuts.push(1.0);
        Self::new(cuts)
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn n_bins(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn bin_of(&self, q: f64) -> usize {
        let interior = &self.cuts[1..self.cuts.len() - 1];
        interior.iter().take_while(|&&c| q >= c).count()
    }

    /// Bin of the empirical fraction `K/M`; `None` when `M = 0`.
    pub fn naive_bin(&self, counts: SeqCounts) -> Option<usize> {
        counts.fraction().map(|f| self.bin_of(f))
    }
}

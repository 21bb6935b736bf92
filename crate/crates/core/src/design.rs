//! Detection limits, threshold selection and mark screening.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::function::factorial::ln_binomial;

use crate::data::{Arm, Dataset, SeqCounts, ThresholdSpec};
use crate::error::{Result, SieveError, Warning};

/// Smallest mismatch proportion detected with probability `pod` at `depth` reads.
pub fn lod(depth: u32, pod: f64) -> Result<f64> {
    if depth == 0 {
        return Err(SieveError::Domain("depth must be at least 1".into()));
    }
    if !(pod > 0.0 && pod < 1.0) {
        return Err(SieveError::Domain(format!("POD {pod} outside (0, 1)")));
    }
    Ok(1.0 - (1.0 - pod).powf(1.0 / f64::from(depth)))
}

/// Probability of seeing at least one mismatch among `depth` reads.
pub fn pod_detect(q: f64, depth: u32) -> f64 {
    1.0 - (1.0 - q).powi(depth as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LodSpec {
    pub pod: f64,
    pub median_depth_placebo: u32,
    pub median_depth_vaccine: u32,
    pub lod_placebo: f64,
    pub lod_vaccine: f64,
    pub q0: f64,
    /// `1 - q0`, for binarizing the complementary mark.
    pub symmetric_q0: f64,
}

/// Lower median of a nonempty list.
pub fn lower_median(values: &mut [u32]) -> u32 {
    values.sort_unstable();
    values[(values.len() - 1) / 2]
}

/// `q0` as the larger of the arm LODs at each arm's median depth.
pub fn select_q0(data: &Dataset, pod: f64) -> Result<LodSpec> {
    let depths = |arm: Arm| -> Vec<u32> {
        data.sequenced_endpoints()
            .filter(|(_, r)| r.arm == arm)
            .filter_map(|(_, r)| r.counts.map(|c| c.m))
            .filter(|&m| m >= 1)
            .collect()
    };
    let mut dp = depths(Arm::Placebo);
    let mut dv = depths(Arm::Vaccine);
    if dp.is_empty() {
        return Err(SieveError::MissingArmData(Arm::Placebo.code()));
    }
    if dv.is_empty() {
        return Err(SieveError::MissingArmData(Arm::Vaccine.code()));
    }
    select_q0_from_medians(lower_median(&mut dp), lower_median(&mut dv), pod)
}

pub fn select_q0_from_medians(placebo: u32, vaccine: u32, pod: f64) -> Result<LodSpec> {
    let lp = lod(placebo, pod)?;
    let lv = lod(vaccine, pod)?;
    let q0 = lp.max(lv);
    Ok(LodSpec {
        pod,
        median_depth_placebo: placebo,
        median_depth_vaccine: vaccine,
        lod_placebo: lp,
        lod_vaccine: lv,
        q0,
        symmetric_q0: 1.0 - q0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FisherResult {
    pub p_value: f64,
    /// A margin was zero; `p = 1` by convention.
    pub degenerate: bool,
}

/// Two-sided Fisher exact test for `[[a, b], [c, d]]`, summing the
/// probabilities of tables no more likely than the observed one.
pub fn fisher_exact_p(a: u64, b: u64, c: u64, d: u64) -> FisherResult {
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    if r1 == 0 || r2 == 0 || c1 == 0 || c1 == n {
        return FisherResult {
            p_value: 1.0,
            degenerate: true,
        };
    }
    let denom = ln_binomial(n, c1);
    let logp = |x: u64| ln_binomial(r1, x) + ln_binomial(r2, c1 - x) - denom;
    let observed = logp(a);
    let lo = c1.saturating_sub(r2);
    let hi = c1.min(r1);
    let slack: f64 = 1e-7;
    let p: f64 = (lo..=hi)
        .map(logp)
        .filter(|&lp| lp <= observed + slack.ln_1p())
        .map(f64::exp)
        .sum();
    FisherResult {
        p_value: p.min(1.0),
        degenerate: false,
    }
}

/// Smallest `c` such that `c` type-1 endpoints all in one arm (none in the
/// other) is significant at `alpha`, minimized over which arm holds them.
pub fn fisher_min_count(n_placebo: u64, n_vaccine: u64, alpha: f64) -> Option<u64> {
    let one_side = |n_in: u64, n_out: u64| {
        (1..=n_in).find(|&c| fisher_exact_p(c, n_in - c, 0, n_out).p_value < alpha)
    };
    match (one_side(n_placebo, n_vaccine), one_side(n_vaccine, n_placebo)) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

/// Endpoint-level data for one mark.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkData {
    pub mark: String,
    pub endpoints: Vec<(Arm, SeqCounts)>,
}

impl MarkData {
    pub fn from_dataset(mark: &str, data: &Dataset) -> Self {
        Self {
            mark: mark.to_string(),
            endpoints: data
                .sequenced_endpoints()
                .filter_map(|(_, r)| r.counts.map(|c| (r.arm, c)))
                .collect(),
        }
    }
}

/// Join a long mark table `mark,id,k,m` with the arms of `data`.
pub fn read_mark_table<R: std::io::Read>(reader: R, data: &Dataset) -> Result<Vec<MarkData>> {
    let arms: BTreeMap<&str, Arm> = data.records.iter().map(|r| (r.id.as_str(), r.arm)).collect();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| SieveError::Schema(format!("missing required column `{name}`")))
    };
    let (cm, ci, ck, cmm) = (col("mark")?, col("id")?, col("k")?, col("m")?);
    let mut marks: BTreeMap<String, Vec<(Arm, SeqCounts)>> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = &rec[ci];
        let arm = *arms.get(id).ok_or_else(|| {
            SieveError::Schema(format!("mark table row {}: unknown subject `{id}`", row + 1))
        })?;
        let parse = |s: &str, field: &str| {
            s.parse::<u32>().map_err(|_| {
                SieveError::Schema(format!("mark table row {}: invalid {field} `{s}`", row + 1))
            })
        };
        let counts = SeqCounts::new(parse(&rec[ck], "k")?, parse(&rec[cmm], "m")?)?;
        marks.entry(rec[cm].to_string()).or_default().push((arm, counts));
    }
    Ok(marks
        .into_iter()
        .map(|(mark, endpoints)| MarkData { mark, endpoints })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenOptions {
    pub alpha: f64,
    pub reclass_frac: f64,
    /// Fixed minimum count replacing the Fisher-derived bound.
    pub min_count: Option<u64>,
}

impl Default for ScreenOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            reclass_frac: 0.10,
            min_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenRow {
    pub mark: String,
    pub n_type1: u64,
    pub n_type0: u64,
    pub fisher_min_count: Option<u64>,
    pub screen1_pass: bool,
    pub reclass_frac: f64,
    pub screen2_pass: bool,
    pub viable: bool,
}

/// Inter-individual (Fisher count) and intra-individual (reclassification) screens
/// on the naive labels at `q0`. Endpoints with `M = 0` are ignored.
pub fn screen_mark(mark: &MarkData, q0: f64, opts: &ScreenOptions) -> Result<(ScreenRow, Vec<Warning>)> {
    let at_q0 = ThresholdSpec::binary(q0)?;
    let modal = ThresholdSpec::binary(0.5)?;
    let usable: Vec<&(Arm, SeqCounts)> = mark.endpoints.iter().filter(|(_, c)| c.m >= 1).collect();
    if usable.is_empty() {
        return Err(SieveError::NoEndpointData);
    }
    let mut warnings = Vec::new();
    let (mut n1, mut n0, mut np, mut nv, mut flips) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for (arm, c) in &usable {
        let b = at_q0.naive_bin(*c).expect("M >= 1");
        if b == 1 {
            n1 += 1;
        } else {
            n0 += 1;
        }
        if modal.naive_bin(*c).expect("M >= 1") != b {
            flips += 1;
        }
        match arm {
            Arm::Placebo => np += 1,
            Arm::Vaccine => nv += 1,
        }
    }
    let min_count = match opts.min_count {
        Some(c) => Some(c),
        None => {
            if np == 0 || nv == 0 {
                warnings.push(Warning::DegenerateTable);
            }
            fisher_min_count(np, nv, opts.alpha)
        }
    };
    let screen1 = min_count.is_some_and(|c| n1 >= c && n0 >= c);
    let frac = flips as f64 / usable.len() as f64;
    let screen2 = frac >= opts.reclass_frac;
    Ok((
        ScreenRow {
            mark: mark.mark.clone(),
            n_type1: n1,
            n_type0: n0,
            fisher_min_count: min_count,
            screen1_pass: screen1,
            reclass_frac: frac,
            screen2_pass: screen2,
            viable: screen1 && screen2,
        },
        warnings,
    ))
}

pub fn screen_marks(
    marks: &[MarkData],
    q0: f64,
    opts: &ScreenOptions,
) -> Result<(Vec<ScreenRow>, Vec<Warning>)> {
    let mut rows = Vec::with_capacity(marks.len());
    let mut warnings = Vec::new();
    for m in marks {
        let (row, w) = screen_mark(m, q0, opts)?;
        rows.push(row);
        warnings.extend(w);
    }
    Ok((rows, warnings))
}

pub fn write_screen_csv<W: std::io::Write>(rows: &[ScreenRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "mark",
        "n_type1",
        "n_type0",
        "fisher_min_count",
        "screen1_pass",
        "reclass_frac",
        "screen2_pass",
        "viable",
    ])?;
    for r in rows {
        w.write_record([
            r.mark.clone(),
            r.n_type1.to_string(),
            r.n_type0.to_string(),
            r.fisher_min_count.map(|c| c.to_string()).unwrap_or_default(),
            r.screen1_pass.to_string(),
            format!("{:.6}", r.reclass_frac),
            r.screen2_pass.to_string(),
            r.viable.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lod_examples() {
        assert!((lod(5, 0.80).unwrap() - 0.275).abs() < 5e-4);
        assert!((lod(100, 0.95).unwrap() - 0.030).abs() < 5e-4);
        assert!((lod(1000, 0.60).unwrap() - 0.001).abs() < 5e-4);
        assert!(lod(0, 0.8).is_err() && lod(5, 1.0).is_err());
        for d in [5, 100] {
            for p in [0.6, 0.95] {
                assert!((pod_detect(lod(d, p).unwrap(), d) - p).abs() < 1e-12);
            }
        }
        assert!((pod_detect(0.01, 5) - 0.049).abs() < 1e-3);
        assert_eq!(pod_detect(0.3, 0), 0.0);
    }

    #[test]
    fn q0_from_medians() {
        let s = select_q0_from_medians(100, 50, 0.8).unwrap();
        assert!((s.lod_vaccine - 0.032).abs() < 5e-4);
        assert!((s.lod_placebo - 0.016).abs() < 5e-4);
        assert_eq!(s.q0, s.lod_vaccine);
        assert_eq!(lower_median(&mut [4, 1, 3, 2]), 2);
    }

    #[test]
    fn fisher_examples() {
        assert!((fisher_exact_p(1, 0, 0, 1).p_value - 1.0).abs() < 1e-12);
        assert!((fisher_exact_p(5, 0, 0, 5).p_value - 2.0 / 252.0).abs() < 1e-12);
        assert!((fisher_exact_p(2, 2, 2, 2).p_value - 1.0).abs() < 1e-12);
        let d = fisher_exact_p(0, 0, 3, 4);
        assert!(d.degenerate && d.p_value == 1.0);
    }

    #[test]
    fn min_count_unbalanced() {
        assert_eq!(fisher_min_count(51, 63, 0.05), Some(4));
    }
}

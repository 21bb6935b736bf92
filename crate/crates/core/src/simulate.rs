//! Simulation studies: data generators and a runner comparing corrected and naive estimators.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::cox::CoxOptions;
use crate::data::{Arm, Dataset, SeqCounts, SubjectRecord, ThresholdSpec};
use crate::deconvolve::{ConditioningSpec, PriorConfig};
use crate::error::{Result, SieveError};
use crate::inference::{sieve_test, wald_joint_test, wald_ve_interval, InferenceReport};
use crate::pipeline::{analyze, EstimatorKind, Labeling, Pipeline, PipelineConfig};
use crate::rng::{RngFactory, DOMAIN_BOOTSTRAP, DOMAIN_NOISE, DOMAIN_SIMULATION};

pub const FOLLOW_UP: f64 = 5.0;
pub const BETA_SHAPE_A: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Setting {
    A,
    B,
    C,
}

impl Setting {
    /// `(beta_0, beta_1, b)`.
    pub fn parameters(self) -> (f64, f64, f64) {
        match self {
            Setting::A => (0.0, 0.0, 5.7),
            Setting::B => (0.5f64.ln(), 0.5f64.ln(), 5.7),
            Setting::C => (0.5f64.ln(), 0.95f64.ln(), 3.8),
        }
    }

    pub fn true_ve(self) -> [f64; 2] {
        let (b0, b1, _) = self.parameters();
        [1.0 - b0.exp(), 1.0 - b1.exp()]
    }
}

impl FromStr for Setting {
    type Err = SieveError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Setting::A),
            "b" => Ok(Setting::B),
            "c" => Ok(Setting::C),
            other => Err(SieveError::InvalidConfig(format!(
                "unknown setting `{other}` (expected a, b or c)"
            ))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::A => "a",
            Setting::B => "b",
            Setting::C => "c",
        })
    }
}

/// Missing-sequence mechanism layered on a generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum MissingGen {
    /// Each endpoint sequenced independently with this probability.
    Mcar(f64),
    /// `logit P(R = 1) = intercept + z_coef * Z + a_coef * A`.
    Logistic {
        intercept: f64,
        z_coef: f64,
        a_coef: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub study: u8,
    pub setting: Setting,
    pub n_per_arm: usize,
    pub seed: u64,
    pub reps: usize,
    pub n_boot: usize,
    pub prior: PriorConfig,
    pub q0: f64,
    pub level: f64,
    pub run_corrected: bool,
    pub run_uncorrected: bool,
    pub missing: Option<MissingGen>,
    /// Probability that the auxiliary variable disagrees with the true type.
    pub aux_flip: f64,
}

impl SimConfig {
    pub fn new(study: u8, setting: Setting) -> Self {
        Self {
            study,
            setting,
            n_per_arm: 1000,
            seed: 1,
            reps: 200,
            n_boot: 150,
            prior: PriorConfig::default(),
            q0: 0.01,
            level: 0.95,
            run_corrected: true,
            run_uncorrected: true,
            missing: None,
            aux_flip: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.study) {
            return Err(SieveError::InvalidConfig(format!(
                "unknown study {} (expected 1, 2 or 3)",
                self.study
            )));
        }
        if self.n_per_arm == 0 || self.reps == 0 {
            return Err(SieveError::InvalidConfig("counts must be positive".into()));
        }
        if !(self.q0 > 0.0 && self.q0 < 1.0) {
            return Err(SieveError::InvalidConfig(format!("q0 {} outside (0, 1)", self.q0)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(SieveError::InvalidConfig("level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Inverse-CDF draw from Beta(a, b) restricted to `[lo, hi)`, by bisection.
pub fn truncated_beta_sample<R: Rng>(a: f64, b: f64, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) || !(a > 0.0 && b > 0.0) {
        return Err(SieveError::Domain(format!(
            "invalid truncated Beta({a}, {b}) on [{lo}, {hi})"
        )));
    }
    let cdf = |x: f64| {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            beta_reg(a, b, x)
        }
    };
    let (flo, fhi) = (cdf(lo), cdf(hi));
    if fhi - flo < 1e-300 {
        return Err(SieveError::ImpossibleTruncation { lo, hi });
    }
    let u = flo + rng.random::<f64>() * (fhi - flo);
    let (mut l, mut h) = (lo, hi);
    while h - l > 1e-12 {
        let mid = 0.5 * (l + h);
        if cdf(mid) < u {
            l = mid;
        } else {
            h = mid;
        }
    }
    // Stay inside the half-open support.
    let x = 0.5 * (l + h);
    Ok(if x >= hi { l } else { x.max(lo) })
}

fn draw_depth<R: Rng>(study: u8, arm: Arm, rng: &mut R) -> u32 {
    let shallow = match (study, arm) {
        (1, _) => return 2000,
        (2, _) => 0.4,
        (_, Arm::Placebo) => 0.2,
        (_, Arm::Vaccine) => 0.4,
    };
    if rng.random::<f64>() < shallow {
        rng.random_range(1..=15)
    } else {
        rng.random_range(16..=1000)
    }
}

fn exponential<R: Rng>(rate: f64, rng: &mut R) -> f64 {
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// Generated data plus the latent truth used for diagnostics.
#[derive(Debug, Clone)]
pub struct SimReplicate {
    pub data: Dataset,
    /// True failure type per record (`None` if censored).
    pub true_type: Vec<Option<usize>>,
    pub true_q: Vec<Option<f64>>,
    /// True sequencing probabilities for endpoints (1 without a missingness mechanism).
    pub true_pi: Vec<f64>,
}

pub fn gen_replicate(cfg: &SimConfig, rep: usize) -> Result<SimReplicate> {
    cfg.validate()?;
    let factory = RngFactory::new(cfg.seed);
    let mut rng = factory.stream(DOMAIN_SIMULATION, rep as u64);
    // Auxiliary and sequencing draws use their own stream so that the survival
    // and mark data are identical with and without a missingness mechanism.
    let mut noise = factory.stream(DOMAIN_NOISE, rep as u64);
    let (b0, b1, shape_b) = cfg.setting.parameters();
    let n = 2 * cfg.n_per_arm;
    let mut records = Vec::with_capacity(n);
    let mut true_type = Vec::with_capacity(n);
    let mut true_q = Vec::with_capacity(n);
    let mut true_pi = Vec::with_capacity(n);
    let with_aux = cfg.missing.is_some();
    for i in 0..n {
        let arm = if i < cfg.n_per_arm { Arm::Placebo } else { Arm::Vaccine };
        let z = arm.indicator();
        let x = f64::from(u8::from(rng.random::<f64>() < 0.5));
        let rate0 = 0.01 * (b0 * z - 0.105 * x).exp();
        let rate1 = 0.03 * (b1 * z - 0.223 * x).exp();
        let t0 = exponential(rate0, &mut rng);
        let t1 = exponential(rate1, &mut rng);
        let t = t0.min(t1);
        let event = t <= FOLLOW_UP;
        let mut counts = None;
        let mut sequenced = false;
        let mut aux = Vec::new();
        let mut pi = 1.0;
        if event {
            let j = usize::from(t1 < t0);
            let q = if j == 0 {
                truncated_beta_sample(BETA_SHAPE_A, shape_b, 0.0, cfg.q0, &mut rng)?
            } else {
                truncated_beta_sample(BETA_SHAPE_A, shape_b, cfg.q0, 1.0, &mut rng)?
            };
            let m = draw_depth(cfg.study, arm, &mut rng);
            let k = rand_distr::Binomial::new(u64::from(m), q)
                .map(|d| rng.sample(d) as u32)
                .map_err(|e| SieveError::Internal(e.to_string()))?;
            counts = Some(SeqCounts { k, m });
            sequenced = true;
            true_type.push(Some(j));
            true_q.push(Some(q));
            if with_aux {
                let flip = noise.random::<f64>() < cfg.aux_flip;
                let a = if flip { 1 - j } else { j } as f64;
                aux.push(a);
                pi = match cfg.missing.as_ref().expect("checked") {
                    MissingGen::Mcar(p) => *p,
                    MissingGen::Logistic {
                        intercept,
                        z_coef,
                        a_coef,
                    } => 1.0 / (1.0 + (-(intercept + z_coef * z + a_coef * a)).exp()),
                };
                if noise.random::<f64>() >= pi {
                    counts = None;
                    sequenced = false;
                }
            }
        } else {
            true_type.push(None);
            true_q.push(None);
            if with_aux {
                aux.push(0.0);
            }
        }
        true_pi.push(pi);
        records.push(SubjectRecord {
            id: format!("s{}", i + 1),
            arm,
            covariates: vec![x],
            stratum: 0,
            time: if event { t } else { FOLLOW_UP },
            event,
            counts,
            sequenced,
            auxiliary: aux,
        });
    }
    let data = Dataset::new(
        records,
        vec!["x1".into()],
        if with_aux { vec!["a1".into()] } else { Vec::new() },
        vec!["1".into()],
    )?;
    Ok(SimReplicate {
        data,
        true_type,
        true_q,
        true_pi,
    })
}

/// Pipeline settings used for the corrected or uncorrected estimator in the studies.
pub fn study_pipeline(cfg: &SimConfig, labeling: Labeling) -> Result<PipelineConfig> {
    let mut p = PipelineConfig::new(ThresholdSpec::binary(cfg.q0)?);
    p.prior = cfg.prior.clone();
    p.conditioning = ConditioningSpec::arm_and_covariates(&["x1"]);
    p.cox = CoxOptions::default();
    p.estimator = EstimatorKind::Base;
    p.labeling = labeling;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRow {
    pub rep: usize,
    pub estimator: String,
    pub ok: bool,
    pub ve: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub p_joint: f64,
    pub p_sieve: f64,
    pub bootstrap_failed: usize,
    pub message: String,
}

impl ReplicateRow {
    fn failed(rep: usize, estimator: &str, message: String) -> Self {
        Self {
            rep,
            estimator: estimator.into(),
            ok: false,
            ve: Vec::new(),
            se: Vec::new(),
            ci_lower: Vec::new(),
            ci_upper: Vec::new(),
            p_joint: f64::NAN,
            p_sieve: f64::NAN,
            bootstrap_failed: 0,
            message,
        }
    }

    fn from_report(rep: usize, estimator: &str, report: &InferenceReport) -> Self {
        Self {
            rep,
            estimator: estimator.into(),
            ok: true,
            ve: report.intervals.iter().map(|t| t.ve).collect(),
            se: report.intervals.iter().map(|t| t.se).collect(),
            ci_lower: report.intervals.iter().map(|t| t.wald.0).collect(),
            ci_upper: report.intervals.iter().map(|t| t.wald.1).collect(),
            p_joint: report.joint_test.p_value,
            p_sieve: report.sieve_test.map_or(f64::NAN, |t| t.p_value),
            bootstrap_failed: report.bootstrap_failed,
            message: String::new(),
        }
    }
}

/// Fit one estimator on one replicate with bootstrap inference.
pub fn run_estimator(
    data: &Dataset,
    pipeline: &Pipeline,
    n_boot: usize,
    rng: &RngFactory,
    level: f64,
    rep: usize,
    name: &str,
) -> ReplicateRow {
    match analyze(data, pipeline, n_boot, rng, level) {
        Ok(a) => ReplicateRow::from_report(rep, name, &a.report),
        Err(e) => ReplicateRow::failed(rep, name, e.to_string()),
    }
}

/// Model-based (inverse information) inference without resampling.
pub fn run_model_based(data: &Dataset, pipeline: &Pipeline, level: f64, rep: usize, name: &str) -> ReplicateRow {
    let fit = match pipeline.fit(data, None) {
        Ok(f) => f,
        Err(e) => return ReplicateRow::failed(rep, name, e.to_string()),
    };
    let beta = match fit.betas() {
        Ok(b) => b,
        Err(e) => return ReplicateRow::failed(rep, name, e.to_string()),
    };
    let var: Vec<f64> = (0..beta.len())
        .map(|j| fit.fit.get(j).map_or(f64::NAN, |f| f.covariance[0]))
        .collect();
    let k = beta.len();
    let mut cov = vec![0.0; k * k];
    for j in 0..k {
        cov[j * k + j] = var[j];
    }
    let (joint, _) = wald_joint_test(&beta, &cov);
    let sieve = if k == 2 {
        sieve_test(beta[0], beta[1], var[0], var[1], 0.0).map(|t| t.p_value).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let se: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    let ci: Vec<(f64, f64)> = beta.iter().zip(&se).map(|(b, s)| wald_ve_interval(*b, *s, level)).collect();
    ReplicateRow {
        rep,
        estimator: name.into(),
        ok: true,
        ve: beta.iter().map(|b| 1.0 - b.exp()).collect(),
        se,
        ci_lower: ci.iter().map(|c| c.0).collect(),
        ci_upper: ci.iter().map(|c| c.1).collect(),
        p_joint: joint.p_value,
        p_sieve: sieve,
        bootstrap_failed: 0,
        message: String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeMetrics {
    pub true_ve: f64,
    pub median_ve: f64,
    pub median_ci_lower: f64,
    pub median_ci_upper: f64,
    pub coverage: f64,
    pub bias: f64,
    pub empirical_se: f64,
    pub mean_estimated_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorMetrics {
    pub completed: usize,
    pub failed: usize,
    pub types: Vec<TypeMetrics>,
    /// Rejection rate of equal type effects at 0.05: type-I error under no sieve effect, power otherwise.
    pub sieve_rejection: f64,
    pub joint_rejection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyMetrics {
    pub config: SimConfig,
    pub true_ve: [f64; 2],
    pub estimators: BTreeMap<String, EstimatorMetrics>,
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    crate::inference::quantile(values, 0.5)
}

pub fn summarize(rows: &[ReplicateRow], true_ve: [f64; 2], alpha: f64) -> EstimatorMetrics {
    let ok: Vec<&ReplicateRow> = rows.iter().filter(|r| r.ok).collect();
    let n = ok.len() as f64;
    let types = (0..2)
        .map(|j| {
            let ve: Vec<f64> = ok.iter().map(|r| r.ve[j]).collect();
            let mean = ve.iter().sum::<f64>() / n;
            let sd = (ve.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            let covered = ok
                .iter()
                .filter(|r| r.ci_lower[j] <= true_ve[j] && true_ve[j] <= r.ci_upper[j])
                .count();
            TypeMetrics {
                true_ve: true_ve[j],
                median_ve: median(&ve),
                median_ci_lower: median(&ok.iter().map(|r| r.ci_lower[j]).collect::<Vec<_>>()),
                median_ci_upper: median(&ok.iter().map(|r| r.ci_upper[j]).collect::<Vec<_>>()),
                coverage: covered as f64 / n,
                bias: mean - true_ve[j],
                empirical_se: sd,
                mean_estimated_se: ok.iter().map(|r| r.se[j]).sum::<f64>() / n,
            }
        })
        .collect();
    let rate = |p: &dyn Fn(&ReplicateRow) -> f64| {
        ok.iter().filter(|r| p(r) < alpha).count() as f64 / n
    };
    EstimatorMetrics {
        completed: ok.len(),
        failed: rows.len() - ok.len(),
        types,
        sieve_rejection: rate(&|r| r.p_sieve),
        joint_rejection: rate(&|r| r.p_joint),
    }
}

pub const CORRECTED: &str = "corrected";
pub const UNCORRECTED: &str = "uncorrected";

/// Run every replicate of a study; replicate failures are counted, not fatal.
pub fn run_study(cfg: &SimConfig) -> Result<(StudyMetrics, Vec<ReplicateRow>)> {
    cfg.validate()?;
    let corrected = Pipeline::new(study_pipeline(cfg, Labeling::Posterior)?)?;
    let uncorrected = Pipeline::new(study_pipeline(cfg, Labeling::Naive)?)?;
    let factory = RngFactory::new(cfg.seed);
    let per_rep: Vec<Vec<ReplicateRow>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let data = match gen_replicate(cfg, rep) {
                Ok(d) => d.data,
                Err(e) => {
                    return [CORRECTED, UNCORRECTED]
                        .iter()
                        .map(|n| ReplicateRow::failed(rep, n, e.to_string()))
                        .collect()
                }
            };
            let boot_rng = factory.child(DOMAIN_BOOTSTRAP, rep as u64);
            let mut rows = Vec::new();
            if cfg.run_uncorrected {
                rows.push(run_estimator(&data, &uncorrected, cfg.n_boot, &boot_rng, cfg.level, rep, UNCORRECTED));
            }
            if cfg.run_corrected {
                rows.push(run_estimator(&data, &corrected, cfg.n_boot, &boot_rng, cfg.level, rep, CORRECTED));
            }
            rows
        })
        .collect();
    let rows: Vec<ReplicateRow> = per_rep.into_iter().flatten().collect();
    let true_ve = cfg.setting.true_ve();
    let mut estimators = BTreeMap::new();
    for name in [UNCORRECTED, CORRECTED] {
        let sel: Vec<ReplicateRow> = rows.iter().filter(|r| r.estimator == name).cloned().collect();
        if !sel.is_empty() {
            estimators.insert(name.to_string(), summarize(&sel, true_ve, 1.0 - cfg.level));
        }
    }
    Ok((
        StudyMetrics {
            config: cfg.clone(),
            true_ve,
            estimators,
        },
        rows,
    ))
}

pub fn write_replicate_csv<W: std::io::Write>(rows: &[ReplicateRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "rep", "estimator", "ok", "ve_0", "ve_1", "se_0", "se_1", "ci_lower_0", "ci_upper_0",
        "ci_lower_1", "ci_upper_1", "p_joint", "p_sieve", "bootstrap_failed", "message",
    ])?;
    let get = |v: &[f64], j: usize| v.get(j).map(|x| format!("{x:.10}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.rep.to_string(),
            r.estimator.clone(),
            r.ok.to_string(),
            get(&r.ve, 0),
            get(&r.ve, 1),
            get(&r.se, 0),
            get(&r.se, 1),
            get(&r.ci_lower, 0),
            get(&r.ci_upper, 0),
            get(&r.ci_lower, 1),
            get(&r.ci_upper, 1),
            format!("{:.10}", r.p_joint),
            format!("{:.10}", r.p_sieve),
            r.bootstrap_failed.to_string(),
            r.message.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! Bootstrap covariance, confidence intervals and Wald tests for the type-specific effects.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::{Arm, Dataset};
use crate::error::{Result, SieveError, Warning};
use crate::rng::{RngFactory, DOMAIN_BOOTSTRAP};

pub const MIN_BOOTSTRAP: usize = 50;
pub const UNSTABLE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub requested: usize,
    pub failed: usize,
    /// Successful replicate estimates, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    /// Sample covariance of the replicates, row-major.
    pub covariance: Vec<f64>,
    pub dim: usize,
    pub unstable: bool,
}

/// Type-7 quantile of unsorted data.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn sample_covariance(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; k * k];
    for r in rows {
        for a in 0..k {
            for b in 0..k {
                cov[a * k + b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n - 1.0);
    cov
}

/// Indices of a with-replacement resample that keeps each arm's size.
pub fn arm_stratified_resample<R: Rng>(data: &Dataset, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(data.len());
    for arm in [Arm::Placebo, Arm::Vaccine] {
        let idx = data.arm_indices(arm);
        for _ in 0..idx.len() {
            out.push(idx[rng.random_range(0..idx.len())]);
        }
    }
    out
}

/// Nonparametric bootstrap of `estimate`, resampling subjects within arm.
///
/// Replicate `r` draws from its own stream, so results do not depend on the
/// number of worker threads. Failed replicates are dropped and counted.
pub fn bootstrap<F>(
    data: &Dataset,
    b: usize,
    rng: &RngFactory,
    estimate: F,
) -> Result<(BootstrapResult, Vec<Warning>)>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    if b < MIN_BOOTSTRAP {
        return Err(SieveError::InvalidConfig(format!(
            "bootstrap requires at least {MIN_BOOTSTRAP} replicates, got {b}"
        )));
    }
    let results: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng.stream(DOMAIN_BOOTSTRAP, r as u64);
            let idx = arm_stratified_resample(data, &mut stream);
            let sample = data.resample(&idx);
            estimate(&sample)
                .ok()
                .filter(|v| v.iter().all(|x| x.is_finite()))
        })
        .collect();
    let replicates: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let failed = b - replicates.len();
    if replicates.len() < 2 {
        return Err(SieveError::DegenerateVariance(f64::NAN));
    }
    let dim = replicates[0].len();
    let unstable = failed as f64 > UNSTABLE_FRACTION * b as f64;
    let mut warnings = Vec::new();
    if unstable {
        warnings.push(Warning::BootstrapUnstable { failed, total: b });
    }
    Ok((
        BootstrapResult {
            requested: b,
            failed,
            covariance: sample_covariance(&replicates),
            replicates,
            dim,
            unstable,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn inverse_or_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = m.clone().cholesky() {
        return (chol.inverse(), false);
    }
    let svd = m.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let pinv = svd
        .pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(m.nrows(), m.ncols()));
    (pinv, true)
}

/// `beta' Sigma^{-1} beta` with a chi-square(k) p-value; a pseudo-inverse is
/// used, with a warning, when `Sigma` is not positive definite.
pub fn wald_joint_test(beta: &[f64], cov: &[f64]) -> (TestResult, Option<Warning>) {
    let k = beta.len();
    let m = DMatrix::from_row_slice(k, k, cov);
    let (inv, pseudo) = inverse_or_pinv(&m);
    let b = DMatrix::from_column_slice(k, 1, beta);
    let w = (b.transpose() * inv * &b)[(0, 0)].max(0.0);
    let df = if pseudo {
        m.clone().svd(false, false).rank(1e-12 * m.amax().max(f64::MIN_POSITIVE)).max(1)
    } else {
        k
    };
    let chi = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    (
        TestResult {
            statistic: w,
            p_value: chi.sf(w).clamp(0.0, 1.0),
        },
        pseudo.then_some(Warning::PseudoInverseWarning),
    )
}

/// `z = (beta_1 - beta_0) / sqrt(var_11 + var_00 - 2 cov_01)`, two-sided normal p.
pub fn sieve_test(beta0: f64, beta1: f64, var0: f64, var1: f64, cov01: f64) -> Result<TestResult> {
    let v = var0 + var1 - 2.0 * cov01;
    if !(v > 0.0 && v.is_finite()) {
        return Err(SieveError::DegenerateVariance(v));
    }
    let z = (beta1 - beta0) / v.sqrt();
    let normal = Normal::standard();
    Ok(TestResult {
        statistic: z,
        p_value: (2.0 * normal.cdf(-z.abs())).min(1.0),
    })
}

pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// VE interval from a Wald interval on the log hazard ratio.
pub fn wald_ve_interval(beta: f64, se: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile(level);
    (1.0 - (beta + z * se).exp(), 1.0 - (beta - z * se).exp())
}

pub fn percentile_ve_interval(beta_reps: &[f64], level: f64) -> (f64, f64) {
    let ve: Vec<f64> = beta_reps.iter().map(|b| 1.0 - b.exp()).collect();
    let alpha = 1.0 - level;
    (quantile(&ve, alpha / 2.0), quantile(&ve, 1.0 - alpha / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeInterval {
    pub failure_type: usize,
    pub beta: f64,
    pub se: f64,
    pub ve: f64,
    pub wald: (f64, f64),
    pub percentile: (f64, f64),
}

/// Per-type Wald and percentile VE intervals.
pub fn ve_intervals(beta: &[f64], boot: &BootstrapResult, level: f64) -> Vec<TypeInterval> {
    let k = beta.len();
    (0..k)
        .map(|j| {
            let se = boot.covariance[j * k + j].max(0.0).sqrt();
            let reps: Vec<f64> = boot.replicates.iter().map(|r| r[j]).collect();
            TypeInterval {
                failure_type: j,
                beta: beta[j],
                se,
                ve: 1.0 - beta[j].exp(),
                wald: wald_ve_interval(beta[j], se, level),
                percentile: percentile_ve_interval(&reps, level),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceReport {
    pub level: f64,
    pub intervals: Vec<TypeInterval>,
    pub covariance: Vec<f64>,
    /// Null of no effect against any type.
    pub joint_test: TestResult,
    /// Null of equal effects across types; `z` for two types, chi-square otherwise.
    pub sieve_test: Option<TestResult>,
    pub bootstrap_requested: usize,
    pub bootstrap_failed: usize,
    pub bootstrap_unstable: bool,
    pub warnings: Vec<Warning>,
}

/// Assemble intervals and both tests from point estimates and a bootstrap.
pub fn infer(beta: &[f64], boot: &BootstrapResult, level: f64) -> InferenceReport {
    let k = beta.len();
    let mut warnings = Vec::new();
    let (joint, w) = wald_joint_test(beta, &boot.covariance);
    warnings.extend(w);
    let c = &boot.covariance;
    let sieve = if k == 2 {
        match sieve_test(beta[0], beta[1], c[0], c[3], c[1]) {
            Ok(t) => Some(t),
            Err(_) => {
                warnings.push(Warning::PseudoInverseWarning);
                None
            }
        }
    } else if k > 2 {
        // Contrasts beta_j - beta_0, j >= 1.
        let cm = DMatrix::from_fn(k - 1, k, |r, col| {
            if col == 0 {
                -1.0
            } else if col == r + 1 {
                1.0
            } else {
                0.0
            }
        });
        let sigma = DMatrix::from_row_slice(k, k, c);
        let d = &cm * DMatrix::from_column_slice(k, 1, beta);
        let v = &cm * sigma * cm.transpose();
        let dv: Vec<f64> = d.iter().copied().collect();
        let mut vrow = vec![0.0; (k - 1) * (k - 1)];
        for a in 0..k - 1 {
            for b in 0..k - 1 {
                vrow[a * (k - 1) + b] = v[(a, b)];
            }
        }
        let (t, w) = wald_joint_test(&dv, &vrow);
        warnings.extend(w);
        Some(t)
    } else {
        None
    };
    InferenceReport {
        level,
        intervals: ve_intervals(beta, boot, level),
        covariance: boot.covariance.clone(),
        joint_test: joint,
        sieve_test: sieve,
        bootstrap_requested: boot.requested,
        bootstrap_failed: boot.failed,
        bootstrap_unstable: boot.unstable,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_test_closed_forms() {
        let (t, w) = wald_joint_test(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.statistic, 0.0);
        assert!((t.p_value - 1.0).abs() < 1e-12 && w.is_none());
        let (t, _) = wald_joint_test(&[1.0, 1.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!((t.statistic - 2.0).abs() < 1e-12);
        assert!((t.p_value - (-1.0f64).exp()).abs() < 1e-10);
        let (t, _) = wald_joint_test(&[3.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!((t.p_value - (-4.5f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn singular_covariance_uses_pseudo_inverse() {
        let (t, w) = wald_joint_test(&[1.0, 1.0], &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(w, Some(Warning::PseudoInverseWarning)));
        assert!(t.statistic.is_finite() && (0.0..=1.0).contains(&t.p_value));
    }

    #[test]
    fn sieve_closed_forms() {
        let t = sieve_test(0.0, 0.5, 0.0625, 0.0625, 0.0).unwrap();
        assert!((t.statistic - 0.5 / 0.125f64.sqrt()).abs() < 1e-12);
        assert!((t.p_value - 0.157_299_207).abs() < 1e-6);
        let s = sieve_test(0.5, 0.0, 0.0625, 0.0625, 0.0).unwrap();
        assert_eq!(s.statistic, -t.statistic);
        assert_eq!(s.p_value, t.p_value);
        assert_eq!(sieve_test(0.2, 0.2, 1.0, 1.0, 0.0).unwrap().p_value, 1.0);
        assert!(matches!(
            sieve_test(0.0, 1.0, 1.0, 1.0, 1.0),
            Err(SieveError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn wald_interval_transform() {
        let (lo, hi) = wald_ve_interval(0.0, 0.1, 0.95);
        assert!((lo - (1.0 - 0.195_996_4f64.exp())).abs() < 1e-6);
        assert!((hi - (1.0 - (-0.195_996_4f64).exp())).abs() < 1e-6);
        assert!((lo + 0.2165).abs() < 1e-3 && (hi - 0.1780).abs() < 1e-3);
    }

    #[test]
    fn type7_quantile() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn degenerate_replicates_give_zero_width() {
        let boot = BootstrapResult {
            requested: 3,
            failed: 0,
            replicates: vec![vec![0.2, -0.1]; 3],
            covariance: sample_covariance(&vec![vec![0.2, -0.1]; 3]),
            dim: 2,
            unstable: false,
        };
        let iv = ve_intervals(&[0.2, -0.1], &boot, 0.95);
        for t in &iv {
            assert!((t.wald.0 - t.ve).abs() < 1e-12 && (t.wald.1 - t.ve).abs() < 1e-12);
            assert!((t.percentile.0 - t.ve).abs() < 1e-12);
        }
    }
}

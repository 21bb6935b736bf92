//! Nuisance models for endpoints with missing sequence data, and IPW/AIPW cause weights.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::classify::ClassificationTable;
use crate::data::Dataset;
use crate::error::{Result, SieveError, Warning};

pub const DEFAULT_EPSILON: f64 = 0.01;

/// Covariates entering the nuisance regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceDesign {
    /// Intercept, arm, covariates, stratum dummies, auxiliaries and follow-up time.
    #[default]
    Full,
    InterceptOnly,
}

/// Design row for one record.
pub fn nuisance_row(data: &Dataset, i: usize, design: NuisanceDesign) -> Vec<f64> {
    let rec = &data.records[i];
    let mut row = vec![1.0];
    if design == NuisanceDesign::InterceptOnly {
        return row;
    }
    row.push(rec.arm.indicator());
    row.extend_from_slice(&rec.covariates);
    for s in 1..data.n_strata() {
        row.push(if rec.stratum == s { 1.0 } else { 0.0 });
    }
    row.extend_from_slice(&rec.auxiliary);
    row.push(rec.time);
    row
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub separated: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression of `y` in `[0, 1]` (fractional responses allowed) by Newton's method.
///
/// Columns are standardized internally; constant columns other than the first
/// are dropped (coefficient 0).
pub fn fit_logistic(x: &[Vec<f64>], y: &[f64]) -> Result<LogisticFit> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if n == 0 || p == 0 {
        return Err(SieveError::Internal("empty logistic design".into()));
    }
    // Standardize non-intercept columns; drop constants.
    let mut keep = vec![0usize];
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for j in 1..p {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let sd = (x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd > 1e-12 {
            keep.push(j);
            center[j] = mean;
            scale[j] = sd;
        }
    }
    let q = keep.len();
    let z = DMatrix::from_fn(n, q, |i, k| {
        let j = keep[k];
        if j == 0 {
            1.0
        } else {
            (x[i][j] - center[j]) / scale[j]
        }
    });
    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = &z * b;
        eta.iter()
            .zip(y)
            .map(|(e, yi)| {
                // y*eta - log(1 + e^eta), stably.
                let l1p = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                yi * e - l1p
            })
            .sum()
    };
    let mut b = DVector::zeros(q);
    let ybar = y.iter().sum::<f64>() / n as f64;
    b[0] = (ybar.clamp(1e-6, 1.0 - 1e-6) / (1.0 - ybar.clamp(1e-6, 1.0 - 1e-6))).ln();
    let mut ll = loglik(&b);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    while iterations < 100 {
        iterations += 1;
        let eta = &z * &b;
        let mu: Vec<f64> = eta.iter().map(|e| sigmoid(*e)).collect();
        let grad = z.transpose() * DVector::from_iterator(n, mu.iter().zip(y).map(|(m, yi)| yi - m));
        let mut info = DMatrix::zeros(q, q);
        for i in 0..n {
            let w = mu[i] * (1.0 - mu[i]);
            let row = z.row(i);
            info += w * row.transpose() * row;
        }
        for d in 0..q {
            info[(d, d)] += 1e-10;
        }
        let Some(step) = info.clone().cholesky().map(|c| c.solve(&grad)) else {
            separated = true;
            break;
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &b + t * &step;
            let lc = loglik(&cand);
            if lc.is_finite() && lc >= ll - 1e-12 * ll.abs() {
                let change = (lc - ll).abs();
                b = cand;
                ll = lc;
                moved = true;
                if change < 1e-10 * ll.abs().max(1.0) && grad.amax() < 1e-6 * n as f64 {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !moved {
            converged = grad.amax() < 1e-6 * n as f64;
            break;
        }
        if b.amax() > 30.0 {
            separated = true;
            break;
        }
        if converged {
            break;
        }
    }
    // Saturated fitted probabilities mean the likelihood has no finite maximizer.
    if !separated && (&z * &b).iter().any(|e| e.abs() > 18.0) {
        separated = true;
    }
    // Back to the original scale.
    let mut coef = vec![0.0; p];
    for (k, &j) in keep.iter().enumerate() {
        if j == 0 {
            coef[0] += b[k];
        } else {
            coef[j] = b[k] / scale[j];
            coef[0] -= b[k] * center[j] / scale[j];
        }
    }
    Ok(LogisticFit {
        coef,
        iterations,
        converged,
        separated,
    })
}

pub fn predict_logistic(coef: &[f64], row: &[f64]) -> f64 {
    sigmoid(coef.iter().zip(row).map(|(c, x)| c * x).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingnessModel {
    pub design: NuisanceDesign,
    pub coef: Vec<f64>,
    pub epsilon: f64,
    /// `pi[i]` for every record; 1 for non-endpoints.
    #[serde(skip)]
    pub pi: Vec<f64>,
    pub floored: usize,
    pub degenerate: bool,
    pub separated: bool,
}

impl MissingnessModel {
    /// Use known sequencing probabilities, floored at `epsilon`.
    pub fn from_probabilities(pi: Vec<f64>, epsilon: f64) -> Self {
        let floored = pi.iter().filter(|&&p| p < epsilon).count();
        Self {
            design: NuisanceDesign::Full,
            coef: Vec::new(),
            epsilon,
            pi: pi.into_iter().map(|p| p.clamp(epsilon, 1.0)).collect(),
            floored,
            degenerate: false,
            separated: false,
        }
    }
}

/// Logistic model for `P(R = 1)` among endpoints.
pub fn fit_missingness(
    data: &Dataset,
    design: NuisanceDesign,
    epsilon: f64,
) -> Result<(MissingnessModel, Vec<Warning>)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(SieveError::InvalidConfig(format!("epsilon {epsilon} outside (0, 1)")));
    }
    let endpoints: Vec<usize> = (0..data.len()).filter(|&i| data.records[i].event).collect();
    if endpoints.is_empty() {
        return Err(SieveError::NoEndpointData);
    }
    let r: Vec<f64> = endpoints
        .iter()
        .map(|&i| f64::from(u8::from(data.records[i].is_sequenced_endpoint())))
        .collect();
    let mut warnings = Vec::new();
    let all_same = r.iter().all(|&v| v == r[0]);
    if all_same {
        if r[0] == 0.0 {
            return Err(SieveError::NoEndpointData);
        }
        warnings.push(Warning::DegenerateMissingness);
        return Ok((
            MissingnessModel {
                design,
                coef: Vec::new(),
                epsilon,
                pi: vec![1.0; data.len()],
                floored: 0,
                degenerate: true,
                separated: false,
            },
            warnings,
        ));
    }
    let x: Vec<Vec<f64>> = endpoints.iter().map(|&i| nuisance_row(data, i, design)).collect();
    let fit = fit_logistic(&x, &r)?;
    if fit.separated {
        warnings.push(Warning::MissingnessSeparation);
    } else if !fit.converged {
        warnings.push(Warning::ConvergenceWarning {
            context: "missingness model".into(),
            iterations: fit.iterations,
            grad_norm: f64::NAN,
        });
    }
    let mut pi = vec![1.0; data.len()];
    let mut floored = 0;
    for (&i, row) in endpoints.iter().zip(&x) {
        let p = predict_logistic(&fit.coef, row);
        if p < epsilon {
            floored += 1;
        }
        pi[i] = p.max(epsilon);
    }
    if floored > 0 {
        warnings.push(Warning::FlooredProbabilities { count: floored });
    }
    Ok((
        MissingnessModel {
            design,
            coef: fit.coef,
            epsilon,
            pi,
            floored,
            degenerate: false,
            separated: fit.separated,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeRegression {
    pub design: NuisanceDesign,
    /// Per type, logistic coefficients.
    pub coef: Vec<Vec<f64>>,
    /// `m[i][j]` for every record; zeros for non-endpoints.
    #[serde(skip)]
    pub m: Vec<Vec<f64>>,
}

impl OutcomeRegression {
    pub fn from_predictions(m: Vec<Vec<f64>>) -> Self {
        Self {
            design: NuisanceDesign::Full,
            coef: Vec::new(),
            m,
        }
    }
}

/// Fractional logistic regressions of each `nu_j` on the nuisance design among
/// sequenced endpoints, predicted for all endpoints, clamped and renormalized.
pub fn fit_outcome_regression(
    data: &Dataset,
    table: &ClassificationTable,
    design: NuisanceDesign,
) -> Result<OutcomeRegression> {
    let l = table.n_bins;
    if table.rows.is_empty() {
        return Err(SieveError::NoEndpointData);
    }
    let x: Vec<Vec<f64>> = table.rows.iter().map(|r| nuisance_row(data, r.record, design)).collect();
    let mut coef = Vec::with_capacity(l);
    for j in 0..l {
        let y: Vec<f64> = table.rows.iter().map(|r| r.nu[j].clamp(0.0, 1.0)).collect();
        coef.push(fit_logistic(&x, &y)?.coef);
    }
    let mut m = vec![vec![0.0; l]; data.len()];
    for (i, rec) in data.records.iter().enumerate() {
        if !rec.event {
            continue;
        }
        let row = nuisance_row(data, i, design);
        let mut pred: Vec<f64> = coef.iter().map(|c| predict_logistic(c, &row).clamp(0.0, 1.0)).collect();
        let total: f64 = pred.iter().sum();
        if total > 0.0 {
            pred.iter_mut().for_each(|v| *v /= total);
        } else {
            pred.iter_mut().for_each(|v| *v = 1.0 / l as f64);
        }
        m[i] = pred;
    }
    Ok(OutcomeRegression { design, coef, m })
}

/// `nu_ij R_i / pi_i`; unsequenced endpoints stay in risk sets with zero weight.
pub fn ipw_weights(nu: &[Vec<f64>], data: &Dataset, model: &MissingnessModel) -> Vec<Vec<f64>> {
    nu.iter()
        .enumerate()
        .map(|(i, row)| {
            if data.records[i].is_sequenced_endpoint() {
                row.iter().map(|v| v / model.pi[i]).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect()
}

/// Effective augmented weights `(R/pi) nu + (1 - R/pi) m` for every endpoint.
///
/// Substituting these into the weighted score reproduces the augmented
/// estimating equation term for term, since both parts multiply the same
/// residual `W_i - Wbar(T_i)`.
pub fn aipw_weights(
    nu: &[Vec<f64>],
    data: &Dataset,
    model: &MissingnessModel,
    outcome: &OutcomeRegression,
) -> Vec<Vec<f64>> {
    nu.iter()
        .enumerate()
        .map(|(i, row)| {
            let rec = &data.records[i];
            if !rec.event {
                return vec![0.0; row.len()];
            }
            let ratio = if rec.is_sequenced_endpoint() { 1.0 / model.pi[i] } else { 0.0 };
            row.iter()
                .zip(&outcome.m[i])
                .map(|(v, m)| ratio * v + (1.0 - ratio) * m)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn intercept_only_recovers_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..2000).map(|_| vec![1.0, rng.random::<f64>()]).collect();
        let y: Vec<f64> = (0..2000).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.7))).collect();
        let fit = fit_logistic(&x, &y).unwrap();
        assert!(fit.converged);
        let p = predict_logistic(&fit.coef, &[1.0, 0.5]);
        assert!((p - 0.7).abs() < 0.03, "{p}");
    }

    #[test]
    fn recovers_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..5000).map(|_| vec![1.0, rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| f64::from(u8::from(rng.random::<f64>() < sigmoid(0.5 - 1.2 * r[1]))))
            .collect();
        let fit = fit_logistic(&x, &y).unwrap();
        assert!((fit.coef[0] - 0.5).abs() < 0.15 && (fit.coef[1] + 1.2).abs() < 0.15, "{fit:?}");
    }

    #[test]
    fn separation_flagged() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| f64::from(u8::from(i >= 20))).collect();
        let fit = fit_logistic(&x, &y).unwrap();
        assert!(fit.separated || !fit.converged);
    }
}

//! Stratified proportional-hazards fits with fractional cause weights (Breslow ties).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Result, SieveError, Warning};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub score_tol: f64,
    pub loglik_rtol: f64,
    /// Center covariates before fitting; leaves coefficients unchanged.
    pub center: bool,
    pub separation_bound: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            score_tol: 1e-6,
            loglik_rtol: 1e-9,
            center: true,
            separation_bound: 50.0,
        }
    }
}

/// Survival data in the layout used by the score computations.
///
/// The design is `W = [Z, X_1, ..., X_p]`, row-major.
#[derive(Debug, Clone)]
pub struct CoxData {
    pub n: usize,
    pub p: usize,
    pub time: Vec<f64>,
    pub stratum: Vec<usize>,
    pub design: Vec<f64>,
    /// Per stratum, record indices sorted by decreasing time.
    order: Vec<Vec<usize>>,
}

impl CoxData {
    pub fn new(time: Vec<f64>, stratum: Vec<usize>, design: Vec<f64>, p: usize) -> Result<Self> {
        let n = time.len();
        if stratum.len() != n || design.len() != n * p {
            return Err(SieveError::Internal("inconsistent Cox data dimensions".into()));
        }
        if time.iter().any(|t| !(t.is_finite())) || design.iter().any(|v| !v.is_finite()) {
            return Err(SieveError::Domain("non-finite time or covariate".into()));
        }
        let n_strata = stratum.iter().copied().max().map_or(0, |m| m + 1);
        let mut order = vec![Vec::new(); n_strata];
        for (i, &s) in stratum.iter().enumerate() {
            order[s].push(i);
        }
        for o in &mut order {
            o.sort_by(|&a, &b| time[b].total_cmp(&time[a]).then(a.cmp(&b)));
        }
        Ok(Self {
            n,
            p,
            time,
            stratum,
            design,
            order,
        })
    }

    /// `W = [Z, X]` from a dataset, with its strata.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let p = 1 + data.p();
        let mut design = Vec::with_capacity(data.len() * p);
        for r in &data.records {
            design.push(r.arm.indicator());
            design.extend_from_slice(&r.covariates);
        }
        Self::new(
            data.records.iter().map(|r| r.time).collect(),
            data.records.iter().map(|r| r.stratum).collect(),
            design,
            p,
        )
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.p..(i + 1) * self.p]
    }

    fn centered(&self) -> Self {
        let mut out = self.clone();
        for j in 0..self.p {
            let mean = (0..self.n).map(|i| self.design[i * self.p + j]).sum::<f64>() / self.n as f64;
            for i in 0..self.n {
                out.design[i * self.p + j] -= mean;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ScoreEval {
    pub score: Vec<f64>,
    /// `p x p`, row-major.
    pub information: Vec<f64>,
    pub loglik: f64,
}

/// Weighted Breslow score, information and log partial likelihood at `theta`.
///
/// Each record `i` contributes `weights[i] * (W_i - Wbar_s(T_i))` where the risk
/// set at `t` is everyone in the stratum with `T >= t`.
pub fn weighted_score(theta: &[f64], data: &CoxData, weights: &[f64]) -> Result<ScoreEval> {
    let p = data.p;
    if weights.len() != data.n || theta.len() != p {
        return Err(SieveError::Internal("weight or coefficient length mismatch".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(SieveError::NoEventsForType(0));
    }
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    let mut loglik = 0.0;
    let eta: Vec<f64> = (0..data.n)
        .map(|i| data.row(i).iter().zip(theta).map(|(w, t)| w * t).sum())
        .collect();
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut wbar = vec![0.0; p];
    for order in &data.order {
        if order.iter().all(|&i| weights[i] == 0.0) {
            continue;
        }
        let shift = order.iter().map(|&i| eta[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s0 = 0.0;
        s1.iter_mut().for_each(|v| *v = 0.0);
        s2.iter_mut().for_each(|v| *v = 0.0);
        let mut pos = 0;
        while pos < order.len() {
            let t = data.time[order[pos]];
            let mut end = pos;
            while end < order.len() && data.time[order[end]] == t {
                let i = order[end];
                let r = (eta[i] - shift).exp();
                let w = data.row(i);
                s0 += r;
                for a in 0..p {
                    s1[a] += r * w[a];
                    for b in 0..=a {
                        s2[a * p + b] += r * w[a] * w[b];
                    }
                }
                end += 1;
            }
            let tied_weight: f64 = order[pos..end].iter().map(|&i| weights[i]).sum();
            if tied_weight != 0.0 {
                for a in 0..p {
                    wbar[a] = s1[a] / s0;
                }
                for &i in &order[pos..end] {
                    let nu = weights[i];
                    if nu == 0.0 {
                        continue;
                    }
                    let w = data.row(i);
                    for a in 0..p {
                        score[a] += nu * (w[a] - wbar[a]);
                    }
                    loglik += nu * (eta[i] - shift - s0.ln());
                }
                for a in 0..p {
                    for b in 0..=a {
                        let v = s2[a * p + b] / s0 - wbar[a] * wbar[b];
                        info[a * p + b] += tied_weight * v;
                    }
                }
            }
            pos = end;
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[b * p + a] = info[a * p + b];
        }
    }
    Ok(ScoreEval {
        score,
        information: info,
        loglik,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeFit {
    pub failure_type: usize,
    pub theta: Vec<f64>,
    /// Inverse information, `p x p` row-major.
    pub covariance: Vec<f64>,
    pub loglik: f64,
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separated: bool,
    pub event_mass: f64,
}

impl TypeFit {
    pub fn beta(&self) -> f64 {
        self.theta[0]
    }

    pub fn ve(&self) -> f64 {
        1.0 - self.theta[0].exp()
    }

    /// Model-based standard error of the treatment coefficient.
    pub fn beta_se(&self) -> f64 {
        self.covariance[0].max(0.0).sqrt()
    }
}

fn solve(info: &[f64], score: &[f64]) -> Option<DVector<f64>> {
    let p = score.len();
    let m = DMatrix::from_row_slice(p, p, info);
    m.lu().solve(&DVector::from_column_slice(score))
}

fn invert(info: &[f64], p: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(p, p, info);
    let inv = m.try_inverse()?;
    let mut out = vec![0.0; p * p];
    for a in 0..p {
        for b in 0..p {
            out[a * p + b] = inv[(a, b)];
        }
    }
    Some(out)
}

/// Solve the weighted score equation for one failure type by Newton–Raphson with step halving.
pub fn fit_type(
    data: &CoxData,
    weights: &[f64],
    failure_type: usize,
    opts: &CoxOptions,
    warnings: &mut Vec<Warning>,
) -> Result<TypeFit> {
    let event_mass: f64 = weights.iter().sum();
    if !(event_mass > 0.0) {
        return Err(SieveError::NoEventsForType(failure_type));
    }
    if event_mass < (data.p + 1) as f64 {
        warnings.push(Warning::LowEventMass {
            failure_type,
            mass: event_mass,
        });
    }
    let centered;
    let data = if opts.center {
        centered = data.centered();
        &centered
    } else {
        data
    };
    let p = data.p;
    let eval = |theta: &[f64]| {
        weighted_score(theta, data, weights).map_err(|e| match e {
            SieveError::NoEventsForType(_) => SieveError::NoEventsForType(failure_type),
            other => other,
        })
    };
    let mut theta = vec![0.0; p];
    let mut cur = eval(&theta)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut separated = false;
    let mut last_rel = f64::INFINITY;
    loop {
        let score_norm = cur.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if score_norm < opts.score_tol && last_rel < opts.loglik_rtol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        if theta.iter().any(|t| t.abs() > opts.separation_bound) {
            separated = true;
            break;
        }
        iterations += 1;
        let step = match solve(&cur.information, &cur.score) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                if score_norm < opts.score_tol {
                    converged = true;
                    break;
                }
                return Err(SieveError::SingularInformation);
            }
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let next = eval(&trial)?;
            if next.loglik.is_finite() && next.loglik >= cur.loglik - 1e-12 * cur.loglik.abs() {
                accepted = Some((trial, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            // No ascent possible along the Newton direction: at numerical optimum.
            converged = score_norm < opts.score_tol;
            break;
        };
        last_rel = (next.loglik - cur.loglik).abs() / cur.loglik.abs().max(1.0);
        theta = trial;
        cur = next;
    }
    if separated {
        warnings.push(Warning::SeparationWarning { failure_type });
    } else if !converged {
        warnings.push(Warning::ConvergenceWarning {
            context: format!("Cox fit, failure type {failure_type}"),
            iterations,
            grad_norm: cur.score.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        });
    }
    let covariance = match invert(&cur.information, p) {
        Some(c) => c,
        None if separated => vec![f64::INFINITY; p * p],
        None => return Err(SieveError::SingularInformation),
    };
    Ok(TypeFit {
        failure_type,
        theta,
        covariance,
        loglik: cur.loglik,
        score_norm: cur.score.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        iterations,
        converged,
        separated,
        event_mass,
    })
}

/// Error recorded for a failure type whose fit failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeFailure {
    pub failure_type: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompetingFit {
    pub types: Vec<std::result::Result<TypeFit, TypeFailure>>,
    pub warnings: Vec<Warning>,
}

impl CompetingFit {
    pub fn get(&self, j: usize) -> Option<&TypeFit> {
        self.types.get(j).and_then(|r| r.as_ref().ok())
    }

    /// Treatment log hazard ratios when every type fitted.
    pub fn betas(&self) -> Option<Vec<f64>> {
        self.types
            .iter()
            .map(|r| r.as_ref().ok().map(TypeFit::beta))
            .collect()
    }

    pub fn all_ok(&self) -> bool {
        self.types.iter().all(|r| r.is_ok())
    }
}

/// Fit every failure type; `weights[i][j]` is record `i`'s weight for type `j`.
pub fn fit_competing(data: &CoxData, weights: &[Vec<f64>], opts: &CoxOptions) -> CompetingFit {
    let n_types = weights.first().map_or(0, |w| w.len());
    let mut warnings = Vec::new();
    let types = (0..n_types)
        .map(|j| {
            let col: Vec<f64> = weights.iter().map(|w| w[j]).collect();
            fit_type(data, &col, j, opts, &mut warnings).map_err(|e| TypeFailure {
                failure_type: j,
                message: e.to_string(),
            })
        })
        .collect();
    CompetingFit { types, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> CoxData {
        // time, stratum, z, x
        let rows = [
            (1.0, 0, 0.0, 1.0),
            (2.0, 0, 1.0, 0.0),
            (2.0, 0, 0.0, 0.0),
            (3.0, 0, 1.0, 1.0),
            (4.0, 0, 0.0, 1.0),
            (5.0, 0, 1.0, 0.0),
        ];
        CoxData::new(
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().flat_map(|r| [r.2, r.3]).collect(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn score_at_zero_is_risk_set_mean_difference() {
        let d = toy();
        let mut w = vec![0.0; 6];
        w[3] = 1.0;
        let s = weighted_score(&[0.0, 0.0], &d, &w).unwrap();
        // Risk set at t=3: records 3, 4, 5.
        assert!((s.score[0] - (1.0 - 2.0 / 3.0)).abs() < 1e-14);
        assert!((s.score[1] - (1.0 - 2.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_weights_rejected() {
        let d = toy();
        let err = fit_type(&d, &[0.0; 6], 1, &CoxOptions::default(), &mut vec![]).unwrap_err();
        assert!(matches!(err, SieveError::NoEventsForType(1)));
    }

    #[test]
    fn score_vanishes_at_solution() {
        let d = toy();
        let w = [1.0, 0.6, 1.0, 0.3, 1.0, 0.0];
        let fit = fit_type(&d, &w, 0, &CoxOptions::default(), &mut vec![]).unwrap();
        assert!(fit.converged);
        let s = weighted_score(&fit.theta, &d, &w).unwrap();
        assert!(s.score.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn type_scores_sum_to_full_event_score() {
        let d = toy();
        let nu = [0.2, 0.7, 0.5, 1.0, 0.0, 0.4];
        let full = [1.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let w1: Vec<f64> = nu.iter().zip(&full).map(|(n, f)| n * f).collect();
        let w0: Vec<f64> = nu.iter().zip(&full).map(|(n, f)| (1.0 - n) * f).collect();
        let theta = [0.3, -0.8];
        let a = weighted_score(&theta, &d, &w1).unwrap();
        let b = weighted_score(&theta, &d, &w0).unwrap();
        let c = weighted_score(&theta, &d, &full).unwrap();
        for k in 0..2 {
            assert!((a.score[k] + b.score[k] - c.score[k]).abs() < 1e-12);
        }
    }
}

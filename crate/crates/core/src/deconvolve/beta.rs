//! Conjugate Beta mixing distribution fitted by Beta-binomial marginal likelihood.

use serde::Serialize;
use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::digamma;

use super::grid::SupportGrid;
use crate::data::SeqCounts;
use crate::error::{Result, SieveError};
use crate::optim::{maximize, BfgsOptions};

pub const BETA_PARAM_MIN: f64 = 1e-4;
pub const BETA_PARAM_MAX: f64 = 1e4;

/// `log[C(m,k) B(k+a, m-k+b) / B(a,b)]`.
pub fn betabinom_logpmf(k: u32, m: u32, alpha: f64, beta: f64) -> Result<f64> {
    if k > m {
        return Err(SieveError::Domain(format!("k={k} exceeds m={m}")));
    }
    if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
        return Err(SieveError::Domain(format!(
            "beta-binomial parameters must be positive and finite (alpha={alpha}, beta={beta})"
        )));
    }
    if m == 0 {
        return Ok(0.0);
    }
    let (kf, mf) = (f64::from(k), f64::from(m));
    Ok(ln_binomial(m as u64, k as u64) + ln_beta(kf + alpha, mf - kf + beta)
        - ln_beta(alpha, beta))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaPrior {
    pub alpha: f64,
    pub beta: f64,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when either parameter was clamped to `[1e-4, 1e4]`.
    pub boundary: bool,
    pub n_obs: usize,
}

impl BetaPrior {
    /// Probability mass of each grid cell.
    pub fn grid_mass(&self, grid: &SupportGrid) -> Vec<f64> {
        beta_grid_mass(self.alpha, self.beta, grid)
    }
}

/// Cell masses of Beta(a, b) over the grid cells, using the complementary
/// tail above 1/2 to keep precision near 1.
pub fn beta_grid_mass(a: f64, b: f64, grid: &SupportGrid) -> Vec<f64> {
    let cdf = |x: f64| -> f64 {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            beta_reg(a, b, x)
        }
    };
    let sf = |x: f64| -> f64 {
        if x <= 0.0 {
            1.0
        } else if x >= 1.0 {
            0.0
        } else {
            beta_reg(b, a, 1.0 - x)
        }
    };
    let edges = grid.edges();
    let mut mass: Vec<f64> = edges
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let m = if mid < 0.5 {
                cdf(w[1]) - cdf(w[0])
            } else {
                sf(w[0]) - sf(w[1])
            };
            m.max(0.0)
        })
        .collect();
    let total: f64 = mass.iter().sum();
    if total > 0.0 && total.is_finite() {
        mass.iter_mut().for_each(|v| *v /= total);
    } else {
        // Degenerate parameters: fall back to normalized log-density at the points.
        let logd: Vec<f64> = grid
            .points()
            .iter()
            .map(|&q| (a - 1.0) * q.ln() + (b - 1.0) * (-q).ln_1p())
            .collect();
        let max = logd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mass = logd.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|v| *v /= total);
    }
    mass
}

fn method_of_moments(obs: &[SeqCounts]) -> (f64, f64) {
    let fr: Vec<f64> = obs.iter().filter_map(|c| c.fraction()).collect();
    let n = fr.len() as f64;
    let mean = (fr.iter().sum::<f64>() / n).clamp(1e-3, 1.0 - 1e-3);
    let var = fr.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let total = if var > 0.0 && var < mean * (1.0 - mean) {
        (mean * (1.0 - mean) / var - 1.0).clamp(0.1, 1e3)
    } else {
        2.0
    };
    (mean * total, (1.0 - mean) * total)
}

/// Maximum marginal likelihood Beta prior for one conditioning cell.
///
/// Optimizes over `(ln a, ln b)`, started from method-of-moments values.
pub fn fit_beta_prior(obs: &[SeqCounts]) -> Result<BetaPrior> {
    fit_beta_prior_labeled(obs, "cell")
}

pub(crate) fn fit_beta_prior_labeled(obs: &[SeqCounts], cell: &str) -> Result<BetaPrior> {
    let mut usable: Vec<SeqCounts> = obs.iter().copied().filter(|c| c.m >= 1).collect();
    if usable.len() < 2 {
        return Err(SieveError::InsufficientCell {
            cell: cell.to_string(),
            usable: usable.len(),
        });
    }
    usable.sort_unstable();
    let mut groups: Vec<(SeqCounts, f64)> = Vec::new();
    for c in &usable {
        match groups.last_mut() {
            Some((last, n)) if last == c => *n += 1.0,
            _ => groups.push((*c, 1.0)),
        }
    }
    let (a0, b0) = method_of_moments(&usable);
    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let (a, b) = (x[0].exp(), x[1].exp());
        let (da_base, db_base) = (digamma(a), digamma(b));
        let dab = digamma(a + b);
        let lb = ln_beta(a, b);
        let (mut value, mut ga, mut gb) = (0.0, 0.0, 0.0);
        for (c, w) in &groups {
            let (k, m) = (f64::from(c.k), f64::from(c.m));
            value += w * (ln_beta(k + a, m - k + b) - lb);
            let dm = digamma(m + a + b);
            ga += w * (digamma(k + a) - dm - da_base + dab);
            gb += w * (digamma(m - k + b) - dm - db_base + dab);
        }
        grad[0] = ga * a;
        grad[1] = gb * b;
        value
    };
    let opts = BfgsOptions {
        lower: BETA_PARAM_MIN.ln(),
        upper: BETA_PARAM_MAX.ln(),
        ..Default::default()
    };
    let res = maximize(objective, &[a0.ln(), b0.ln()], &opts);
    let alpha = res.x[0].exp().clamp(BETA_PARAM_MIN, BETA_PARAM_MAX);
    let beta = res.x[1].exp().clamp(BETA_PARAM_MIN, BETA_PARAM_MAX);
    let constant: f64 = groups
        .iter()
        .map(|(c, w)| w * ln_binomial(c.m as u64, c.k as u64))
        .sum();
    Ok(BetaPrior {
        alpha,
        beta,
        loglik: res.value + constant,
        grad_norm: res.grad_norm,
        iterations: res.iterations,
        converged: res.converged,
        boundary: res.at_bound.iter().any(|&b| b),
        n_obs: usable.len(),
    })
}

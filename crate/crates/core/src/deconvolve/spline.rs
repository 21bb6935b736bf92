//! Penalized exponential-family spline prior, `g(q) ∝ exp(B(q) gamma)`.

use serde::Serialize;

use super::basis::SplineBasis;
use super::grid::{CellLikelihood, SupportGrid};
use crate::data::SeqCounts;
use crate::error::{Result, SieveError};
use crate::optim::{maximize, BfgsOptions};

pub const DEFAULT_DF: usize = 10;
pub const DEFAULT_C0: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplinePrior {
    pub gamma: Vec<f64>,
    pub df: usize,
    pub c0: f64,
    /// Unpenalized marginal log-likelihood at the optimum.
    pub loglik: f64,
    pub penalized_loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_obs: usize,
    #[serde(skip)]
    pub mass: Vec<f64>,
}

/// Normalized grid masses `softmax(B gamma)`; `eta` is scratch of grid length.
pub fn spline_mass(basis: &SplineBasis, gamma: &[f64], eta: &mut [f64], mass: &mut [f64]) {
    basis.apply(gamma, eta);
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (m, e) in mass.iter_mut().zip(eta.iter()) {
        *m = (e - max).exp();
        total += *m;
    }
    mass.iter_mut().for_each(|m| *m /= total);
}

/// Reusable buffers for repeated objective evaluations.
#[derive(Debug, Clone)]
pub struct SplineWorkspace {
    eta: Vec<f64>,
    mass: Vec<f64>,
    post: Vec<f64>,
}

impl SplineWorkspace {
    pub fn new(grid_len: usize) -> Self {
        Self {
            eta: vec![0.0; grid_len],
            mass: vec![0.0; grid_len],
            post: vec![0.0; grid_len],
        }
    }
}

/// Penalized marginal log-likelihood `sum_i log sum_g f(K_i; M_i, q_g) g_g - c0 |gamma|^2`
/// and its gradient, written into `grad`.
pub fn spline_marginal_loglik(
    gamma: &[f64],
    basis: &SplineBasis,
    lik: &CellLikelihood,
    c0: f64,
    grad: &mut [f64],
) -> f64 {
    let mut ws = SplineWorkspace::new(basis.rows());
    spline_objective(gamma, basis, lik, c0, grad, &mut ws)
}

pub(crate) fn spline_objective(
    gamma: &[f64],
    basis: &SplineBasis,
    lik: &CellLikelihood,
    c0: f64,
    grad: &mut [f64],
    ws: &mut SplineWorkspace,
) -> f64 {
    spline_mass(basis, gamma, &mut ws.eta, &mut ws.mass);
    let ll = lik.loglik_and_posterior_sum(&ws.mass, &mut ws.post);
    let n = lik.n_obs() as f64;
    for (p, m) in ws.post.iter_mut().zip(&ws.mass) {
        *p -= n * m;
    }
    basis.apply_transpose(&ws.post, grad);
    let mut norm2 = 0.0;
    for (g, c) in grad.iter_mut().zip(gamma) {
        *g -= 2.0 * c0 * c;
        norm2 += c * c;
    }
    ll - c0 * norm2
}

/// Fit with a freshly built basis, starting from `gamma = 0`.
pub fn fit_spline_prior(
    obs: &[SeqCounts],
    grid: &SupportGrid,
    df: usize,
    c0: f64,
) -> Result<SplinePrior> {
    let basis = SplineBasis::new(grid.points(), df)?;
    let usable: Vec<SeqCounts> = obs.iter().copied().filter(|c| c.m >= 1).collect();
    if usable.len() < 2 {
        return Err(SieveError::InsufficientCell {
            cell: "cell".into(),
            usable: usable.len(),
        });
    }
    let lik = CellLikelihood::new(grid, &usable);
    fit_spline_with(&lik, &basis, c0, None)
}

/// Fit from a precomputed likelihood, optionally warm-started at `init`.
pub fn fit_spline_with(
    lik: &CellLikelihood,
    basis: &SplineBasis,
    c0: f64,
    init: Option<&[f64]>,
) -> Result<SplinePrior> {
    if !(c0 >= 0.0 && c0.is_finite()) {
        return Err(SieveError::Domain(format!("penalty c0 must be >= 0, got {c0}")));
    }
    if lik.n_obs() < 2 {
        return Err(SieveError::InsufficientCell {
            cell: "cell".into(),
            usable: lik.n_obs(),
        });
    }
    let df = basis.df();
    let x0 = match init {
        Some(g) if g.len() == df => g.to_vec(),
        _ => vec![0.0; df],
    };
    let mut ws = SplineWorkspace::new(basis.rows());
    let res = maximize(
        |g, grad| spline_objective(g, basis, lik, c0, grad, &mut ws),
        &x0,
        &BfgsOptions::default(),
    );
    let mut mass = vec![0.0; basis.rows()];
    let mut eta = vec![0.0; basis.rows()];
    spline_mass(basis, &res.x, &mut eta, &mut mass);
    let norm2: f64 = res.x.iter().map(|v| v * v).sum();
    Ok(SplinePrior {
        loglik: res.value + c0 * norm2,
        penalized_loglik: res.value,
        gamma: res.x,
        df,
        c0,
        grad_norm: res.grad_norm,
        iterations: res.iterations,
        converged: res.converged,
        n_obs: lik.n_obs(),
        mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Beta, Binomial, Distribution};

    fn draw(rng: &mut ChaCha8Rng, q: f64, m: u32) -> SeqCounts {
        let k = Binomial::new(m as u64, q).unwrap().sample(rng) as u32;
        SeqCounts { k, m }
    }

    #[test]
    fn zero_gamma_is_uniform() {
        let grid = SupportGrid::uniform(100).unwrap();
        let basis = SplineBasis::new(grid.points(), 5).unwrap();
        let obs = [SeqCounts { k: 1, m: 3 }, SeqCounts { k: 0, m: 7 }];
        let lik = CellLikelihood::new(&grid, &obs);
        let mut grad = vec![0.0; 5];
        let v = spline_marginal_loglik(&[0.0; 5], &basis, &lik, 1.0, &mut grad);
        let want: f64 = obs
            .iter()
            .map(|c| {
                let mean: f64 = grid
                    .points()
                    .iter()
                    .map(|&q| {
                        statrs::function::factorial::binomial(c.m as u64, c.k as u64)
                            * q.powi(c.k as i32)
                            * (1.0 - q).powi((c.m - c.k) as i32)
                    })
                    .sum::<f64>()
                    / 100.0;
                mean.ln()
            })
            .sum();
        assert!((v - want).abs() < 1e-10);
    }

    #[test]
    fn penalty_arithmetic() {
        let grid = SupportGrid::uniform(100).unwrap();
        let basis = SplineBasis::new(grid.points(), 5).unwrap();
        let lik = CellLikelihood::new(&grid, &[SeqCounts { k: 2, m: 9 }, SeqCounts { k: 0, m: 1 }]);
        let e1 = [1.0, 0.0, 0.0, 0.0, 0.0];
        let mut g = vec![0.0; 5];
        let a = spline_marginal_loglik(&e1, &basis, &lik, 1.0, &mut g);
        let b = spline_marginal_loglik(&e1, &basis, &lik, 0.0, &mut g);
        assert!((a - b + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let grid = SupportGrid::uniform(200).unwrap();
        let basis = SplineBasis::new(grid.points(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let obs: Vec<SeqCounts> = (0..50)
                .map(|_| {
                    let q: f64 = rng.random();
                    let m = rng.random_range(1..=60);
                    draw(&mut rng, q, m)
                })
                .collect();
            let lik = CellLikelihood::new(&grid, &obs);
            let gamma: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut grad = vec![0.0; 5];
            spline_marginal_loglik(&gamma, &basis, &lik, 1.0, &mut grad);
            let mut scratch = vec![0.0; 5];
            for j in 0..5 {
                let h = 1e-5;
                let mut up = gamma.clone();
                up[j] += h;
                let mut dn = gamma.clone();
                dn[j] -= h;
                let fd = (spline_marginal_loglik(&up, &basis, &lik, 1.0, &mut scratch)
                    - spline_marginal_loglik(&dn, &basis, &lik, 1.0, &mut scratch))
                    / (2.0 * h);
                let rel = (fd - grad[j]).abs() / grad[j].abs().max(1.0);
                assert!(rel < 1e-4, "j={j} fd={fd} an={}", grad[j]);
            }
        }
    }

    #[test]
    fn masses_normalized_and_converged() {
        let grid = SupportGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prior = Beta::new(0.5, 5.7).unwrap();
        let obs: Vec<SeqCounts> = (0..150)
            .map(|_| {
                let q = prior.sample(&mut rng);
                draw(&mut rng, q, 200)
            })
            .collect();
        let fit = fit_spline_prior(&obs, &grid, 10, 1.0).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert!((fit.mass.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(fit.mass.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn single_observation_rejected() {
        let grid = SupportGrid::uniform(100).unwrap();
        let err = fit_spline_prior(&[SeqCounts { k: 0, m: 4 }], &grid, 5, 1.0).unwrap_err();
        assert!(matches!(err, SieveError::InsufficientCell { .. }));
    }
}

//! Box-constrained BFGS with Armijo backtracking, used by the prior fits.

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    /// Infinity norm of the projected gradient at `x`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Coordinates resting on a bound at exit.
    pub at_bound: Vec<bool>,
}

const ARMIJO_C: f64 = 1e-4;

/// Maximize `f`, where `f(x, grad)` returns the objective and writes its gradient.
pub fn maximize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> OptimResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    // Work on the negated objective.
    let mut eval = |x: &[f64], g: &mut [f64]| {
        let v = f(x, g);
        g.iter_mut().for_each(|gi| *gi = -*gi);
        -v
    };
    let clamp = |v: f64| v.max(opts.lower).min(opts.upper);

    let mut x: Vec<f64> = x0.iter().map(|&v| clamp(v)).collect();
    let mut g = vec![0.0; n];
    let mut fx = eval(&x, &mut g);
    let mut h = identity(n);
    let mut fresh_h = true;
    let mut iterations = 0;
    let mut converged = false;

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut d = vec![0.0; n];

    while iterations < opts.max_iter {
        let active = active_set(&x, &g, opts);
        let pg_norm = projected_norm(&g, &active);
        if pg_norm < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        for i in 0..n {
            d[i] = if active[i] {
                0.0
            } else {
                -(0..n)
                    .filter(|&j| !active[j])
                    .map(|j| h[i * n + j] * g[j])
                    .sum::<f64>()
            };
        }
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = identity(n);
            fresh_h = true;
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -g[i] };
            }
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        }

        let mut step = 1.0;
        let mut accepted = false;
        let mut f_new = f64::INFINITY;
        while step > 1e-20 {
            for i in 0..n {
                x_new[i] = clamp(x[i] + step * d[i]);
            }
            f_new = eval(&x_new, &mut g_new);
            let decrease: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
            // Near the optimum the Armijo decrease falls below floating-point
            // resolution of f; accept steps that are flat in f but shrink the gradient.
            let flat = f_new - fx <= 1e-12 * fx.abs().max(1.0)
                && projected_norm(&g_new, &active_set(&x_new, &g_new, opts)) < pg_norm;
            if f_new.is_finite() && (f_new <= fx + ARMIJO_C * decrease || flat) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if fresh_h {
                break;
            }
            h = identity(n);
            fresh_h = true;
            continue;
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rel_change = (fx - f_new).abs() / fx.abs().max(1.0);
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if sy > 1e-12 {
            if fresh_h {
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                h = identity(n);
                h.iter_mut().for_each(|v| *v *= scale);
                fresh_h = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        if rel_change == 0.0 && s.iter().all(|v| *v == 0.0) {
            break;
        }
    }

    let active = active_set(&x, &g, opts);
    let grad_norm = projected_norm(&g, &active);
    if grad_norm < opts.grad_tol {
        converged = true;
    }
    let at_bound = x
        .iter()
        .map(|&v| v <= opts.lower || v >= opts.upper)
        .collect();
    OptimResult {
        x,
        value: -fx,
        grad: g.iter().map(|v| -v).collect(),
        grad_norm,
        iterations,
        converged,
        at_bound,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// Coordinates pinned at a bound with the descent direction pointing outward.
fn active_set(x: &[f64], g: &[f64], opts: &BfgsOptions) -> Vec<bool> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| (xi <= opts.lower && gi > 0.0) || (xi >= opts.upper && gi < 0.0))
        .collect()
}

fn projected_norm(g: &[f64], active: &[bool]) -> f64 {
    g.iter()
        .zip(active)
        .filter(|(_, &a)| !a)
        .fold(0.0, |m, (v, _)| m.max(v.abs()))
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum())
        .collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

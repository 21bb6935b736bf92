//! Natural cubic spline basis evaluated on the support grid.

use nalgebra::DMatrix;

use crate::error::{Result, SieveError};

/// `G x df` design matrix, row-major.
///
/// Built from the truncated-power natural spline with `df + 1` knots (boundary
/// knots at the grid ends, interior knots at grid quantiles). Columns are then
/// centered over the grid, orthonormalized and scaled to unit root-mean-square,
/// so a unit coefficient moves the log-density by about one unit.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    rows: usize,
    df: usize,
    values: Vec<f64>,
    knots: Vec<f64>,
}

fn quantile_sorted(xs: &[f64], p: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(xs.len() - 1);
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

impl SplineBasis {
    pub fn new(points: &[f64], df: usize) -> Result<Self> {
        if df < 2 {
            return Err(SieveError::Domain(format!("spline df must be at least 2, got {df}")));
        }
        if points.len() <= df + 1 {
            return Err(SieveError::Domain(format!(
                "grid of {} points is too small for df={df}",
                points.len()
            )));
        }
        let g = points.len();
        let knots: Vec<f64> = (0..=df)
            .map(|j| quantile_sorted(points, j as f64 / df as f64))
            .collect();
        let last = knots[df];
        let d = |k: usize, x: f64| -> f64 {
            let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
            (cube(x - knots[k]) - cube(x - last)) / (last - knots[k])
        };
        let raw = DMatrix::from_fn(g, df, |i, j| {
            let x = points[i];
            if j == 0 {
                x
            } else {
                d(j - 1, x) - d(df - 1, x)
            }
        });
        let mut centered = raw;
        for mut col in centered.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        let q = centered.qr().q();
        let scale = (g as f64).sqrt();
        let mut values = vec![0.0; g * df];
        for i in 0..g {
            for j in 0..df {
                values[i * df + j] = q[(i, j)] * scale;
            }
        }
        Ok(Self {
            rows: g,
            df,
            values,
            knots,
        })
    }

    pub fn df(&self) -> usize {
        self.df
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.df..(i + 1) * self.df]
    }

    /// `out = B gamma`.
    pub fn apply(&self, gamma: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(gamma).map(|(b, c)| b * c).sum();
        }
    }

    /// `out = B^T v`.
    pub fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, vi) in v.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.row(i)) {
                *o += b * vi;
            }
        }
    }
}

use serde::Serialize;

use crate::data::SeqCounts;
use crate::error::{Result, SieveError};

pub const DEFAULT_GRID_SIZE: usize = 500;
pub const MIN_GRID_SIZE: usize = 50;

/// Discrete support for the mismatch proportion, strictly inside (0, 1).
///
/// Each point `q_g` represents the cell `[edge_g, edge_{g+1})` of the unit
/// interval; parametric priors are discretized by their mass over cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportGrid {
    points: Vec<f64>,
    #[serde(skip)]
    edges: Vec<f64>,
    #[serde(skip)]
    ln_q: Vec<f64>,
    #[serde(skip)]
    ln_1mq: Vec<f64>,
}

impl SupportGrid {
    /// Interval midpoints `q_g = (g - 0.5) / G`.
    pub fn uniform(size: usize) -> Result<Self> {
        if size < MIN_GRID_SIZE {
            return Err(SieveError::Domain(format!(
                "grid size {size} is below the minimum of {MIN_GRID_SIZE}"
            )));
        }
        let g = size as f64;
        Self::from_points((1..=size).map(|i| (i as f64 - 0.5) / g).collect())
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < MIN_GRID_SIZE {
            return Err(SieveError::Domain(format!(
                "grid size {} is below the minimum of {MIN_GRID_SIZE}",
                points.len()
            )));
        }
        if points.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(SieveError::Domain("grid points must lie in (0, 1)".into()));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SieveError::Domain("grid must be strictly increasing".into()));
        }
        let mut edges = Vec::with_capacity(points.len() + 1);
        edges.push(0.0);
        edges.extend(points.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        edges.push(1.0);
        let ln_q = points.iter().map(|q| q.ln()).collect();
        let ln_1mq = points.iter().map(|q| (-q).ln_1p()).collect();
        Ok(Self {
            points,
            edges,
            ln_q,
            ln_1mq,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// `log f_binom(k; m, q_g)` without the binomial coefficient, written into `out`.
    pub fn binomial_kernel(&self, counts: SeqCounts, out: &mut [f64]) {
        let k = f64::from(counts.k);
        let fail = f64::from(counts.m - counts.k);
        for ((o, lq), l1q) in out.iter_mut().zip(&self.ln_q).zip(&self.ln_1mq) {
            *o = k * lq + fail * l1q;
        }
    }
}

impl Default for SupportGrid {
    fn default() -> Self {
        Self::uniform(DEFAULT_GRID_SIZE).expect("default grid is valid")
    }
}

/// Relative likelihood below which grid entries of a row are dropped.
const ROW_CUTOFF: f64 = 1e-18;

/// Binomial likelihoods of a set of `(K, M)` observations over a grid.
///
/// Identical observations are collapsed into one row with a multiplicity.
/// Row `i` stores `exp(ll_ig - max_g ll_ig)` over the contiguous range of grid
/// points where it exceeds `1e-18`; `log_scale[i]` restores the dropped
/// constants including the binomial coefficient.
#[derive(Debug, Clone)]
pub struct CellLikelihood {
    pub(crate) cols: usize,
    pub(crate) scaled: Vec<f64>,
    /// `(offset into scaled, first grid index, length)` per row.
    pub(crate) spans: Vec<(usize, usize, usize)>,
    pub(crate) log_scale: Vec<f64>,
    pub(crate) multiplicity: Vec<f64>,
    pub(crate) n_obs: usize,
}

impl CellLikelihood {
    pub fn new(grid: &SupportGrid, obs: &[SeqCounts]) -> Self {
        let mut sorted: Vec<SeqCounts> = obs.to_vec();
        sorted.sort_unstable();
        let mut unique: Vec<(SeqCounts, usize)> = Vec::new();
        for c in sorted {
            match unique.last_mut() {
                Some((last, n)) if *last == c => *n += 1,
                _ => unique.push((c, 1)),
            }
        }
        let cols = grid.len();
        let mut buf = vec![0.0; cols];
        let mut scaled = Vec::new();
        let mut spans = Vec::with_capacity(unique.len());
        let mut log_scale = Vec::with_capacity(unique.len());
        for (c, _) in &unique {
            grid.binomial_kernel(*c, &mut buf);
            let max = buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            buf.iter_mut().for_each(|v| *v = (*v - max).exp());
            let first = buf.iter().position(|&v| v >= ROW_CUTOFF).unwrap_or(0);
            let last = buf.iter().rposition(|&v| v >= ROW_CUTOFF).unwrap_or(cols - 1);
            spans.push((scaled.len(), first, last + 1 - first));
            scaled.extend_from_slice(&buf[first..=last]);
            log_scale.push(max + statrs::function::factorial::ln_binomial(c.m as u64, c.k as u64));
        }
        Self {
            cols,
            multiplicity: unique.iter().map(|(_, n)| *n as f64).collect(),
            scaled,
            spans,
            log_scale,
            n_obs: obs.len(),
        }
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_unique(&self) -> usize {
        self.spans.len()
    }

    pub fn n_grid(&self) -> usize {
        self.cols
    }

    #[inline]
    fn row(&self, i: usize) -> (&[f64], usize) {
        let (off, first, len) = self.spans[i];
        (&self.scaled[off..off + len], first)
    }

    /// `sum_i log sum_g f_binom(K_i; M_i, q_g) mass_g`.
    pub fn marginal_loglik(&self, mass: &[f64]) -> f64 {
        (0..self.spans.len())
            .map(|i| {
                let (row, first) = self.row(i);
                let f: f64 = row.iter().zip(&mass[first..]).map(|(l, g)| l * g).sum();
                self.multiplicity[i] * (f.ln() + self.log_scale[i])
            })
            .sum()
    }

    /// Marginal log-likelihood plus `sum_i posterior_i`, the summed per-observation
    /// posterior masses, accumulated into `post_sum`.
    pub(crate) fn loglik_and_posterior_sum(&self, mass: &[f64], post_sum: &mut [f64]) -> f64 {
        post_sum.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for i in 0..self.spans.len() {
            let (row, first) = self.row(i);
            let mass = &mass[first..first + row.len()];
            let f: f64 = row.iter().zip(mass).map(|(l, g)| l * g).sum();
            total += self.multiplicity[i] * (f.ln() + self.log_scale[i]);
            let w = self.multiplicity[i] / f;
            for ((p, l), g) in post_sum[first..].iter_mut().zip(row).zip(mass) {
                *p += w * l * g;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid() {
        let g = SupportGrid::uniform(500).unwrap();
        assert_eq!(g.len(), 500);
        assert!((g.points()[0] - 0.001).abs() < 1e-15);
        assert!((g.points()[499] - 0.999).abs() < 1e-15);
        assert!((g.edges()[1] - 0.002).abs() < 1e-15);
        assert!(SupportGrid::uniform(49).is_err());
    }

    #[test]
    fn duplicate_rows_collapse() {
        let g = SupportGrid::uniform(100).unwrap();
        let c = SeqCounts { k: 1, m: 4 };
        let lik = CellLikelihood::new(&g, &[c, c, SeqCounts { k: 0, m: 3 }]);
        assert_eq!(lik.n_unique(), 2);
        assert_eq!(lik.n_obs(), 3);
        let uniform = vec![0.01; 100];
        let single = CellLikelihood::new(&g, &[c]);
        let zero = CellLikelihood::new(&g, &[SeqCounts { k: 0, m: 3 }]);
        let want = 2.0 * single.marginal_loglik(&uniform) + zero.marginal_loglik(&uniform);
        assert!((lik.marginal_loglik(&uniform) - want).abs() < 1e-12);
    }
}

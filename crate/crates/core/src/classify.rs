//! Posterior mismatch distributions and failure-type bin probabilities.

use serde::Serialize;

use crate::data::{Dataset, SeqCounts, ThresholdSpec};
use crate::deconvolve::{beta_grid_mass, MixingPrior, PriorFit, PriorSet, SupportGrid};
use crate::error::{Result, SieveError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorQ {
    pub mass: Vec<f64>,
}

impl PosteriorQ {
    pub fn mean(&self, grid: &SupportGrid) -> f64 {
        grid.points().iter().zip(&self.mass).map(|(q, m)| q * m).sum()
    }

    pub fn variance(&self, grid: &SupportGrid) -> f64 {
        let mu = self.mean(grid);
        grid.points()
            .iter()
            .zip(&self.mass)
            .map(|(q, m)| (q - mu).powi(2) * m)
            .sum()
    }
}

/// Posterior masses `∝ f_binom(K; M, q_g) prior_g`, evaluated in log space.
pub fn posterior_from_mass(prior: &[f64], grid: &SupportGrid, counts: SeqCounts) -> Result<PosteriorQ> {
    if counts.k > counts.m {
        return Err(SieveError::Domain(format!(
            "K={} exceeds M={}",
            counts.k, counts.m
        )));
    }
    let mut log = vec![0.0; grid.len()];
    grid.binomial_kernel(counts, &mut log);
    for (l, p) in log.iter_mut().zip(prior) {
        *l += p.ln();
    }
    let max = log.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(SieveError::Internal(
            "posterior has no mass on the grid".into(),
        ));
    }
    let mut total = 0.0;
    for l in log.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    log.iter_mut().for_each(|v| *v /= total);
    Ok(PosteriorQ { mass: log })
}

/// Posterior over the grid.
///
/// A Beta prior is a continuous density, so its posterior is the exact conjugate
/// update integrated over the grid cells; spline priors are grid masses.
pub fn posterior(prior: &MixingPrior, grid: &SupportGrid, counts: SeqCounts) -> Result<PosteriorQ> {
    match &prior.fit {
        PriorFit::Beta(b) => {
            if counts.k > counts.m {
                return Err(SieveError::Domain(format!(
                    "K={} exceeds M={}",
                    counts.k, counts.m
                )));
            }
            let a = b.alpha + f64::from(counts.k);
            let bb = b.beta + f64::from(counts.m - counts.k);
            Ok(PosteriorQ {
                mass: beta_grid_mass(a, bb, grid),
            })
        }
        PriorFit::Spline(_) => posterior_from_mass(&prior.mass, grid, counts),
    }
}

/// Mass of each threshold bin; bins are `[q_j, q_{j+1})` with the top bin closed.
pub fn bin_probs(post: &PosteriorQ, grid: &SupportGrid, thresholds: &ThresholdSpec) -> Vec<f64> {
    let mut nu = vec![0.0; thresholds.n_bins()];
    for (q, m) in grid.points().iter().zip(&post.mass) {
        nu[thresholds.bin_of(*q)] += m;
    }
    let total: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|v| *v /= total);
    nu
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    /// Index of the record in the dataset.
    pub record: usize,
    pub id: String,
    pub cell: String,
    pub k: u32,
    pub m: u32,
    pub naive_bin: Option<usize>,
    pub nu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationTable {
    pub n_bins: usize,
    pub rows: Vec<ClassRow>,
}

impl ClassificationTable {
    /// `n x l` cause weights; non-endpoints and unsequenced endpoints get zeros.
    pub fn weight_matrix(&self, n_records: usize) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; self.n_bins]; n_records];
        for row in &self.rows {
            w[row.record].clone_from(&row.nu);
        }
        w
    }

    /// Weights from the naive `K/M` labels; `M = 0` endpoints get zeros.
    pub fn naive_weight_matrix(&self, n_records: usize) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; self.n_bins]; n_records];
        for row in &self.rows {
            if let Some(b) = row.naive_bin {
                w[row.record][b] = 1.0;
            }
        }
        w
    }
}

/// Classify every sequenced endpoint using the prior of its conditioning cell.
pub fn classify_dataset(
    data: &Dataset,
    priors: &PriorSet,
    thresholds: &ThresholdSpec,
) -> Result<ClassificationTable> {
    let grid = priors.grid.as_ref();
    let bin_of_grid: Vec<usize> = grid.points().iter().map(|&q| thresholds.bin_of(q)).collect();
    let mut rows = Vec::new();
    for (idx, rec) in data.sequenced_endpoints() {
        let counts = rec.counts.expect("sequenced endpoint has counts");
        let cell = priors.spec.cell_of(rec, data)?;
        let prior = priors.prior_for(&cell)?;
        let post = posterior(prior, grid, counts)?;
        let mut nu = vec![0.0; thresholds.n_bins()];
        for (b, m) in bin_of_grid.iter().zip(&post.mass) {
            nu[*b] += m;
        }
        let total: f64 = nu.iter().sum();
        nu.iter_mut().for_each(|v| *v /= total);
        rows.push(ClassRow {
            record: idx,
            id: rec.id.clone(),
            cell,
            k: counts.k,
            m: counts.m,
            naive_bin: thresholds.naive_bin(counts),
            nu,
        });
    }
    Ok(ClassificationTable {
        n_bins: thresholds.n_bins(),
        rows,
    })
}

/// Table of naive one-hot labels from `K/M`; endpoints with `M = 0` get zero weight.
pub fn classify_naive(data: &Dataset, thresholds: &ThresholdSpec) -> ClassificationTable {
    let rows = data
        .sequenced_endpoints()
        .map(|(idx, rec)| {
            let counts = rec.counts.expect("sequenced endpoint has counts");
            let naive_bin = thresholds.naive_bin(counts);
            let mut nu = vec![0.0; thresholds.n_bins()];
            if let Some(b) = naive_bin {
                nu[b] = 1.0;
            }
            ClassRow {
                record: idx,
                id: rec.id.clone(),
                cell: "naive".into(),
                k: counts.k,
                m: counts.m,
                naive_bin,
                nu,
            }
        })
        .collect();
    ClassificationTable {
        n_bins: thresholds.n_bins(),
        rows,
    }
}

/// CSV `id,cell,K,M,naive_bin,nu_0..nu_{l-1}`; `naive_bin` is empty when `M = 0`.
pub fn write_classification_csv<W: std::io::Write>(
    table: &ClassificationTable,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "cell", "K", "M", "naive_bin"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..table.n_bins).map(|j| format!("nu_{j}")));
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![
            row.id.clone(),
            row.cell.clone(),
            row.k.to_string(),
            row.m.to_string(),
            row.naive_bin.map(|b| b.to_string()).unwrap_or_default(),
        ];
        rec.extend(row.nu.iter().map(|v| format!("{v:.12}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deconvolve::BetaPrior;

    fn beta_prior(a: f64, b: f64, grid: &SupportGrid) -> MixingPrior {
        MixingPrior {
            fit: PriorFit::Beta(BetaPrior {
                alpha: a,
                beta: b,
                loglik: 0.0,
                grad_norm: 0.0,
                iterations: 0,
                converged: true,
                boundary: false,
                n_obs: 0,
            }),
            mass: beta_grid_mass(a, b, grid),
        }
    }

    #[test]
    fn empty_counts_return_prior() {
        let grid = SupportGrid::default();
        let prior = beta_prior(0.5, 5.7, &grid);
        let post = posterior(&prior, &grid, SeqCounts { k: 0, m: 0 }).unwrap();
        let tv: f64 = post.mass.iter().zip(&prior.mass).map(|(a, b)| (a - b).abs()).sum();
        assert!(tv < 1e-12);
    }

    #[test]
    fn conjugate_update() {
        let grid = SupportGrid::default();
        let prior = beta_prior(1.0, 1.0, &grid);
        let post = posterior(&prior, &grid, SeqCounts { k: 1, m: 1 }).unwrap();
        let want = beta_grid_mass(2.0, 1.0, &grid);
        let tv: f64 = 0.5 * post.mass.iter().zip(&want).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 1e-3, "tv={tv}");
        let nu = bin_probs(&post, &grid, &ThresholdSpec::binary(0.5).unwrap());
        assert!((nu[1] - 0.75).abs() < 1e-3);
    }

    #[test]
    fn deep_sequencing_concentrates() {
        let grid = SupportGrid::default();
        let prior = beta_prior(2.0, 2.0, &grid);
        let post = posterior(&prior, &grid, SeqCounts { k: 0, m: 1000 }).unwrap();
        let low: f64 = grid
            .points()
            .iter()
            .zip(&post.mass)
            .filter(|(q, _)| **q < 0.01)
            .map(|(_, m)| m)
            .sum();
        assert!(low >= 0.99, "{low}");
    }

    #[test]
    fn symmetric_prior_symmetric_bins() {
        let grid = SupportGrid::default();
        let prior = beta_prior(2.0, 2.0, &grid);
        let post = posterior(&prior, &grid, SeqCounts { k: 0, m: 0 }).unwrap();
        let nu = bin_probs(&post, &grid, &ThresholdSpec::binary(0.5).unwrap());
        assert!((nu[0] - 0.5).abs() < 1e-9 && (nu[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn interior_bin_capture() {
        let grid = SupportGrid::default();
        let prior = beta_prior(200.0, 200.0, &grid);
        let post = posterior(&prior, &grid, SeqCounts { k: 5000, m: 10000 }).unwrap();
        let nu = bin_probs(&post, &grid, &ThresholdSpec::from_interior(&[0.01, 0.99]).unwrap());
        assert!(nu[0] < 1e-12 && (nu[1] - 1.0).abs() < 1e-12 && nu[2] < 1e-12);
    }

    #[test]
    fn rejects_k_above_m() {
        let grid = SupportGrid::default();
        let prior = beta_prior(1.0, 1.0, &grid);
        assert!(posterior(&prior, &grid, SeqCounts { k: 3, m: 2 }).is_err());
    }
}

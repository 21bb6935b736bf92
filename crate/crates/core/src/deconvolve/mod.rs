//! Empirical-Bayes estimation of the mixing distribution of the mismatch proportion.

pub mod basis;
pub mod beta;
pub mod grid;
pub mod spline;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

pub use basis::SplineBasis;
pub use beta::{beta_grid_mass, betabinom_logpmf, fit_beta_prior, BetaPrior};
pub use grid::{CellLikelihood, SupportGrid, DEFAULT_GRID_SIZE};
pub use spline::{
    fit_spline_prior, fit_spline_with, spline_marginal_loglik, SplinePrior, DEFAULT_C0, DEFAULT_DF,
};

use crate::data::{Dataset, SeqCounts, SubjectRecord};
use crate::error::{Result, SieveError, Warning};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorFamily {
    Beta,
    Spline,
}

impl FromStr for PriorFamily {
    type Err = SieveError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "beta" => Ok(Self::Beta),
            "spline" => Ok(Self::Spline),
            other => Err(SieveError::InvalidConfig(format!("unknown prior family `{other}`"))),
        }
    }
}

impl fmt::Display for PriorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Beta => "beta",
            Self::Spline => "spline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorConfig {
    pub family: PriorFamily,
    pub df: usize,
    pub c0: f64,
    pub grid_size: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            family: PriorFamily::Spline,
            df: DEFAULT_DF,
            c0: DEFAULT_C0,
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

/// A variable defining conditioning cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CondVar {
    Arm,
    /// Covariate by name or zero-based index; must be integer-valued.
    Covariate(String),
    Stratum,
    /// Follow-up time binned at the given interior cut points.
    TimeBins(Vec<f64>),
}

/// Set of discrete variables whose joint levels define the prior cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditioningSpec {
    pub vars: Vec<CondVar>,
}

impl Default for ConditioningSpec {
    fn default() -> Self {
        Self {
            vars: vec![CondVar::Arm],
        }
    }
}

impl ConditioningSpec {
    pub fn pooled() -> Self {
        Self { vars: Vec::new() }
    }

    pub fn arm_and_covariates(names: &[&str]) -> Self {
        let mut vars = vec![CondVar::Arm];
        vars.extend(names.iter().map(|n| CondVar::Covariate(n.to_string())));
        Self { vars }
    }

    fn covariate_index(name: &str, data: &Dataset) -> Result<usize> {
        if let Some(i) = data.covariate_names.iter().position(|n| n == name) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i < data.p() => Ok(i),
            _ => Err(SieveError::InvalidConfig(format!(
                "unknown conditioning covariate `{name}`"
            ))),
        }
    }

    /// Cell label of one record, e.g. `arm=1,x1=0`; `all` for the empty spec.
    pub fn cell_of(&self, rec: &SubjectRecord, data: &Dataset) -> Result<String> {
        if self.vars.is_empty() {
            return Ok("all".into());
        }
        let mut parts = Vec::with_capacity(self.vars.len());
        for var in &self.vars {
            parts.push(match var {
                CondVar::Arm => format!("arm={}", rec.arm.code()),
                CondVar::Covariate(name) => {
                    let idx = Self::covariate_index(name, data)?;
                    let v = rec.covariates[idx];
                    if v.fract() != 0.0 || !v.is_finite() {
                        return Err(SieveError::NonDiscreteConditioning(
                            data.covariate_names[idx].clone(),
                        ));
                    }
                    format!("{}={}", data.covariate_names[idx], v as i64)
                }
                CondVar::Stratum => format!("stratum={}", data.stratum_labels[rec.stratum]),
                CondVar::TimeBins(cuts) => {
                    format!("tbin={}", cuts.iter().take_while(|&&c| rec.time >= c).count())
                }
            });
        }
        Ok(parts.join(","))
    }
}

impl FromStr for ConditioningSpec {
    type Err = SieveError;

    /// Comma-separated tokens: `arm`, `stratum`, `x:<name|index>`, `time:<c1>/<c2>/...`.
    /// `none` selects a single pooled cell.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::pooled());
        }
        let mut vars = Vec::new();
        for tok in s.split(',').map(str::trim) {
            let var = match tok {
                "arm" | "z" | "Z" => CondVar::Arm,
                "stratum" | "s" | "S" => CondVar::Stratum,
                t if t.starts_with("x:") => CondVar::Covariate(t[2..].to_string()),
                t if t.starts_with("time:") => {
                    let cuts = t[5..]
                        .split('/')
                        .map(|c| c.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| SieveError::NonDiscreteConditioning(t.to_string()))?;
                    if cuts.is_empty() || cuts.windows(2).any(|w| !(w[0] < w[1])) {
                        return Err(SieveError::NonDiscreteConditioning(t.to_string()));
                    }
                    CondVar::TimeBins(cuts)
                }
                "time" => return Err(SieveError::NonDiscreteConditioning("time".into())),
                other => {
                    return Err(SieveError::InvalidConfig(format!(
                        "unknown conditioning variable `{other}`"
                    )))
                }
            };
            vars.push(var);
        }
        Ok(Self { vars })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PriorFit {
    Beta(BetaPrior),
    Spline(SplinePrior),
}

/// Fitted prior for one cell, with its masses over the shared grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingPrior {
    pub fit: PriorFit,
    #[serde(skip)]
    pub mass: Vec<f64>,
}

impl MixingPrior {
    pub fn loglik(&self) -> f64 {
        match &self.fit {
            PriorFit::Beta(b) => b.loglik,
            PriorFit::Spline(s) => s.loglik,
        }
    }

    pub fn converged(&self) -> bool {
        match &self.fit {
            PriorFit::Beta(b) => b.converged || b.boundary,
            PriorFit::Spline(s) => s.converged,
        }
    }

    /// `P(lo <= Q < hi)` under the grid masses.
    pub fn interval_mass(&self, grid: &SupportGrid, lo: f64, hi: f64) -> f64 {
        grid.points()
            .iter()
            .zip(&self.mass)
            .filter(|(q, _)| **q >= lo && **q < hi)
            .map(|(_, m)| m)
            .sum()
    }
}

/// Priors for every cell plus the pooled fallback.
#[derive(Debug, Clone)]
pub struct PriorSet {
    pub grid: Arc<SupportGrid>,
    pub config: PriorConfig,
    pub spec: ConditioningSpec,
    pub priors: BTreeMap<String, MixingPrior>,
    pub pooled: Option<MixingPrior>,
    /// Cells that use the pooled prior.
    pub fallback: BTreeMap<String, usize>,
    pub warnings: Vec<Warning>,
}

impl PriorSet {
    pub fn prior_for(&self, cell: &str) -> Result<&MixingPrior> {
        if let Some(p) = self.priors.get(cell) {
            return Ok(p);
        }
        self.pooled
            .as_ref()
            .ok_or_else(|| SieveError::MissingPrior(cell.to_string()))
    }

    /// Every cell label, including those served by the pooled prior.
    pub fn cells(&self) -> Vec<String> {
        let mut cells: Vec<String> = self.priors.keys().cloned().collect();
        cells.extend(self.fallback.keys().cloned());
        cells.sort();
        cells
    }
}

/// Reusable fitting context: the grid and, for the spline family, its basis.
#[derive(Debug, Clone)]
pub struct Deconvolver {
    pub grid: Arc<SupportGrid>,
    pub basis: Option<Arc<SplineBasis>>,
    pub config: PriorConfig,
}

impl Deconvolver {
    pub fn new(config: PriorConfig) -> Result<Self> {
        if !(config.c0 >= 0.0 && config.c0.is_finite()) {
            return Err(SieveError::InvalidConfig(format!(
                "penalty c0 must be >= 0, got {}",
                config.c0
            )));
        }
        let grid = Arc::new(SupportGrid::uniform(config.grid_size)?);
        let basis = match config.family {
            PriorFamily::Spline => Some(Arc::new(SplineBasis::new(grid.points(), config.df)?)),
            PriorFamily::Beta => None,
        };
        Ok(Self { grid, basis, config })
    }

    fn fit_cell(
        &self,
        cell: &str,
        obs: &[SeqCounts],
        warm: Option<&MixingPrior>,
        warnings: &mut Vec<Warning>,
    ) -> Result<MixingPrior> {
        match self.config.family {
            PriorFamily::Beta => {
                let fit = beta::fit_beta_prior_labeled(obs, cell)?;
                if fit.boundary {
                    warnings.push(Warning::BoundaryFit { cell: cell.into() });
                } else if !fit.converged {
                    warnings.push(Warning::ConvergenceWarning {
                        context: format!("beta prior, cell {cell}"),
                        iterations: fit.iterations,
                        grad_norm: fit.grad_norm,
                    });
                }
                let mass = fit.grid_mass(&self.grid);
                Ok(MixingPrior {
                    fit: PriorFit::Beta(fit),
                    mass,
                })
            }
            PriorFamily::Spline => {
                let usable: Vec<SeqCounts> = obs.iter().copied().filter(|c| c.m >= 1).collect();
                if usable.len() < 2 {
                    return Err(SieveError::InsufficientCell {
                        cell: cell.into(),
                        usable: usable.len(),
                    });
                }
                let basis = self.basis.as_ref().expect("spline basis present");
                let lik = CellLikelihood::new(&self.grid, &usable);
                let init = warm.and_then(|p| match &p.fit {
                    PriorFit::Spline(s) => Some(s.gamma.as_slice()),
                    PriorFit::Beta(_) => None,
                });
                let mut fit = fit_spline_with(&lik, basis, self.config.c0, init)?;
                if !fit.converged {
                    warnings.push(Warning::ConvergenceWarning {
                        context: format!("spline prior, cell {cell}"),
                        iterations: fit.iterations,
                        grad_norm: fit.grad_norm,
                    });
                }
                let mass = std::mem::take(&mut fit.mass);
                Ok(MixingPrior {
                    fit: PriorFit::Spline(fit),
                    mass,
                })
            }
        }
    }

    /// Fit one prior per conditioning cell.
    ///
    /// Cells with fewer than two endpoints having `M >= 1` use the pooled prior.
    /// `warm` supplies starting values from an earlier fit on similar data.
    pub fn fit(
        &self,
        data: &Dataset,
        spec: &ConditioningSpec,
        warm: Option<&PriorSet>,
    ) -> Result<PriorSet> {
        let mut cells: BTreeMap<String, Vec<SeqCounts>> = BTreeMap::new();
        let mut pooled_obs = Vec::new();
        for (_, rec) in data.sequenced_endpoints() {
            let counts = rec.counts.expect("sequenced endpoint has counts");
            let cell = spec.cell_of(rec, data)?;
            let entry = cells.entry(cell).or_default();
            if counts.m >= 1 {
                entry.push(counts);
                pooled_obs.push(counts);
            }
        }
        if pooled_obs.is_empty() {
            return Err(SieveError::NoEndpointData);
        }
        let mut warnings = Vec::new();
        let mut priors = BTreeMap::new();
        let mut fallback = BTreeMap::new();
        for (cell, obs) in &cells {
            if obs.len() < 2 {
                fallback.insert(cell.clone(), obs.len());
                warnings.push(Warning::FallbackPrior {
                    cell: cell.clone(),
                    usable: obs.len(),
                });
                continue;
            }
            let w = warm.and_then(|s| s.priors.get(cell));
            priors.insert(cell.clone(), self.fit_cell(cell, obs, w, &mut warnings)?);
        }
        let pooled = if !fallback.is_empty() || cells.len() == 1 {
            if cells.len() == 1 && fallback.is_empty() {
                priors.values().next().cloned()
            } else {
                let w = warm.and_then(|s| s.pooled.as_ref());
                Some(self.fit_cell("pooled", &pooled_obs, w, &mut warnings)?)
            }
        } else {
            None
        };
        Ok(PriorSet {
            grid: Arc::clone(&self.grid),
            config: self.config.clone(),
            spec: spec.clone(),
            priors,
            pooled,
            fallback,
            warnings,
        })
    }
}

/// Convenience wrapper building a fresh [`Deconvolver`].
pub fn fit_priors(data: &Dataset, spec: &ConditioningSpec, config: &PriorConfig) -> Result<PriorSet> {
    Deconvolver::new(config.clone())?.fit(data, spec, None)
}

/// Write the grid masses of every fitted prior as CSV `cell,q,mass`.
pub fn write_prior_csv<W: std::io::Write>(set: &PriorSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cell", "q", "mass"])?;
    let mut emit = |label: &str, prior: &MixingPrior| -> Result<()> {
        for (q, m) in set.grid.points().iter().zip(&prior.mass) {
            w.write_record([label.to_string(), format!("{q}"), format!("{m:.12e}")])?;
        }
        Ok(())
    };
    for (cell, prior) in &set.priors {
        emit(cell, prior)?;
    }
    if let Some(p) = &set.pooled {
        if !set.priors.contains_key("all") || !set.fallback.is_empty() {
            emit("pooled", p)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct PriorMetadata<'a> {
    pub family: PriorFamily,
    pub df: Option<usize>,
    pub c0: Option<f64>,
    pub grid_size: usize,
    pub conditioning: &'a ConditioningSpec,
    pub cells: BTreeMap<&'a str, &'a MixingPrior>,
    pub pooled: Option<&'a MixingPrior>,
    pub fallback_cells: &'a BTreeMap<String, usize>,
    pub warnings: &'a [Warning],
}

impl PriorSet {
    pub fn metadata(&self) -> PriorMetadata<'_> {
        let spline = self.config.family == PriorFamily::Spline;
        PriorMetadata {
            family: self.config.family,
            df: spline.then_some(self.config.df),
            c0: spline.then_some(self.config.c0),
            grid_size: self.grid.len(),
            conditioning: &self.spec,
            cells: self.priors.iter().map(|(k, v)| (k.as_str(), v)).collect(),
            pooled: self.pooled.as_ref(),
            fallback_cells: &self.fallback,
            warnings: &self.warnings,
        }
    }
}

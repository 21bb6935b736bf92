//! End-to-end estimation: priors, classification, nuisance models, Cox fits, bootstrap.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::classify::{classify_dataset, classify_naive, ClassificationTable};
use crate::cox::{fit_competing, CompetingFit, CoxData, CoxOptions};
use crate::data::{Dataset, ThresholdSpec};
use crate::deconvolve::{ConditioningSpec, Deconvolver, PriorConfig, PriorSet};
use crate::error::{Result, SieveError, Warning};
use crate::inference::{bootstrap, infer, BootstrapResult, InferenceReport};
use crate::missingness::{
    aipw_weights, fit_missingness, fit_outcome_regression, ipw_weights, MissingnessModel,
    NuisanceDesign, OutcomeRegression, DEFAULT_EPSILON,
};
use crate::rng::RngFactory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[default]
    Base,
    Ipw,
    Aipw,
}

impl FromStr for EstimatorKind {
    type Err = SieveError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Self::Base),
            "ipw" => Ok(Self::Ipw),
            "aipw" => Ok(Self::Aipw),
            other => Err(SieveError::InvalidConfig(format!("unknown estimator `{other}`"))),
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Ipw => "ipw",
            Self::Aipw => "aipw",
        })
    }
}

/// Source of the cause weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Labeling {
    /// Posterior bin probabilities under the fitted priors.
    #[default]
    Posterior,
    /// One-hot labels from the observed fraction `K/M`.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub prior: PriorConfig,
    pub conditioning: ConditioningSpec,
    pub thresholds: ThresholdSpec,
    pub cox: CoxOptions,
    pub estimator: EstimatorKind,
    pub labeling: Labeling,
    pub epsilon: f64,
    pub missingness_design: NuisanceDesign,
    pub outcome_design: NuisanceDesign,
}

impl PipelineConfig {
    pub fn new(thresholds: ThresholdSpec) -> Self {
        Self {
            prior: PriorConfig::default(),
            conditioning: ConditioningSpec::default(),
            thresholds,
            cox: CoxOptions::default(),
            estimator: EstimatorKind::Base,
            labeling: Labeling::Posterior,
            epsilon: DEFAULT_EPSILON,
            missingness_design: NuisanceDesign::Full,
            outcome_design: NuisanceDesign::Full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub priors: Option<PriorSet>,
    pub classification: ClassificationTable,
    pub missingness: Option<MissingnessModel>,
    pub outcome: Option<OutcomeRegression>,
    pub weights: Vec<Vec<f64>>,
    pub fit: CompetingFit,
    pub warnings: Vec<Warning>,
}

impl PipelineFit {
    /// Treatment coefficients, failing if any type did not fit cleanly.
    pub fn betas(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.fit.types.len());
        for t in &self.fit.types {
            match t {
                Ok(f) if !f.separated => out.push(f.beta()),
                Ok(f) => {
                    return Err(SieveError::Domain(format!(
                        "failure type {} separated",
                        f.failure_type
                    )))
                }
                Err(e) => return Err(SieveError::Domain(e.message.clone())),
            }
        }
        Ok(out)
    }
}

/// Fitting context reused across the point estimate and bootstrap replicates.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    deconvolver: Option<Deconvolver>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let deconvolver = match config.labeling {
            Labeling::Posterior => Some(Deconvolver::new(config.prior.clone())?),
            Labeling::Naive => None,
        };
        Ok(Self {
            config,
            deconvolver,
        })
    }

    pub fn fit_priors(&self, data: &Dataset, warm: Option<&PriorSet>) -> Result<Option<PriorSet>> {
        self.deconvolver
            .as_ref()
            .map(|d| d.fit(data, &self.config.conditioning, warm))
            .transpose()
    }

    /// Run the estimator once; `warm` seeds the prior optimizer.
    pub fn fit(&self, data: &Dataset, warm: Option<&PriorSet>) -> Result<PipelineFit> {
        let cfg = &self.config;
        let mut warnings = Vec::new();
        let priors = self.fit_priors(data, warm)?;
        let classification = match &priors {
            Some(p) => {
                warnings.extend(p.warnings.iter().cloned());
                classify_dataset(data, p, &cfg.thresholds)?
            }
            None => classify_naive(data, &cfg.thresholds),
        };
        let nu = classification.weight_matrix(data.len());
        let unsequenced = data
            .records
            .iter()
            .filter(|r| r.event && !r.is_sequenced_endpoint())
            .count();
        let (weights, missingness, outcome) = match cfg.estimator {
            EstimatorKind::Base => {
                if unsequenced > 0 {
                    warnings.push(Warning::DroppedUnsequenced { count: unsequenced });
                }
                (nu, None, None)
            }
            EstimatorKind::Ipw => {
                let (model, w) = fit_missingness(data, cfg.missingness_design, cfg.epsilon)?;
                warnings.extend(w);
                (ipw_weights(&nu, data, &model), Some(model), None)
            }
            EstimatorKind::Aipw => {
                let (model, w) = fit_missingness(data, cfg.missingness_design, cfg.epsilon)?;
                warnings.extend(w);
                let outcome = fit_outcome_regression(data, &classification, cfg.outcome_design)?;
                (
                    aipw_weights(&nu, data, &model, &outcome),
                    Some(model),
                    Some(outcome),
                )
            }
        };
        let cox_data = CoxData::from_dataset(data)?;
        let fit = fit_competing(&cox_data, &weights, &cfg.cox);
        warnings.extend(fit.warnings.iter().cloned());
        Ok(PipelineFit {
            priors,
            classification,
            missingness,
            outcome,
            weights,
            fit,
            warnings,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub point: PipelineFit,
    pub bootstrap: BootstrapResult,
    pub report: InferenceReport,
}

/// Point estimate plus bootstrap inference.
///
/// Replicate prior fits start from the point-estimate priors.
pub fn analyze(
    data: &Dataset,
    pipeline: &Pipeline,
    n_boot: usize,
    rng: &RngFactory,
    level: f64,
) -> Result<Analysis> {
    let point = pipeline.fit(data, None)?;
    let beta = point.betas()?;
    let warm = point.priors.as_ref();
    let (boot, boot_warnings) = bootstrap(data, n_boot, rng, |sample| {
        pipeline.fit(sample, warm).and_then(|f| f.betas())
    })?;
    let mut report = infer(&beta, &boot, level);
    report.warnings.extend(boot_warnings);
    Ok(Analysis {
        point,
        bootstrap: boot,
        report,
    })
}

//! Command-line interface.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classify::write_classification_csv;
use crate::cox::TypeFit;
use crate::data::{load_dataset, Dataset, ThresholdSpec};
use crate::deconvolve::{write_prior_csv, ConditioningSpec, PriorConfig, PriorFamily, PriorSet};
use crate::design::{read_mark_table, screen_marks, select_q0, write_screen_csv, LodSpec, MarkData, ScreenOptions};
use crate::error::{Result, SieveError, Warning};
use crate::inference::InferenceReport;
use crate::pipeline::{analyze, EstimatorKind, Pipeline, PipelineConfig, PipelineFit};
use crate::rng::RngFactory;
use crate::simulate::{run_study, write_replicate_csv, SimConfig};

pub const DEFAULT_POD: f64 = 0.8;
pub const DEFAULT_BOOT: usize = 200;

#[derive(Debug, Parser)]
#[command(name = "multiseq-sieve", version, about = "Sieve analysis with deep-sequenced marks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Priors, classification, competing-risks fit and bootstrap inference.
    Fit(CommonArgs),
    /// Run a simulation study.
    Simulate(SimArgs),
    /// Screen marks for inter- and intra-individual diversity.
    Screen(ScreenArgs),
    /// Choose the threshold from detection limits at median depth.
    Threshold(CommonArgs),
    /// Fit priors and write per-endpoint bin probabilities.
    Classify(CommonArgs),
    /// Fit priors only.
    Deconvolve(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Subject CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Long-format per-sequence marks (`id,seq_index,mark`) filling K and M.
    #[arg(long)]
    pub marks: Option<PathBuf>,
    /// TOML file with any of the flag settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "pod")]
    pub q0: Option<f64>,
    #[arg(long)]
    pub pod: Option<f64>,
    /// Interior cut points for multi-bin analyses, e.g. `0.01,0.99`.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["q0", "pod"])]
    pub bins: Option<Vec<f64>>,
    #[arg(long, value_parser = ["beta", "spline"])]
    pub prior: Option<String>,
    #[arg(long)]
    pub df: Option<usize>,
    #[arg(long)]
    pub c0: Option<f64>,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Cell variables: `arm`, `stratum`, `x:<name>`, `time:<c1>/<c2>`, or `none`.
    #[arg(long)]
    pub conditioning: Option<String>,
    /// Bootstrap replicates; 0 reports model-based standard errors.
    #[arg(long)]
    pub boot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["base", "ipw", "aipw"])]
    pub estimator: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Worker threads; affects wall-clock only. Defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SimArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub study: Option<u8>,
    #[arg(long)]
    pub setting: Option<String>,
    /// Subjects per arm.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct ScreenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Long mark table `mark,id,k,m`; defaults to the K and M columns of the input.
    #[arg(long)]
    pub mark_table: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub reclass_frac: Option<f64>,
    /// Fixed minimum count per naive type, replacing the Fisher bound.
    #[arg(long)]
    pub min_count: Option<u64>,
}

/// Settings accepted in the `--config` file.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub marks: Option<PathBuf>,
    pub q0: Option<f64>,
    pub pod: Option<f64>,
    pub bins: Option<Vec<f64>>,
    pub prior: Option<String>,
    pub df: Option<usize>,
    pub c0: Option<f64>,
    pub grid: Option<usize>,
    pub conditioning: Option<String>,
    pub boot: Option<usize>,
    pub seed: Option<u64>,
    pub estimator: Option<String>,
    pub level: Option<f64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub study: Option<u8>,
    pub setting: Option<String>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub mark_table: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub reclass_frac: Option<f64>,
    pub min_count: Option<u64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text)
                .map_err(|e| SieveError::InvalidConfig(format!("{}: {e}", p.display())))
        }
    }
}

/// Flags merged over the config file.
#[derive(Debug, Clone)]
struct Resolved {
    file: FileConfig,
}

macro_rules! pick {
    ($flag:expr, $file:expr) => {
        $flag.clone().or_else(|| $file.clone())
    };
}

impl Resolved {
    fn new(args: &CommonArgs) -> Result<Self> {
        let f = load_file_config(args.config.as_deref())?;
        // Threshold choices are exclusive: a flag of any kind overrides all file settings.
        let threshold_flag = args.q0.is_some() || args.pod.is_some() || args.bins.is_some();
        let (q0, pod, bins) = if threshold_flag {
            (args.q0, args.pod, args.bins.clone())
        } else {
            (f.q0, f.pod, f.bins.clone())
        };
        let file = FileConfig {
            input: pick!(args.input, f.input),
            marks: pick!(args.marks, f.marks),
            q0,
            pod,
            bins,
            prior: pick!(args.prior, f.prior),
            df: pick!(args.df, f.df),
            c0: pick!(args.c0, f.c0),
            grid: pick!(args.grid, f.grid),
            conditioning: pick!(args.conditioning, f.conditioning),
            boot: pick!(args.boot, f.boot),
            seed: pick!(args.seed, f.seed),
            estimator: pick!(args.estimator, f.estimator),
            level: pick!(args.level, f.level),
            threads: pick!(args.threads, f.threads),
            out: pick!(args.out, f.out),
            ..f
        };
        if let Some(n) = file.threads {
            // Only the first call configures the pool; later calls within one process are no-ops.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(Self { file })
    }

    fn input(&self) -> Result<Dataset> {
        let path = self
            .file
            .input
            .as_deref()
            .ok_or_else(|| SieveError::InvalidConfig("--input is required".into()))?;
        load_dataset(path, self.file.marks.as_deref())
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.file.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn prior(&self) -> Result<PriorConfig> {
        let mut p = PriorConfig::default();
        if let Some(f) = &self.file.prior {
            p.family = f.parse::<PriorFamily>()?;
        }
        if let Some(df) = self.file.df {
            p.df = df;
        }
        if let Some(c0) = self.file.c0 {
            p.c0 = c0;
        }
        if let Some(g) = self.file.grid {
            p.grid_size = g;
        }
        Ok(p)
    }

    fn conditioning(&self) -> Result<ConditioningSpec> {
        match &self.file.conditioning {
            Some(s) => s.parse(),
            None => Ok(ConditioningSpec::default()),
        }
    }

    /// Threshold from `--bins`, `--q0`, or the detection limit at `--pod` (default 0.8).
    fn thresholds(&self, data: &Dataset) -> Result<(ThresholdSpec, Option<LodSpec>)> {
        if let Some(b) = &self.file.bins {
            return Ok((ThresholdSpec::from_interior(b)?, None));
        }
        if let Some(q0) = self.file.q0 {
            return Ok((ThresholdSpec::binary(q0)?, None));
        }
        let spec = select_q0(data, self.file.pod.unwrap_or(DEFAULT_POD))?;
        Ok((ThresholdSpec::binary(spec.q0)?, Some(spec)))
    }

    fn level(&self) -> Result<f64> {
        let l = self.file.level.unwrap_or(0.95);
        if !(l > 0.0 && l < 1.0) {
            return Err(SieveError::InvalidConfig(format!("level {l} outside (0, 1)")));
        }
        Ok(l)
    }

    fn pipeline(&self, data: &Dataset) -> Result<(PipelineConfig, Option<LodSpec>)> {
        let (thresholds, lod) = self.thresholds(data)?;
        let mut cfg = PipelineConfig::new(thresholds);
        cfg.prior = self.prior()?;
        cfg.conditioning = self.conditioning()?;
        if let Some(e) = &self.file.estimator {
            cfg.estimator = e.parse::<EstimatorKind>()?;
        }
        Ok((cfg, lod))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_priors(dir: &Path, priors: &PriorSet) -> Result<()> {
    write_prior_csv(priors, BufWriter::new(File::create(dir.join("prior.csv"))?))?;
    write_json(&dir.join("prior.json"), &priors.metadata())
}

/// Exit status: 0 clean, 2 completed with warnings, 1 failure.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(warnings) if warnings.is_empty() => 0,
        Ok(warnings) => {
            for w in dedup(&warnings) {
                eprintln!("warning: {w}");
            }
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dedup(warnings: &[Warning]) -> Vec<&Warning> {
    let mut out: Vec<&Warning> = Vec::new();
    for w in warnings {
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn dispatch(cli: Cli) -> Result<Vec<Warning>> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Screen(a) => cmd_screen(&a),
        Command::Threshold(a) => cmd_threshold(&a),
        Command::Classify(a) => cmd_classify(&a),
        Command::Deconvolve(a) => cmd_deconvolve(&a),
    }
}

#[derive(Debug, Serialize)]
struct TypeSummary<'a> {
    failure_type: usize,
    status: &'a str,
    message: Option<&'a str>,
    coefficients: Option<&'a [f64]>,
    covariate_names: &'a [String],
    ve: Option<f64>,
    model_se_beta: Option<f64>,
    score_norm: Option<f64>,
    iterations: Option<usize>,
    converged: Option<bool>,
    separated: Option<bool>,
    event_mass: f64,
}

#[derive(Debug, Serialize)]
struct NuisanceSummary {
    missingness_coefficients: Option<Vec<f64>>,
    epsilon: f64,
    floored: usize,
    degenerate: bool,
    separated: bool,
    outcome_coefficients: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize)]
struct FitDump<'a> {
    estimator: EstimatorKind,
    thresholds: &'a [f64],
    lod: Option<&'a LodSpec>,
    prior: &'a PriorConfig,
    conditioning: &'a ConditioningSpec,
    n_subjects: usize,
    n_endpoints: usize,
    n_sequenced_endpoints: usize,
    types: Vec<TypeSummary<'a>>,
    nuisance: Option<NuisanceSummary>,
    warnings: &'a [Warning],
}

fn fit_dump<'a>(
    data: &Dataset,
    cfg: &'a PipelineConfig,
    lod: Option<&'a LodSpec>,
    fit: &'a PipelineFit,
    names: &'a [String],
) -> FitDump<'a> {
    let types = fit
        .fit
        .types
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let mass: f64 = fit.weights.iter().map(|w| w[j]).sum();
            match t {
                Ok(f) => summary_ok(f, names),
                Err(e) => TypeSummary {
                    failure_type: j,
                    status: "failed",
                    message: Some(&e.message),
                    coefficients: None,
                    covariate_names: names,
                    ve: None,
                    model_se_beta: None,
                    score_norm: None,
                    iterations: None,
                    converged: None,
                    separated: None,
                    event_mass: mass,
                },
            }
        })
        .collect();
    let nuisance = fit.missingness.as_ref().map(|m| NuisanceSummary {
        missingness_coefficients: (!m.coef.is_empty()).then(|| m.coef.clone()),
        epsilon: m.epsilon,
        floored: m.floored,
        degenerate: m.degenerate,
        separated: m.separated,
        outcome_coefficients: fit.outcome.as_ref().map(|o| o.coef.clone()),
    });
    FitDump {
        estimator: cfg.estimator,
        thresholds: cfg.thresholds.cuts(),
        lod,
        prior: &cfg.prior,
        conditioning: &cfg.conditioning,
        n_subjects: data.len(),
        n_endpoints: data.n_events(),
        n_sequenced_endpoints: data.sequenced_endpoints().count(),
        types,
        nuisance,
        warnings: &fit.warnings,
    }
}

fn summary_ok<'a>(f: &'a TypeFit, names: &'a [String]) -> TypeSummary<'a> {
    TypeSummary {
        failure_type: f.failure_type,
        status: if f.separated { "separated" } else { "ok" },
        message: None,
        coefficients: Some(&f.theta),
        covariate_names: names,
        ve: Some(f.ve()),
        model_se_beta: Some(f.beta_se()),
        score_norm: Some(f.score_norm),
        iterations: Some(f.iterations),
        converged: Some(f.converged),
        separated: Some(f.separated),
        event_mass: f.event_mass,
    }
}

#[derive(Debug, Serialize)]
struct ReportDump<'a> {
    estimator: EstimatorKind,
    variance: &'a str,
    seed: Option<u64>,
    report: &'a InferenceReport,
}

fn cmd_fit(args: &CommonArgs) -> Result<Vec<Warning>> {
    let r = Resolved::new(args)?;
    let data = r.input()?;
    let (cfg, lod) = r.pipeline(&data)?;
    let level = r.level()?;
    let boot = r.file.boot.unwrap_or(DEFAULT_BOOT);
    let dir = r.out_dir()?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let mut names = vec!["arm".to_string()];
    names.extend(data.covariate_names.iter().cloned());
    let mut warnings = Vec::new();
    let (point, report, variance) = if boot == 0 {
        let point = pipeline.fit(&data, None)?;
        let beta = point.betas()?;
        let k = beta.len();
        let mut cov = vec![0.0; k * k];
        for j in 0..k {
            cov[j * k + j] = point.fit.get(j).map_or(f64::NAN, |f| f.covariance[0]);
        }
        let boot = crate::inference::BootstrapResult {
            requested: 0,
            failed: 0,
            replicates: vec![beta.clone(); 2],
            covariance: cov,
            dim: k,
            unstable: false,
        };
        let report = crate::inference::infer(&beta, &boot, level);
        (point, report, "model")
    } else {
        let seed = r
            .file
            .seed
            .ok_or_else(|| SieveError::InvalidConfig("--seed is required with --boot > 0".into()))?;
        let a = analyze(&data, &pipeline, boot, &RngFactory::new(seed), level)?;
        (a.point, a.report, "bootstrap")
    };
    warnings.extend(point.warnings.iter().cloned());
    warnings.extend(report.warnings.iter().cloned());
    if let Some(p) = &point.priors {
        write_priors(&dir, p)?;
    }
    write_classification_csv(
        &point.classification,
        BufWriter::new(File::create(dir.join("classification.csv"))?),
    )?;
    write_json(&dir.join("fit.json"), &fit_dump(&data, &cfg, lod.as_ref(), &point, &names))?;
    write_json(
        &dir.join("report.json"),
        &ReportDump {
            estimator: cfg.estimator,
            variance,
            seed: if boot == 0 { None } else { r.file.seed },
            report: &report,
        },
    )?;
    Ok(warnings)
}

fn cmd_classify(args: &CommonArgs) -> Result<Vec<Warning>> {
    let r = Resolved::new(args)?;
    let data = r.input()?;
    let (cfg, _) = r.pipeline(&data)?;
    let dir = r.out_dir()?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let priors = pipeline.fit_priors(&data, None)?.expect("posterior labeling");
    let table = crate::classify::classify_dataset(&data, &priors, &cfg.thresholds)?;
    write_priors(&dir, &priors)?;
    write_classification_csv(&table, BufWriter::new(File::create(dir.join("classification.csv"))?))?;
    Ok(priors.warnings.clone())
}

fn cmd_deconvolve(args: &CommonArgs) -> Result<Vec<Warning>> {
    let r = Resolved::new(args)?;
    let data = r.input()?;
    let dir = r.out_dir()?;
    let priors = crate::deconvolve::fit_priors(&data, &r.conditioning()?, &r.prior()?)?;
    write_priors(&dir, &priors)?;
    Ok(priors.warnings.clone())
}

fn cmd_threshold(args: &CommonArgs) -> Result<Vec<Warning>> {
    let r = Resolved::new(args)?;
    let data = r.input()?;
    let dir = r.out_dir()?;
    let spec = select_q0(&data, r.file.pod.unwrap_or(DEFAULT_POD))?;
    write_json(&dir.join("lod.json"), &spec)?;
    Ok(Vec::new())
}

fn cmd_screen(args: &ScreenArgs) -> Result<Vec<Warning>> {
    let r = Resolved::new(&args.common)?;
    let f = &r.file;
    let data = r.input()?;
    let dir = r.out_dir()?;
    let marks = match pick!(args.mark_table, f.mark_table) {
        Some(p) => read_mark_table(File::open(p)?, &data)?,
        None => vec![MarkData::from_dataset("mark", &data)],
    };
    let q0 = match (f.bins.as_ref(), f.q0) {
        (Some(_), _) => {
            return Err(SieveError::InvalidConfig(
                "screening uses a single threshold; pass --q0 or --pod".into(),
            ))
        }
        (None, Some(q)) => q,
        (None, None) => {
            let spec = select_q0(&data, f.pod.unwrap_or(DEFAULT_POD))?;
            write_json(&dir.join("lod.json"), &spec)?;
            spec.q0
        }
    };
    let defaults = ScreenOptions::default();
    let opts = ScreenOptions {
        alpha: pick!(args.alpha, f.alpha).unwrap_or(defaults.alpha),
        reclass_frac: pick!(args.reclass_frac, f.reclass_frac).unwrap_or(defaults.reclass_frac),
        min_count: pick!(args.min_count, f.min_count),
    };
    let (rows, warnings) = screen_marks(&marks, q0, &opts)?;
    write_screen_csv(&rows, BufWriter::new(File::create(dir.join("screen.csv"))?))?;
    Ok(warnings)
}

fn cmd_simulate(args: &SimArgs) -> Result<Vec<Warning>> {
    let r = Resolved::new(&args.common)?;
    let f = &r.file;
    let study = pick!(args.study, f.study)
        .ok_or_else(|| SieveError::InvalidConfig("--study is required".into()))?;
    let setting = pick!(args.setting, f.setting)
        .ok_or_else(|| SieveError::InvalidConfig("--setting is required".into()))?
        .parse()?;
    let mut cfg = SimConfig::new(study, setting);
    cfg.seed = f
        .seed
        .ok_or_else(|| SieveError::InvalidConfig("--seed is required".into()))?;
    if let Some(n) = pick!(args.n, f.n) {
        cfg.n_per_arm = n;
    }
    if let Some(reps) = pick!(args.reps, f.reps) {
        cfg.reps = reps;
    }
    if let Some(b) = f.boot {
        cfg.n_boot = b;
    }
    if f.bins.is_some() || f.pod.is_some() {
        return Err(SieveError::InvalidConfig("simulate takes a single --q0".into()));
    }
    if let Some(q0) = f.q0 {
        cfg.q0 = q0;
    }
    cfg.level = r.level()?;
    cfg.prior = r.prior()?;
    cfg.validate()?;
    let dir = r.out_dir()?;
    let (metrics, rows) = run_study(&cfg)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_replicate_csv(&rows, BufWriter::new(File::create(dir.join("replicates.csv"))?))?;
    let failed: usize = metrics.estimators.values().map(|e| e.failed).sum();
    Ok(if failed > 0 {
        vec![Warning::BootstrapUnstable {
            failed,
            total: rows.len(),
        }]
    } else {
        Vec::new()
    })
}

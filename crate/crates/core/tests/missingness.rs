use multiseq_sieve::data::{Arm, Dataset, SeqCounts, SubjectRecord, ThresholdSpec};
use multiseq_sieve::missingness::{
    aipw_weights, fit_missingness, ipw_weights, MissingnessModel, NuisanceDesign,
    OutcomeRegression,
};
use multiseq_sieve::pipeline::{EstimatorKind, Pipeline, PipelineConfig};
use multiseq_sieve::simulate::{gen_replicate, MissingGen, Setting, SimConfig};
use multiseq_sieve::{SieveError, Warning};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data_with_r(n: usize, seq: impl Fn(usize, &mut ChaCha8Rng) -> bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let records = (0..n)
        .map(|i| {
            let sequenced = seq(i, &mut rng);
            SubjectRecord {
                id: format!("s{i}"),
                arm: if i % 2 == 0 { Arm::Placebo } else { Arm::Vaccine },
                covariates: vec![f64::from(u8::from(rng.random::<bool>()))],
                stratum: 0,
                time: rng.random::<f64>() * 5.0,
                event: true,
                counts: sequenced.then_some(SeqCounts { k: (i % 7) as u32, m: 30 }),
                sequenced,
                auxiliary: vec![f64::from(u8::from(rng.random::<bool>()))],
            }
        })
        .collect();
    Dataset::new(records, vec!["x1".into()], vec!["a1".into()], vec!["1".into()]).unwrap()
}

#[test]
fn mcar_probability_recovered() {
    let data = data_with_r(2000, |_, rng| rng.random::<f64>() < 0.7);
    let (model, _) = fit_missingness(&data, NuisanceDesign::InterceptOnly, 0.01).unwrap();
    assert!(model.pi.iter().all(|p| (p - 0.7).abs() < 0.03));
    let (full, _) = fit_missingness(&data, NuisanceDesign::Full, 0.01).unwrap();
    assert!(full.pi.iter().all(|p| (0.01..=1.0).contains(p)));
}

#[test]
fn complete_sequencing_is_degenerate() {
    let data = data_with_r(50, |_, _| true);
    let (model, warnings) = fit_missingness(&data, NuisanceDesign::Full, 0.01).unwrap();
    assert!(model.degenerate && model.pi.iter().all(|&p| p == 1.0));
    assert!(warnings.contains(&Warning::DegenerateMissingness));
    let none = data_with_r(50, |_, _| false);
    assert!(matches!(
        fit_missingness(&none, NuisanceDesign::Full, 0.01),
        Err(SieveError::NoEndpointData)
    ));
}

#[test]
fn separated_missingness_is_flagged_and_floored() {
    let mut data = data_with_r(200, |i, _| i % 2 == 1);
    for r in &mut data.records {
        if r.arm == Arm::Placebo {
            r.counts = None;
            r.sequenced = false;
        }
    }
    let (model, warnings) = fit_missingness(&data, NuisanceDesign::Full, 0.01).unwrap();
    assert!(model.separated && model.floored > 0);
    assert!(warnings.contains(&Warning::MissingnessSeparation));
    assert!(model.pi.iter().all(|&p| p >= 0.01));
}

#[test]
fn ipw_weights_bounded_by_floor() {
    let data = data_with_r(40, |i, _| i % 3 != 0);
    let pi: Vec<f64> = (0..40).map(|i| if i == 1 { 0.001 } else { 0.5 }).collect();
    let model = MissingnessModel::from_probabilities(pi, 0.01);
    assert_eq!(model.floored, 1);
    let nu = vec![vec![0.3, 0.7]; 40];
    let w = ipw_weights(&nu, &data, &model);
    for (i, row) in w.iter().enumerate() {
        assert!(row.iter().all(|v| *v >= 0.0 && *v <= 100.0 + 1e-12));
        if !data.records[i].sequenced {
            assert_eq!(row, &vec![0.0, 0.0]);
        }
    }
    assert!((w[1][1] - 70.0).abs() < 1e-12);
}

#[test]
fn aipw_weights_reduce_to_nu_when_all_sequenced() {
    let data = data_with_r(30, |_, _| true);
    let model = MissingnessModel::from_probabilities(vec![1.0; 30], 0.01);
    let nu: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 30.0, 1.0 - i as f64 / 30.0]).collect();
    let m = OutcomeRegression::from_predictions(vec![vec![0.9, 0.1]; 30]);
    assert_eq!(aipw_weights(&nu, &data, &model, &m), nu);
}

fn sim_config() -> SimConfig {
    let mut cfg = SimConfig::new(1, Setting::C);
    cfg.n_per_arm = 400;
    cfg.seed = 99;
    cfg
}

#[test]
fn nuisance_estimators_reproduce_base_without_missingness() {
    let rep = gen_replicate(&sim_config(), 0).unwrap();
    let mut cfg = PipelineConfig::new(ThresholdSpec::binary(0.01).unwrap());
    let base = Pipeline::new(cfg.clone()).unwrap().fit(&rep.data, None).unwrap().betas().unwrap();
    for kind in [EstimatorKind::Ipw, EstimatorKind::Aipw] {
        cfg.estimator = kind;
        let b = Pipeline::new(cfg.clone()).unwrap().fit(&rep.data, None).unwrap().betas().unwrap();
        for (x, y) in b.iter().zip(&base) {
            assert!((x - y).abs() < 1e-10, "{kind}: {x} vs {y}");
        }
    }
}

#[test]
fn mcar_missingness_keeps_ipw_close_to_complete_data() {
    let mut cfg = sim_config();
    let mut pcfg = PipelineConfig::new(ThresholdSpec::binary(cfg.q0).unwrap());
    pcfg.prior.family = multiseq_sieve::deconvolve::PriorFamily::Beta;
    let complete = gen_replicate(&cfg, 3).unwrap();
    cfg.missing = Some(MissingGen::Mcar(0.7));
    let missing = gen_replicate(&cfg, 3).unwrap();
    assert_eq!(
        complete.data.records.iter().map(|r| r.time).collect::<Vec<_>>(),
        missing.data.records.iter().map(|r| r.time).collect::<Vec<_>>()
    );
    let full = Pipeline::new(pcfg.clone()).unwrap().fit(&complete.data, None).unwrap().betas().unwrap();
    pcfg.estimator = EstimatorKind::Ipw;
    let ipw = Pipeline::new(pcfg).unwrap().fit(&missing.data, None).unwrap().betas().unwrap();
    for (a, b) in full.iter().zip(&ipw) {
        assert!((a - b).abs() < 0.35, "{full:?} vs {ipw:?}");
    }
}

//! End-to-end acceptance checks, one PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use multiseq_sieve::classify::{bin_probs, posterior};
use multiseq_sieve::cox::{fit_competing, CoxData, CoxOptions};
use multiseq_sieve::data::{load_dataset, Arm, SeqCounts, ThresholdSpec};
use multiseq_sieve::deconvolve::{
    beta_grid_mass, spline_marginal_loglik, BetaPrior, CellLikelihood, MixingPrior, PriorFit,
    SplineBasis, SupportGrid,
};
use multiseq_sieve::design::{lod, screen_mark, MarkData, ScreenOptions};
use multiseq_sieve::missingness::{
    aipw_weights, fit_missingness, fit_outcome_regression, ipw_weights, NuisanceDesign,
    OutcomeRegression,
};
use multiseq_sieve::pipeline::{Pipeline, PipelineConfig};
use multiseq_sieve::rng::RngFactory;
use multiseq_sieve::simulate::{gen_replicate, run_study, MissingGen, Setting, SimConfig, StudyMetrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::beta::beta_reg;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

// Limits of detection, rows by depth, columns POD 0.60 / 0.80 / 0.95.
const LOD_TABLE: [(u32, [f64; 3]); 6] = [
    (5, [0.175, 0.275, 0.451]),
    (10, [0.095, 0.138, 0.259]),
    (50, [0.019, 0.032, 0.059]),
    (100, [0.010, 0.016, 0.030]),
    (500, [0.002, 0.003, 0.006]),
    (1000, [0.001, 0.002, 0.003]),
];

fn lod_table() -> Outcome {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    for (depth, row) in LOD_TABLE {
        for (pod, want) in [0.60, 0.80, 0.95].into_iter().zip(row) {
            let got = (lod(depth, pod).unwrap() * 1000.0).round() / 1000.0;
            if (got - want).abs() > 1e-9 {
                mismatches.push(format!("depth {depth} pod {pod}: {got:.3} vs {want:.3}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty() && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!("{} of 18 cells differ [{}]", mismatches.len(), mismatches.join("; ")),
    )
}

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

fn conjugacy() -> Outcome {
    let start = Instant::now();
    let grid = SupportGrid::default();
    let mut worst: f64 = 0.0;
    for (a, b) in [(1.0, 1.0), (2.0, 2.0), (0.5, 5.7), (3.0, 0.7)] {
        let prior = beta_prior(a, b, &grid);
        for cutoff in [0.01, 0.5, 0.99] {
            let spec = ThresholdSpec::binary(cutoff).unwrap();
            for m in 1..=10u32 {
                for k in 0..=m {
                    let post = posterior(&prior, &grid, SeqCounts { k, m }).unwrap();
                    let nu = bin_probs(&post, &grid, &spec)[1];
                    let want = 1.0 - beta_reg(a + f64::from(k), b + f64::from(m - k), cutoff);
                    worst = worst.max((nu - want).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-3 && elapsed < Duration::from_secs(10),
        format!("max abs error {worst:.2e}"),
    )
}

struct Instance {
    time: Vec<f64>,
    stratum: Vec<usize>,
    w: Vec<[f64; 2]>,
    status: Vec<u8>,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(12..=30);
    let mut inst = Instance {
        time: Vec::new(),
        stratum: Vec::new(),
        w: Vec::new(),
        status: Vec::new(),
    };
    for _ in 0..n {
        inst.w.push([f64::from(u8::from(rng.random::<bool>())), rng.random_range(-1.0..1.0)]);
        inst.time.push((rng.random::<f64>() * 20.0).round() / 10.0 + 0.1);
        inst.stratum.push(rng.random_range(0..2));
        inst.status.push(rng.random_range(0..3));
    }
    inst
}

/// Log partial likelihood and derivatives for cause `j`, summed over explicit risk sets.
fn direct(inst: &Instance, j: u8, th: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let n = inst.time.len();
    let lin = |l: usize| th[0] * inst.w[l][0] + th[1] * inst.w[l][1];
    let mut ll = 0.0;
    let mut g = [0.0; 2];
    let mut h = [[0.0; 2]; 2];
    for i in (0..n).filter(|&i| inst.status[i] == j) {
        let (mut s0, mut s1, mut s2) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
        for l in (0..n).filter(|&l| inst.stratum[l] == inst.stratum[i] && inst.time[l] >= inst.time[i]) {
            let e = lin(l).exp();
            s0 += e;
            for a in 0..2 {
                s1[a] += e * inst.w[l][a];
                for b in 0..2 {
                    s2[a][b] += e * inst.w[l][a] * inst.w[l][b];
                }
            }
        }
        ll += lin(i) - s0.ln();
        for a in 0..2 {
            g[a] += inst.w[i][a] - s1[a] / s0;
            for b in 0..2 {
                h[a][b] -= s2[a][b] / s0 - s1[a] * s1[b] / (s0 * s0);
            }
        }
    }
    (ll, g, h)
}

fn direct_fit(inst: &Instance, j: u8) -> Option<[f64; 2]> {
    let mut th = [0.0; 2];
    for _ in 0..200 {
        let (ll, g, h) = direct(inst, j, th);
        if g[0].abs().max(g[1].abs()) < 1e-11 {
            return Some(th);
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if det.abs() < 1e-12 {
            return None;
        }
        let step = [
            (h[1][1] * g[0] - h[0][1] * g[1]) / det,
            (h[0][0] * g[1] - h[1][0] * g[0]) / det,
        ];
        let mut t = 1.0;
        loop {
            let cand = [th[0] - t * step[0], th[1] - t * step[1]];
            if direct(inst, j, cand).0 >= ll - 1e-12 || t < 1e-8 {
                th = cand;
                break;
            }
            t *= 0.5;
        }
        if th[0].abs().max(th[1].abs()) > 15.0 {
            return None;
        }
    }
    None
}

fn cox_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 25 {
        let inst = instance(&mut rng);
        let Some(want) = (1..=2).map(|j| direct_fit(&inst, j)).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let design = inst.w.iter().flat_map(|w| w.iter().copied()).collect();
        let data = CoxData::new(inst.time.clone(), inst.stratum.clone(), design, 2).unwrap();
        let weights: Vec<Vec<f64>> = inst
            .status
            .iter()
            .map(|&s| vec![f64::from(u8::from(s == 1)), f64::from(u8::from(s == 2))])
            .collect();
        let fit = fit_competing(&data, &weights, &CoxOptions::default());
        for (j, w) in want.iter().enumerate() {
            let Some(got) = fit.get(j) else {
                return outcome(false, format!("instance {checked}: type {j} fit failed"));
            };
            for a in 0..2 {
                worst = worst.max((got.theta[a] - w[a]).abs());
            }
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-6 && elapsed < Duration::from_secs(30),
        format!("25 instances, max coefficient difference {worst:.2e}"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let grid = SupportGrid::default();
    let df = 6;
    let basis = SplineBasis::new(grid.points(), df).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let obs: Vec<SeqCounts> = (0..60)
            .map(|_| {
                let m = rng.random_range(1..80);
                SeqCounts { k: rng.random_range(0..=m), m }
            })
            .collect();
        let lik = CellLikelihood::new(&grid, &obs);
        let gamma: Vec<f64> = (0..df).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c0 = rng.random_range(0.1..5.0);
        let mut grad = vec![0.0; df];
        spline_marginal_loglik(&gamma, &basis, &lik, c0, &mut grad);
        let h = 1e-5;
        let mut scratch = vec![0.0; df];
        for i in 0..df {
            let (mut up, mut dn) = (gamma.clone(), gamma.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (spline_marginal_loglik(&up, &basis, &lik, c0, &mut scratch)
                - spline_marginal_loglik(&dn, &basis, &lik, c0, &mut scratch))
                / (2.0 * h);
            worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(1.0));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("20 draws, max relative error {worst:.2e}"),
    )
}

fn study(number: u8, setting: Setting, seed: u64, uncorrected: bool) -> StudyMetrics {
    let mut cfg = SimConfig::new(number, setting);
    cfg.n_per_arm = 1000;
    cfg.reps = 200;
    cfg.n_boot = 150;
    cfg.seed = seed;
    cfg.run_uncorrected = uncorrected;
    run_study(&cfg).expect("study runs").0
}

fn rates(m: &StudyMetrics) -> (f64, f64) {
    (
        m.estimators["corrected"].sieve_rejection,
        m.estimators["uncorrected"].sieve_rejection,
    )
}

fn completed(m: &StudyMetrics) -> String {
    m.estimators
        .iter()
        .map(|(k, e)| format!("{k} {}/{}", e.completed, e.completed + e.failed))
        .collect::<Vec<_>>()
        .join(", ")
}

fn study_1c() -> Outcome {
    let m = study(1, Setting::C, 5101, true);
    let (c, u) = rates(&m);
    let pass = (0.45..=0.70).contains(&c) && (0.45..=0.70).contains(&u) && (c - u).abs() <= 0.08;
    outcome(pass, format!("power corrected {c:.3}, uncorrected {u:.3} ({})", completed(&m)))
}

fn study_3c() -> Outcome {
    let m = study(3, Setting::C, 5303, true);
    let (c, u) = rates(&m);
    let pass = (0.58..=0.84).contains(&c) && u < 0.15 && c - u > 0.40;
    outcome(pass, format!("power corrected {c:.3}, uncorrected {u:.3} ({})", completed(&m)))
}

fn study_3a() -> Outcome {
    let m = study(3, Setting::A, 5301, true);
    let (c, u) = rates(&m);
    let pass = u > 0.20 && c < 0.12;
    outcome(pass, format!("type-I corrected {c:.3}, uncorrected {u:.3} ({})", completed(&m)))
}

fn study_2b() -> Outcome {
    let m = study(2, Setting::B, 5202, false);
    let cov: Vec<f64> = m.estimators["corrected"].types.iter().map(|t| t.coverage).collect();
    let pass = cov.iter().all(|c| (0.90..=0.98).contains(c));
    outcome(
        pass,
        format!("coverage VE_0 {:.3}, VE_1 {:.3} ({})", cov[0], cov[1], completed(&m)),
    )
}

fn double_robustness() -> Outcome {
    let mut cfg = SimConfig::new(1, Setting::C);
    cfg.seed = 2025;
    cfg.missing = Some(MissingGen::Logistic {
        intercept: 2.0,
        z_coef: -1.5,
        a_coef: -1.5,
    });
    let truth = Setting::C.true_ve()[1];
    let reps = 200;
    let noise = RngFactory::new(cfg.seed);
    let mut sums = [0.0; 3];
    let mut used = 0;
    for r in 0..reps {
        let rep = gen_replicate(&cfg, r).unwrap();
        let data = &rep.data;
        let base = match Pipeline::new(PipelineConfig::new(ThresholdSpec::binary(cfg.q0).unwrap()))
            .unwrap()
            .fit(data, None)
        {
            Ok(b) => b,
            Err(_) => continue,
        };
        let nu = base.classification.weight_matrix(data.len());
        let cox = CoxData::from_dataset(data).unwrap();
        let ve1 = |w: &Vec<Vec<f64>>| {
            fit_competing(&cox, w, &CoxOptions::default())
                .get(1)
                .map(|f| 1.0 - f.beta().exp())
        };
        let (pi_ok, _) = fit_missingness(data, NuisanceDesign::Full, 0.01).unwrap();
        let (pi_bad, _) = fit_missingness(data, NuisanceDesign::InterceptOnly, 0.01).unwrap();
        let m_ok = fit_outcome_regression(data, &base.classification, NuisanceDesign::Full).unwrap();
        // Corrupted outcome model: independent uniform class probabilities.
        let mut rng = noise.stream(99, r as u64);
        let m_bad = OutcomeRegression::from_predictions(
            data.records
                .iter()
                .map(|rec| {
                    if rec.event {
                        let u: f64 = rng.random();
                        vec![u, 1.0 - u]
                    } else {
                        vec![0.0, 0.0]
                    }
                })
                .collect(),
        );
        let est = [
            ve1(&aipw_weights(&nu, data, &pi_ok, &m_bad)),
            ve1(&aipw_weights(&nu, data, &pi_bad, &m_ok)),
            ve1(&ipw_weights(&nu, data, &pi_bad)),
        ];
        if let [Some(a), Some(b), Some(c)] = est {
            sums[0] += a;
            sums[1] += b;
            sums[2] += c;
            used += 1;
        }
    }
    let bias: Vec<f64> = sums.iter().map(|s| s / used as f64 - truth).collect();
    let pass = used > 0 && bias[0].abs() < 0.05 && bias[1].abs() < 0.05 && bias[2].abs() > 0.05;
    outcome(
        pass,
        format!(
            "bias VE_1: AIPW(pi ok, m bad) {:+.3}, AIPW(pi bad, m ok) {:+.3}, IPW(pi bad) {:+.3} over {used}/{reps}",
            bias[0], bias[1], bias[2]
        ),
    )
}

fn cli_binary() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.parent()?;
    let bin = dir.join(format!("multiseq-sieve{}", std::env::consts::EXE_SUFFIX));
    bin.exists().then_some(bin)
}

fn run_twice(bin: &Path, args: &[&str]) -> Result<(), String> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let status = Command::new(bin)
            .args(args)
            .arg("--out")
            .arg(d.path())
            .status()
            .map_err(|e| e.to_string())?;
        if !matches!(status.code(), Some(0 | 2)) {
            return Err(format!("{} exited with {status}", args[0]));
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(format!("{} wrote nothing", args[0]));
    }
    for name in &names {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{} output {name:?} differs", args[0]));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let Some(bin) = cli_binary() else {
        return outcome(false, "multiseq-sieve binary not found next to the test executable");
    };
    let input = core_fixture("table1.csv");
    let fit = ["fit", "--input", input.to_str().unwrap(), "--q0", "0.1", "--boot", "100", "--seed", "17"];
    let sim = [
        "simulate", "--study", "2", "--setting", "b", "--n", "300", "--reps", "3", "--boot", "50", "--seed", "17",
    ];
    match run_twice(&bin, &fit).and_then(|_| run_twice(&bin, &sim)) {
        Ok(()) => outcome(true, "fit and simulate outputs byte-identical across runs"),
        Err(e) => outcome(false, e),
    }
}

fn screening() -> Outcome {
    let data = load_dataset(&core_fixture("table1.csv"), None).unwrap();
    let q0 = 0.01;
    let flips = |arm: Arm| {
        data.sequenced_endpoints()
            .filter(|(_, r)| r.arm == arm)
            .filter(|(_, r)| r.counts.unwrap().k > 0)
            .count()
    };
    let (row, _) = screen_mark(&MarkData::from_dataset("mark", &data), q0, &ScreenOptions::default()).unwrap();
    let pass = (row.reclass_frac - 0.5).abs() < 1e-12 && flips(Arm::Vaccine) == 5 && flips(Arm::Placebo) == 0;
    outcome(
        pass,
        format!(
            "reclassification fraction {:.3}; flipped vaccine {}, placebo {}",
            row.reclass_frac,
            flips(Arm::Vaccine),
            flips(Arm::Placebo)
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("LOD table", lod_table),
        ("Beta conjugacy", conjugacy),
        ("Cox direct-summation oracle", cox_oracle),
        ("spline gradient", gradient_check),
        ("power, study 1(c)", study_1c),
        ("power, study 3(c)", study_3c),
        ("type-I error, study 3(a)", study_3a),
        ("coverage, study 2(b)", study_2b),
        ("double robustness", double_robustness),
        ("determinism", determinism),
        ("screening toy table", screening),
    ];
    // Numeric arguments select a subset of criteria; other harness flags are ignored.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = check();
        let tag = if out.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!out.pass);
        println!(
            "criterion {:>2} {tag}: {name}: {} [{:.1}s]",
            i + 1,
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

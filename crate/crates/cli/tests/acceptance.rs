//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hel_core::dgp::*;
use hel_core::did::*;
use hel_core::housemodel::*;
use hel_core::infer::{vcov, Kernel, SmallSample, VariancePlan};
use hel_core::montecarlo::{run_did, run_synth, summarize_did, summarize_synth};
use hel_core::panel::{FeDim, Observation, PanelDataset, Treatment};
use hel_core::regress::{build_design, fit_wls, DesignSpec, Factor, RegressionFit, Term};
use hel_core::synth::{default_grid, fit_synth, SynthProblem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one sub-check: pass flag and a short measurement.
type Check = (bool, String);

fn within(label: &str, got: f64, tol: f64) -> Check {
    (got <= tol, format!("{label} {got:.3e} (≤ {tol:e})"))
}

fn criterion(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Vec<Check>) -> bool {
    let t = Instant::now();
    let checks = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        vec![(false, format!("panic: {msg}"))]
    });
    let el = t.elapsed();
    let mut ok = checks.iter().all(|c| c.0);
    let mut detail: Vec<String> = checks.iter().map(|(p, s)| if *p { s.clone() } else { format!("✗ {s}") }).collect();
    match budget {
        Some(b) => {
            let in_time = el < b;
            ok &= in_time;
            detail.push(format!("{}{:.2} s (< {} s)", if in_time { "" } else { "✗ " }, el.as_secs_f64(), b.as_secs()));
        }
        None => detail.push(format!("{:.2} s", el.as_secs_f64())),
    }
    println!("{} [{id}] {name}: {}", if ok { "PASS" } else { "FAIL" }, detail.join("; "));
    ok
}

fn spec(absorb: Vec<FeDim>) -> DesignSpec {
    DesignSpec::new(
        "outcome",
        vec![
            Term::product("treated_post", vec![Factor::Treated, Factor::Post]),
            Term::column("x1"),
            Term::column("x2"),
        ],
        absorb,
    )
    .unwrap()
}

fn fit_of(ds: PanelDataset) -> RegressionFit {
    fit_wls(&Arc::new(ds), &spec(vec![FeDim::Unit, FeDim::Year])).unwrap()
}

fn clustered(effect: EffectSpec, seed: u64) -> DgpConfig {
    DgpConfig::new(
        effect,
        ErrorSpec::Clustered { sigma_u: 0.01, sigma_cluster: 0.03, dim: ClusterLevel::Unit, rho: 0.7 },
        seed,
    )
}

fn oracle_equivalence() -> Vec<Check> {
    let dims: [&[FeDim]; 3] =
        [&[FeDim::Unit, FeDim::Year], &[FeDim::Unit, FeDim::Year, FeDim::State], &[FeDim::Year, FeDim::County]];
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..30u64 {
        let ds = common::random_panel(1000 + seed, 200);
        assert!(ds.len() <= 200);
        let sp = spec(dims[seed as usize % dims.len()].to_vec());
        let raw = build_design(&ds, &sp).unwrap();
        let oracle = common::dummy_ols(&raw.columns, &raw.response, &raw.weights, &ds, &sp.absorb);
        let fit = fit_wls(&Arc::new(ds), &sp).unwrap();
        for (b, o) in fit.coefficients.iter().zip(&oracle) {
            worst = worst.max((b - o).abs());
        }
        n += 1;
    }
    vec![(n >= 20, format!("{n} panels")), within("max |Δβ|", worst, 1e-8)]
}

fn did_recovery() -> Vec<Check> {
    let cfg = clustered(EffectSpec::Constant { tau: 0.0413 }, 11);
    let plans = [VariancePlan::cluster(FeDim::Unit)];
    let reps = run_did(&cfg, &DidSpec::new(DidMode::Static), &plans, 200).unwrap();
    let s = summarize_did("static", &reps, &plans);
    let row = s.row("Texas × Post", "cluster_unit").unwrap();
    let cov = row.coverage.unwrap();
    vec![
        within("|bias|", row.bias.abs(), 0.002),
        ((0.92..=0.98).contains(&cov), format!("coverage {cov:.3} ∈ [0.92, 0.98]")),
    ]
}

fn event_study_contract() -> Vec<Check> {
    let cfg = clustered(EffectSpec::Constant { tau: 0.0 }, 12);
    let plans = [VariancePlan::cluster(FeDim::Unit)];
    let spec = DidSpec::new(DidMode::Dynamic);
    let ds = Arc::new(generate(&cfg).unwrap().0);
    let r = estimate(&ds, &spec, &plans).unwrap();
    let absent = r.term(&treated_year_name(&ds, 1997)).is_none() && r.event_study_rows().iter().all(|row| row.0 != 1997);
    let reps = run_did(&cfg, &spec, &plans, 200).unwrap();
    let rej = summarize_did("dynamic", &reps, &plans).pretrend_rejection.unwrap();
    vec![(absent, "1997 absent".into()), (rej <= 0.10, format!("pre-trend rejection {rej:.3} (≤ 0.10)"))]
}

fn triple_recovery() -> Vec<Check> {
    let cfg = clustered(
        EffectSpec::Heterogeneous { beta_0: 0.063, beta_h: -0.009, h: HDistribution::Uniform { lo: 0.0, hi: 3.0 } },
        14,
    );
    let plans = [VariancePlan::cluster(FeDim::Unit)];
    let spec = DidSpec::new(DidMode::Triple).with_heterogeneity("h", false);
    let reps = run_did(&cfg, &spec, &plans, 200).unwrap();
    let s = summarize_did("triple", &reps, &plans);
    let mut out: Vec<Check> = s
        .rows
        .iter()
        .map(|row| {
            let z = row.bias.abs() / row.mc_se;
            (z <= 2.0, format!("{} |bias|/MC SE {z:.2}", row.term))
        })
        .collect();
    out.push((s.rows.len() == 2, format!("{} effect terms", s.rows.len())));
    let ate = ate_line(0.063, -0.009, 7.0 / 6.0);
    out.push(((ate - 0.0525).abs() < 1e-15, format!("ATE(7/6) = {ate}")));
    out
}

/// Direct score-outer-product oracle for one-way clustering.
fn brute_cluster_vcov(fit: &RegressionFit, dim: FeDim) -> DMatrix<f64> {
    let k = fit.names.len();
    let n = fit.n_obs();
    let codes = fit.data.fe_codes(dim).unwrap();
    let mut meat = DMatrix::zeros(k, k);
    for g in 0..codes.n_levels {
        let mut s = vec![0.0; k];
        for i in (0..n).filter(|&i| codes.codes[i] == g) {
            for (c, sc) in s.iter_mut().enumerate() {
                *sc += fit.weights[i] * fit.residuals[i] * fit.demeaned_design[(i, c)];
            }
        }
        for a in 0..k {
            for b in 0..k {
                meat[(a, b)] += s[a] * s[b];
            }
        }
    }
    let g = codes.n_levels as f64;
    let corr = g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - k as f64);
    &fit.weighted_xtx_inv * meat * &fit.weighted_xtx_inv * corr
}

fn obs(unit: String, state: &str, year: i32, outcome: f64, weight: f64, covariates: Vec<f64>) -> Observation {
    Observation {
        county: unit.clone(),
        unit,
        state: state.into(),
        msa: None,
        year,
        outcome,
        weight,
        lat: None,
        lon: None,
        covariates,
        stack_tag: None,
    }
}

fn variance_estimators() -> Vec<Check> {
    let max_diff = |a: &DVector<f64>, b: &DVector<f64>| (a - b).abs().max();

    let fit = fit_of(common::random_panel(8, 150));
    let hc = vcov(&fit, &VariancePlan::hc()).unwrap();
    let mut spatial = 0.0f64;
    for kernel in [Kernel::Uniform, Kernel::Bartlett] {
        spatial = spatial.max(max_diff(&hc.se, &vcov(&fit, &VariancePlan::spatial(0.0, kernel)).unwrap().se));
    }

    let base = common::random_panel(3, 120);
    let rows: Vec<Observation> = base
        .observations()
        .iter()
        .enumerate()
        .map(|(i, o)| Observation { county: format!("k{i}"), ..o.clone() })
        .collect();
    let fit = fit_of(PanelDataset::new(rows, base.covariate_names().to_vec(), base.treatment().clone()).unwrap());
    let hc = vcov(&fit, &VariancePlan::hc()).unwrap();
    let cl = vcov(&fit, &VariancePlan::cluster(FeDim::County).with_small_sample(SmallSample::None)).unwrap();
    let singleton = if cl.n_clusters[0].1 == fit.n_obs() { max_diff(&hc.se, &cl.se) } else { f64::INFINITY };

    // residual signs alternate across a 2×2 state×year grid: both one-way
    // meats vanish, the intersection meat does not
    let cells = [("TX", 1997, 1.0), ("TX", 1998, -1.0), ("OK", 1997, -1.0), ("OK", 1998, 1.0)];
    let rows = cells.iter().enumerate().map(|(i, (s, y, v))| obs(format!("u{i}"), s, *y, *v, 1.0, vec![])).collect();
    let ds = Arc::new(PanelDataset::new(rows, vec![], Treatment { state: "TX".into(), year: 1998 }).unwrap());
    let fit = fit_wls(&ds, &DesignSpec::new("outcome", vec![Term::intercept()], vec![]).unwrap()).unwrap();
    let tw = vcov(&fit, &VariancePlan::two_way(FeDim::State, FeDim::Year)).unwrap();

    let mut rows = Vec::new();
    for u in 0..10 {
        for t in 0..3 {
            let v = ((u * 13 + t * 7) % 11) as f64;
            rows.push(obs(
                format!("u{u}"),
                ["S0", "S1", "S2"][u % 3],
                2000 + t as i32,
                v * 0.3 + (u as f64).sin(),
                1.0 + (u % 4) as f64 * 0.5,
                vec![(v * 1.7).cos(), ((u + t) % 5) as f64],
            ));
        }
    }
    let ds = PanelDataset::new(rows, vec!["x1".into(), "x2".into()], Treatment { state: "S0".into(), year: 2001 }).unwrap();
    let fit = fit_of(ds);
    let got = vcov(&fit, &VariancePlan::cluster(FeDim::State)).unwrap();
    let brute = if got.n_clusters[0].1 == 3 { (&got.vcov - brute_cluster_vcov(&fit, FeDim::State)).abs().max() } else { f64::INFINITY };

    vec![
        within("spatial(0) vs HC", spatial, 1e-10),
        within("singleton clusters vs HC", singleton, 1e-10),
        (tw.psd_adjusted && tw.vcov[(0, 0)] >= 0.0, format!("two-way PSD repair fired: {}", tw.psd_adjusted)),
        within("3-cluster vs brute force", brute, 1e-10),
    ]
}

fn synth_problem(y: &[f64], x: &DMatrix<f64>, n_post: usize) -> SynthProblem {
    let tp = y.len() - n_post;
    let k = x.ncols();
    SynthProblem::new(
        "z",
        DVector::from_column_slice(&y[..tp]),
        DVector::from_column_slice(&y[tp..]),
        x.rows(0, tp).into_owned(),
        x.rows(tp, n_post).into_owned(),
        (0..k).map(|j| format!("c{j}")).collect(),
        k,
        (0..tp as i32).map(|t| 1990 + t).collect(),
        (tp as i32..y.len() as i32).map(|t| 1990 + t).collect(),
    )
    .unwrap()
}

fn synthetic_control() -> Vec<Check> {
    let mut cfg = SynthDgpConfig::new(0.0, 21);
    cfg.n_controls = 3;
    cfg.n_treated = 1;
    cfg.treated_noise = 0.0;
    let (data, truth) = generate_synth_panel(&cfg).unwrap();
    let fit = fit_synth(&data.problem(0).unwrap(), 1e-8, 0.5).unwrap();
    let mut want = [0.0; 3];
    for &(j, w) in &truth.weights[0] {
        want[j] = w;
    }
    let span = (0..3).map(|j| (fit.omega[j] - want[j]).abs()).fold((fit.mu - truth.intercepts[0]).abs(), f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = DMatrix::from_fn(10, 2, |_, _| rng.random_range(-1.0..1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<f64> = (0..10).map(|t| 0.2 + 0.7 * x[(t, 0)] - 0.3 * x[(t, 1)] + 0.1 * rng.random_range(-1.0..1.0)).collect();
    let lambda = 0.5;
    let fit = fit_synth(&synth_problem(&y, &x, 2), lambda, 0.0).unwrap();
    let xp = x.rows(0, 8).into_owned();
    let xm = xp.row_mean();
    let ym = y[..8].iter().sum::<f64>() / 8.0;
    let xc = DMatrix::from_fn(8, 2, |i, j| xp[(i, j)] - xm[j]);
    let yc = DVector::from_fn(8, |i, _| y[i] - ym);
    let w = (xc.transpose() * &xc + DMatrix::identity(2, 2) * lambda).try_inverse().unwrap() * xc.transpose() * yc;
    let ridge = (0..2)
        .map(|j| (fit.omega[j] - w[j]).abs())
        .fold((fit.mu - (ym - xm[0] * w[0] - xm[1] * w[1])).abs(), f64::max);

    let reps = run_synth(&SynthDgpConfig::new(0.0458, 24), &default_grid(), 100).unwrap();
    let s = summarize_synth(&reps, 0.0458);
    let mut out = vec![within("affine span", span, 1e-6), within("ridge closed form", ridge, 1e-8)];
    for row in &s.rows {
        let z = row.bias.abs() / row.mc_se;
        out.push((z <= 2.0, format!("{} mean {:.4}, |bias|/MC SE {z:.2}", row.term, row.mean)));
    }
    out
}

fn binding_instance() -> ThreePeriodInput {
    ThreePeriodInput {
        beta: 0.9,
        phi: 0.3,
        y: [1.0, 0.2, 3.0],
        p: [1.0, 1.0, 1.0],
        gross_rate: 1.05,
        kappa_pm: 0.3,
        kappa_hel: 0.8,
    }
}

fn model_module() -> Vec<Check> {
    let falling = [1.0, 0.9, 0.8];
    let cases = [
        ThreePeriodInput { y: [3.0, 1.0, 0.3], p: falling, kappa_pm: 0.8, ..binding_instance() },
        ThreePeriodInput { y: [0.5, 2.0, 0.5], p: falling, kappa_pm: 0.8, ..binding_instance() },
        ThreePeriodInput { kappa_pm: 0.8, ..binding_instance() },
        binding_instance(),
        ThreePeriodInput { y: [1.0, 1.0, 1.0], kappa_hel: 0.0, ..binding_instance() },
        ThreePeriodInput { y: [0.5, 0.5, 3.0], kappa_pm: 0.0, kappa_hel: 0.0, ..binding_instance() },
    ];
    let (mut kkt, mut grid, mut zero_ok) = (0.0f64, 0.0f64, true);
    for input in &cases {
        let s = solve_three_period(input).unwrap();
        for g in three_period_lagrangian_gradient_fd(input, &s, 1e-5) {
            kkt = kkt.max(g.abs());
        }
        let (s0, s1) = input.slacks(s.b0_pm, s.b1_hel, s.h);
        let feasible = s.mu0 >= -1e-12 && s.mu1 >= -1e-12 && (s.mu0 * s0).abs() <= 1e-10 && (s.mu1 * s1).abs() <= 1e-10;
        if !feasible {
            kkt = f64::INFINITY;
        }
        let (b0, b1, h) = grid_search_three_period(input, 1e-3).unwrap();
        grid = grid.max((b0 - s.b0_pm).abs()).max((b1 - s.b1_hel).abs()).max((h - s.h).abs());
        if input.kappa_hel == 0.0 || s.mu1 == 0.0 {
            zero_ok &= s.hel_csf(input) == 0.0;
        }
        if input.kappa_pm == 0.0 || s.mu0 == 0.0 {
            zero_ok &= s.purchase_csf(input) == 0.0;
        }
    }
    for v in [0.5, 1.0, 3.0] {
        zero_ok &= csf_decompose(v, 0.0, 0.8, 10.0).unwrap() == 0.0;
        zero_ok &= csf_decompose(v, 0.05, 0.0, 10.0).unwrap() == 0.0;
    }

    let (m, s, csf, delta) = (0.95, 0.6, 0.2, 0.02);
    let closed = (s + csf) * m / (1.0 - m * (1.0 - delta));
    let mut decomp_ok = true;
    let mut worst_ratio = 0.0f64;
    for h in [1, 5, 40] {
        let d = price_decomposition(&vec![s; h], &vec![csf; h], &vec![m; h], delta, h, StationaryTail { m, rent: s, csf })
            .unwrap();
        let gap = (closed - d.price()).abs();
        decomp_ok &= gap <= d.truncation_bound + 1e-12;
        worst_ratio = worst_ratio.max(gap / d.truncation_bound);
    }

    let p = HouseholdParams { delta: 0.0, ..HouseholdParams::new(0.96, 0.02, 0.8, 0.05) };
    let x = TimingInputs { c: [1.0, 1.0], h_next: 2.0, mu: [0.0, 0.0], kappa: [0.8, 0.8], p: [4.0; 3], delta_next: 0.0 };
    let r: Vec<f64> = ConstraintTiming::ALL.iter().map(|t| timing_foc_residual(&p, *t, &x).unwrap()).collect();
    let spread = r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);

    vec![
        within(&format!("KKT gradient over {} solutions", cases.len()), kkt, 1e-6),
        within("grid gap", grid, 2e-3),
        (zero_ok, "κ = 0 and μ = 0 give CSF = 0".into()),
        (decomp_ok, format!("closed-form gap / truncation bound ≤ {worst_ratio:.3}")),
        within(&format!("{} timing variants spread", r.len()), spread, 1e-8),
    ]
}

fn specs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn hel(spec: &Path, out: &Path, threads: usize) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_hel"))
        .arg("--spec")
        .arg(spec)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{}: {}", spec.display(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> Vec<Check> {
    let tmp = tempfile::tempdir().unwrap();
    let mut specs: Vec<PathBuf> = fs::read_dir(specs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    specs.sort();
    // a shortened copy keeps the synthetic-control Monte Carlo quick
    let short = tmp.path().join("montecarlo_synth_short.toml");
    let text = fs::read_to_string(specs_dir().join("montecarlo_synth.toml")).unwrap().replace("reps = 100", "reps = 16");
    fs::write(&short, text).unwrap();
    specs.retain(|p| !p.ends_with("montecarlo_synth.toml"));
    specs.push(short);

    let mut out = Vec::new();
    let mut identical = 0;
    for sp in &specs {
        let stem = sp.file_stem().unwrap().to_string_lossy().into_owned();
        let (a, b) = (tmp.path().join(format!("{stem}.a")), tmp.path().join(format!("{stem}.b")));
        // Monte Carlo specs alternate thread counts; the rest rerun as-is.
        let threads = if stem.starts_with("montecarlo") { (1, 8) } else { (4, 4) };
        if let Err(e) = hel(sp, &a, threads.0).and_then(|_| hel(sp, &b, threads.1)) {
            out.push((false, e));
            continue;
        }
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        if !sa.is_empty() && sa == sb {
            identical += 1;
        } else {
            out.push((false, format!("{stem}: outputs differ")));
        }
        if stem.starts_with("montecarlo") {
            let same = fs::read(a.join("summary.csv")).ok() == fs::read(b.join("summary.csv")).ok();
            out.push((same, format!("{stem} summary.csv identical at 1 and 8 threads")));
        }
    }
    out.insert(0, (identical == specs.len(), format!("{identical}/{} specs byte-identical on rerun", specs.len())));
    out
}

fn main() -> ExitCode {
    let s = Duration::from_secs;
    let results = [
        criterion(1, "FE oracle equivalence", Some(s(10)), oracle_equivalence),
        criterion(2, "DID recovery", Some(s(60)), did_recovery),
        criterion(3, "event-study base year and pre-trend size", None, event_study_contract),
        criterion(4, "triple-difference recovery", None, triple_recovery),
        criterion(5, "variance estimators", None, variance_estimators),
        criterion(6, "synthetic control", Some(s(120)), synthetic_control),
        criterion(7, "model module", None, model_module),
        criterion(8, "determinism", None, determinism),
    ];
    let failed = results.iter().filter(|r| !**r).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

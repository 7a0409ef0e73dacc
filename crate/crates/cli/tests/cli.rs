use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hel_cli::spec::sha256_hex;
use hel_cli::{run, validate_path, Options, RunError};
use tempfile::TempDir;

const DGP: &str = r#"
command = "dgp"
seed = 5
out = "data"

[dgp]
effect = { kind = "constant", tau = 0.0413 }
error = { kind = "clustered", sigma_u = 0.01, sigma_cluster = 0.01, dim = "unit" }
"#;

const ESTIMATE: &str = r#"
command = "estimate"

[input]
panel = "data/panel.csv"
treatment = { state = "Texas", year = 1998 }

[schema]
county = "county"
msa = "msa"
weight = "weight"
lat = "lat"
lon = "lon"
covariates = ["oil"]

[design]
mode = "static"

[[variance]]
kind = "cluster"
dim = "county"

[[variance]]
kind = "spatial"
cutoff_km = 50.0
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// A temp dir holding a simulated panel at `data/panel.csv`.
fn with_panel() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "dgp.toml", DGP);
    run(&spec, &Options::default()).unwrap();
    dir
}

fn diagnostics(dir: &Path, text: &str) -> Vec<String> {
    let p = write(dir, "check.toml", text);
    validate_path(&p, None).into_iter().map(|d| d.to_string()).collect()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let h = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect();
    (h, rows)
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn estimate_writes_a_treated_post_row() {
    let dir = with_panel();
    let spec = write(dir.path(), "estimate.toml", ESTIMATE);
    let out = run(&spec, &Options::default()).unwrap();
    assert_eq!(out.out_dir, dir.path().join("out/estimate"));
    let (h, rows) = read_csv(&out.out_dir.join("table.csv"));
    for col in ["term", "estimate", "se_cluster_county", "se_spatial_bartlett_50km", "p_value", "stars", "pct_effect"] {
        assert!(h.iter().any(|c| c == col), "missing column {col}");
    }
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "Texas × Post");
    let est: f64 = rows[0][1].parse().unwrap();
    let pct: f64 = rows[0][h.iter().position(|c| c == "pct_effect").unwrap()].parse().unwrap();
    assert_eq!(pct, est.exp_m1());
    assert!(out.console.contains("Texas × Post"));
}

#[test]
fn event_study_omits_the_base_year() {
    let dir = with_panel();
    let text = ESTIMATE.replace("mode = \"static\"", "mode = \"dynamic\"");
    let spec = write(dir.path(), "es.toml", &text);
    let out = run(&spec, &Options::default()).unwrap();
    let (_, rows) = read_csv(&out.out_dir.join("event_study.csv"));
    let years: Vec<i32> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(years.len(), 12);
    assert!(!years.contains(&1997));
    let fit = fs::read_to_string(out.out_dir.join("fit.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&fit).unwrap();
    assert_eq!(v["body"]["base_year"], 1997);
    assert!(v["body"]["pretrend_p_value"].is_f64());
}

#[test]
fn synth_writes_three_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        dir.path(),
        "synth.toml",
        "command = \"synth\"\nseed = 3\n[synth]\nsimulate = { effect = 0.0458 }\ngrid = [{ lambda = 0.01, alpha = 0.5 }, { lambda = 0.1, alpha = 0.0 }]\n",
    );
    let out = run(&spec, &Options::default()).unwrap();
    assert_eq!(names(&out.out_dir), ["gaps.csv", "path.csv", "placebo.csv"]);
    let (_, path) = read_csv(&out.out_dir.join("path.csv"));
    assert_eq!(path.len(), 12 + 7);
    let (_, placebo) = read_csv(&out.out_dir.join("placebo.csv"));
    assert_eq!(placebo.len(), 10);
}

#[test]
fn synth_reads_a_panel_file() {
    let dir = with_panel();
    let text = r#"
command = "synth"
[input]
panel = "data/panel.csv"
treatment = { state = "Texas", year = 1998 }
[schema]
covariates = ["oil"]
[synth]
placebos = false
extras = ["oil"]
grid = [{ lambda = 0.1, alpha = 0.5 }]
"#;
    let spec = write(dir.path(), "s.toml", text);
    let out = run(&spec, &Options::default()).unwrap();
    let (_, placebo) = read_csv(&out.out_dir.join("placebo.csv"));
    assert!(placebo.is_empty());
    let (_, gaps) = read_csv(&out.out_dir.join("gaps.csv"));
    // 28 treated units over 13 years.
    assert_eq!(gaps.len(), 28 * 13);
}

#[test]
fn montecarlo_summary_has_bias_rmse_and_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
command = "montecarlo"
seed = 9
[montecarlo]
reps = 200
[montecarlo.did]
dgp = { effect = { kind = "constant", tau = 0.0413 }, error = { kind = "clustered", sigma_u = 0.01, sigma_cluster = 0.03, dim = "unit" } }
design = { mode = "static" }
[[montecarlo.did.variance]]
kind = "cluster"
dim = "unit"
"#;
    let spec = write(dir.path(), "mc.toml", text);
    let out = run(&spec, &Options::default()).unwrap();
    let (h, rows) = read_csv(&out.out_dir.join("summary.csv"));
    for col in ["estimator", "bias", "rmse", "coverage", "mc_se"] {
        assert!(h.iter().any(|c| c == col), "missing column {col}");
    }
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "did_static");
    assert_eq!(rows[0][4], "200");
    let (_, reps) = read_csv(&out.out_dir.join("replications.csv"));
    assert_eq!(reps.len(), 200);
}

#[test]
fn model_reports_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
command = "model"
[model]
grid_resolution = 0.01
[model.household]
beta = 0.96
delta = 0.02
kappa_bar = 0.8
i_contract = 0.05
[model.path]
c = [1.0, 1.05, 1.1, 1.15]
h = [3.0, 3.0, 3.0, 3.0]
r = [0.03, 0.03, 0.03, 0.03]
kappa = [0.8, 0.8, 0.8, 0.8]
delta = [0.02, 0.02, 0.02, 0.02]
terminal_price = 9.0
[model.tail]
m = 0.92
rent = 0.12
csf = 0.3
[[model.three_period]]
beta = 0.9
y = [1.0, 0.2, 3.0]
p = [1.0, 1.0, 1.0]
gross_rate = 1.05
kappa_pm = 0.3
kappa_hel = 0.8
"#;
    let spec = write(dir.path(), "m.toml", text);
    let out = run(&spec, &Options::default()).unwrap();
    assert_eq!(names(&out.out_dir), ["decomposition.csv", "path.csv", "path_gradient.csv", "three_period.csv"]);
    let (h, rows) = read_csv(&out.out_dir.join("path.csv"));
    let k = h.iter().position(|c| c == "price_foc_residual").unwrap();
    for r in &rows[..rows.len() - 1] {
        assert!(r[k].parse::<f64>().unwrap().abs() < 1e-10);
    }
    let (_, d) = read_csv(&out.out_dir.join("decomposition.csv"));
    let residual: f64 = d.iter().find(|r| r[0] == "residual").unwrap()[1].parse().unwrap();
    assert!(residual.abs() < 1e-12);
    let (h, tp) = read_csv(&out.out_dir.join("three_period.csv"));
    let col = |name: &str| tp[0][h.iter().position(|c| c == name).unwrap()].clone();
    assert_eq!(col("status"), "ok");
    assert!(col("max_lagrangian_gradient").parse::<f64>().unwrap() <= 1e-6);
    assert!(col("grid_max_gap").parse::<f64>().unwrap() <= 2e-2);
}

#[test]
fn every_csv_carries_provenance() {
    let dir = with_panel();
    let spec = write(dir.path(), "estimate.toml", ESTIMATE);
    let out = run(&spec, &Options::default()).unwrap();
    let hash = sha256_hex(&fs::read(&spec).unwrap());
    for p in out.artifacts.iter().filter(|p| p.extension().unwrap() == "csv") {
        let first = fs::read_to_string(p).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, format!("# hel {} spec_sha256={hash} seed=0", env!("CARGO_PKG_VERSION")), "{}", p.display());
    }
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["seed"], 5);
    assert_eq!(truth["spec_sha256"], sha256_hex(&fs::read(dir.path().join("dgp.toml")).unwrap()));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = with_panel();
    let spec = write(dir.path(), "estimate.toml", ESTIMATE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&spec, &Options { out: Some(a.clone()), threads: Some(1) }).unwrap();
    run(&spec, &Options { out: Some(b.clone()), threads: Some(4) }).unwrap();
    for n in names(&a) {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n}");
    }
}

#[test]
fn well_formed_spec_has_no_diagnostics() {
    let dir = with_panel();
    assert!(diagnostics(dir.path(), ESTIMATE).is_empty());
}

#[test]
fn missing_input_is_one_diagnostic_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = diagnostics(dir.path(), &ESTIMATE.replace("data/panel.csv", "nowhere/panel.csv"));
    assert_eq!(d.len(), 1, "{d:?}");
    assert!(d[0].contains("nowhere/panel.csv"), "{d:?}");
}

#[test]
fn spatial_plan_without_coordinates_cites_plan_and_schema() {
    let dir = with_panel();
    let text = ESTIMATE.replace("lat = \"lat\"\nlon = \"lon\"\n", "");
    let d = diagnostics(dir.path(), &text);
    assert_eq!(d.len(), 1, "{d:?}");
    assert!(d[0].starts_with("variance[1]"), "{d:?}");
    assert!(d[0].contains("spatial_bartlett_50km") && d[0].contains("[schema]"), "{d:?}");
}

#[test]
fn validation_lists_every_problem() {
    let dir = with_panel();
    let text = r#"
command = "estimate"
[input]
panel = "data/panel.csv"
pairs = "missing_pairs.csv"
treatment = { state = "Texas", year = 1998 }
[schema]
covariates = ["oil", "not_a_column"]
[design]
mode = "triple"
base_year = 1996
controls = ["undeclared"]
[[variance]]
kind = "spatial"
[[variance]]
kind = "cluster"
dim = "msa"
[dgp]
effect = { kind = "constant", tau = 0.1 }
error = { kind = "iid", sigma = 0.1 }
"#;
    let d = diagnostics(dir.path(), text);
    let expect = [
        "dgp: section is not used",
        "not_a_column",
        "input.pairs: file not found",
        "triple design needs",
        "design.base_year",
        "`undeclared`",
        "variance[0]",
        "variance[1]",
    ];
    for e in expect {
        assert!(d.iter().any(|x| x.contains(e)), "no diagnostic mentioning {e:?} in {d:#?}");
    }
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = diagnostics(dir.path(), "command = \"dgp\"\nsed = 4\n");
    assert_eq!(d.len(), 1);
    assert!(d[0].contains("sed"), "{d:?}");
    let d = diagnostics(dir.path(), "command = \"fit\"\n");
    assert_eq!(d.len(), 1);
    let d = diagnostics(dir.path(), "command = \"montecarlo\"\nseed = 1\n[montecarlo]\nreps = 0\n");
    assert!(d.iter().any(|x| x.contains("reps")) && d.iter().any(|x| x.contains("give [montecarlo.did]")), "{d:?}");
    let d = diagnostics(
        dir.path(),
        "command = \"dgp\"\nseed = 1\n[dgp]\nseed = 2\neffect = { kind = \"constant\", tau = 0.1 }\nerror = { kind = \"iid\", sigma = 0.1 }\n",
    );
    assert!(d.iter().any(|x| x.starts_with("dgp.seed")), "{d:?}");
}

#[test]
fn custom_terms_parse() {
    let dir = with_panel();
    let text = ESTIMATE.replace(
        "mode = \"static\"",
        "mode = \"static\"\nterms = [{ product = { name = \"oil × treated\", factors = [{ column = \"oil\" }, \"treated\"] } }]",
    );
    let spec = write(dir.path(), "t.toml", &text);
    let out = run(&spec, &Options::default()).unwrap();
    let (_, rows) = read_csv(&out.out_dir.join("coefficients.csv"));
    assert!(rows.iter().any(|r| r[0] == "oil × treated"));
}

#[test]
fn invalid_spec_fails_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "x.toml", &ESTIMATE.replace("data/panel.csv", "gone.csv"));
    match run(&spec, &Options::default()) {
        Err(e @ RunError::Invalid(_)) => assert_eq!(e.exit_code(), 2),
        other => panic!("expected invalid spec, got {other:?}"),
    }
}

#[test]
fn binary_exit_codes_and_flags() {
    let bin = env!("CARGO_BIN_EXE_hel");
    let dir = with_panel();
    let good = write(dir.path(), "estimate.toml", ESTIMATE);
    let bad = write(dir.path(), "bad.toml", &ESTIMATE.replace("data/panel.csv", "gone.csv"));

    let o = Command::new(bin).args(["--validate-only", "--spec"]).arg(&good).output().unwrap();
    assert!(o.status.success());
    let o = Command::new(bin).args(["--validate-only", "--spec"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gone.csv"));
    assert!(!dir.path().join("out/bad").exists());

    let out = dir.path().join("elsewhere");
    let o = Command::new(bin).arg("--spec").arg(&good).arg("--out").arg(&out).env("HEL_THREADS", "2").output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Texas × Post"));
    assert!(out.join("table.csv").is_file());

    let o = Command::new(bin).arg("--spec").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(bin).arg("--spec").arg(&good).args(["--threads", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

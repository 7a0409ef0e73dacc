use std::sync::Arc;

use hel_core::dgp::{generate, generate_synth_panel};
use hel_core::did::{self, proportional_effect, DidMode, DidResult};
use hel_core::housemodel::{
    build_path, check_path, grid_search_three_period, kkt_violations, path_lagrangian_gradient_fd,
    price_decomposition, price_foc_residual, solve_three_period, three_period_lagrangian_gradient_fd,
    timing_foc_residual, ConstraintTiming, HouseholdParams, TimingInputs,
};
use hel_core::infer::VariancePlan;
use hel_core::montecarlo::{run_did, run_synth, summarize_did, summarize_synth, McSummary};
use hel_core::panel::{load_panel, PairMap};
use hel_core::synth::{self, default_grid, SynthData};
use serde_json::json;

use crate::output::{num, opt, short, stars, text_table, Artifacts, Stamp};
use crate::spec::{Command, LoadedSpec, ModelSection};
use crate::{Options, Outcome, RunError};

pub(crate) fn dispatch(l: &LoadedSpec, opts: &Options) -> Result<Outcome, RunError> {
    let out_dir = l.out_dir(opts.out.as_deref());
    let mut art = Artifacts::new(&out_dir, Stamp { spec_hash: l.hash.clone(), seed: l.spec.seed })?;
    let console = match l.spec.command {
        Command::Estimate => estimate(l, &mut art)?,
        Command::Synth => synth_cmd(l, &mut art)?,
        Command::Model => model(l.spec.model.as_ref().expect("validated"), &mut art)?,
        Command::Dgp => dgp(l, &mut art)?,
        Command::Montecarlo => montecarlo(l, &mut art)?,
    };
    Ok(Outcome { out_dir, artifacts: art.written().to_vec(), console })
}

fn plan_columns(plans: &[VariancePlan]) -> Vec<String> {
    plans.iter().map(|p| format!("se_{}", p.name())).collect()
}

fn mode_name(m: DidMode) -> &'static str {
    match m {
        DidMode::Static => "static",
        DidMode::Dynamic => "dynamic",
        DidMode::Triple => "triple",
    }
}

fn estimate(l: &LoadedSpec, art: &mut Artifacts) -> Result<String, RunError> {
    let s = &l.spec;
    let input = s.input.as_ref().expect("validated");
    let design = s.design.as_ref().expect("validated");
    let mut ds = load_panel(&l.resolve(&input.panel), &l.panel_schema(), &input.treatment)?;
    if let Some(p) = &input.pairs {
        ds = ds.stack_border_pairs(&PairMap::load_csv(&l.resolve(p))?)?;
    }
    let spec = design.did_spec(ds.is_stacked());
    let ds = Arc::new(ds);
    let res = did::estimate(&ds, &spec, &s.variance)?;
    write_fit(&res, &s.variance, art)
}

fn write_fit(res: &DidResult, plans: &[VariancePlan], art: &mut Artifacts) -> Result<String, RunError> {
    let se_cols = plan_columns(plans);
    let mut header: Vec<&str> = vec!["term", "estimate"];
    header.extend(se_cols.iter().map(String::as_str));
    header.extend(["se", "se_plan", "p_value", "stars", "ci_lo", "ci_hi", "pct_effect"]);
    let rows: Vec<Vec<String>> = res
        .terms
        .iter()
        .map(|t| {
            let mut r = vec![t.name.clone(), num(t.estimate)];
            r.extend(t.se_by_plan.iter().map(|v| num(*v)));
            r.extend([
                num(t.se),
                t.se_plan.clone(),
                num(t.p_value),
                stars(t.p_value).into(),
                num(t.ci_lo),
                num(t.ci_hi),
                num(proportional_effect(t.estimate)),
            ]);
            r
        })
        .collect();
    art.csv("table.csv", &header, &rows)?;

    let fit = &res.fit;
    let mut cheader: Vec<&str> = vec!["term", "estimate"];
    cheader.extend(se_cols.iter().map(String::as_str));
    let crows: Vec<Vec<String>> = fit
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut r = vec![n.clone(), num(fit.coefficients[i])];
            r.extend(res.variances.iter().map(|v| num(v.se[i])));
            r
        })
        .collect();
    art.csv("coefficients.csv", &cheader, &crows)?;

    if res.mode == DidMode::Dynamic {
        let erows: Vec<Vec<String>> = res
            .terms
            .iter()
            .filter_map(|t| {
                t.year.map(|y| {
                    vec![
                        y.to_string(),
                        num(t.estimate),
                        num(t.se),
                        t.se_plan.clone(),
                        num(t.p_value),
                        stars(t.p_value).into(),
                        num(t.ci_lo),
                        num(t.ci_hi),
                    ]
                })
            })
            .collect();
        art.csv(
            "event_study.csv",
            &["year", "eta", "se", "se_plan", "p_value", "stars", "ci_lo", "ci_hi"],
            &erows,
        )?;
    }

    let plans_json: Vec<_> = res
        .variances
        .iter()
        .map(|v| {
            json!({
                "name": v.plan.name(),
                "df": v.df,
                "n_clusters": v.n_clusters,
                "psd_adjusted": v.psd_adjusted,
            })
        })
        .collect();
    let terms_json: Vec<_> = res
        .terms
        .iter()
        .map(|t| json!({"term": t.name, "estimate": t.estimate, "se": t.se, "se_plan": t.se_plan, "p_value": t.p_value}))
        .collect();
    art.json(
        "fit.json",
        json!({
            "mode": mode_name(res.mode),
            "n_obs": fit.n_obs(),
            "dof": fit.dof,
            "absorbed_dims": fit.absorbed_dims.iter().map(|d| d.name()).collect::<Vec<_>>(),
            "absorbed_levels": fit.absorbed_levels,
            "dropped": fit.dropped,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "base_year": res.base_year,
            "h_center": res.h_center,
            "pretrend_stat": res.pre_period_joint_stat,
            "pretrend_p_value": res.pre_period_p_value,
            "plans": plans_json,
            "terms": terms_json,
        }),
    )?;

    let trows: Vec<Vec<String>> = res
        .terms
        .iter()
        .map(|t| {
            vec![
                t.name.clone(),
                format!("{}{}", short(t.estimate), stars(t.p_value)),
                format!("({})", short(t.se)),
                short(t.p_value),
                format!("[{}, {}]", short(t.ci_lo), short(t.ci_hi)),
            ]
        })
        .collect();
    let mut out = text_table(&["term", "estimate", "se", "p", "95% CI"], &trows);
    out.push_str(&format!(
        "N = {}; reported SE is the largest across plans; * p<.1, ** p<.05, *** p<.01\n",
        fit.n_obs()
    ));
    if let (Some(st), Some(p)) = (res.pre_period_joint_stat, res.pre_period_p_value) {
        out.push_str(&format!("joint pre-period test: F = {}, p = {}\n", short(st), short(p)));
    }
    Ok(out)
}

fn synth_cmd(l: &LoadedSpec, art: &mut Artifacts) -> Result<String, RunError> {
    let s = &l.spec;
    let sy = s.synth.as_ref().expect("validated");
    let data = match (&sy.simulate, &s.input) {
        (Some(cfg), _) => generate_synth_panel(&cfg.with_seed(s.seed))?.0,
        (None, Some(input)) => {
            let ds = load_panel(&l.resolve(&input.panel), &l.panel_schema(), &input.treatment)?;
            SynthData::from_panel(&ds, &sy.outcome, &sy.extras)?
        }
        (None, None) => unreachable!("validated"),
    };
    let grid = sy.grid.clone().unwrap_or_else(default_grid);
    let run = synth::run(&data, &grid, sy.placebos)?;

    let period = |i: usize, n_pre: usize| if i < n_pre { "pre" } else { "post" };
    let mut gaps = Vec::new();
    let placebo_fits = run.placebo.as_ref().map_or(&[][..], |p| &p.fits[..]);
    for (role, fits) in [("treated", &run.fits[..]), ("placebo", placebo_fits)] {
        for f in fits {
            for (i, (y, g)) in f.years().iter().zip(&f.gaps).enumerate() {
                gaps.push(vec![
                    role.into(),
                    f.unit.clone(),
                    y.to_string(),
                    period(i, f.pre_years.len()).into(),
                    num(*g),
                ]);
            }
        }
    }
    art.csv("gaps.csv", &["role", "unit", "year", "period", "gap"], &gaps)?;

    let path: Vec<Vec<String>> = run
        .path
        .years
        .iter()
        .zip(&run.path.eta)
        .enumerate()
        .map(|(i, (y, e))| vec![y.to_string(), period(i, run.path.n_pre).into(), num(*e)])
        .collect();
    art.csv("path.csv", &["year", "period", "eta"], &path)?;

    let mut prows = Vec::new();
    if let Some(p) = &run.placebo {
        for (k, f) in p.fits.iter().enumerate() {
            prows.push(vec![
                f.unit.clone(),
                num(p.post_means[k]),
                p.ranks[k].to_string(),
                num(f.lambda),
                num(f.alpha),
                num(f.pre_rmse),
            ]);
        }
    }
    art.csv("placebo.csv", &["unit", "post_mean", "rank", "lambda", "alpha", "pre_rmse"], &prows)?;

    let mut out = format!(
        "cross-validated lambda = {}, alpha = {}\ntreated units: {}; controls: {}\nmean post-period effect: {}\n",
        num(run.cv.best.lambda),
        num(run.cv.best.alpha),
        run.fits.len(),
        data.control_names.len(),
        short(run.path.post_mean),
    );
    if let (Some(p), Some(pv)) = (&run.placebo, run.p_value) {
        out.push_str(&format!("mean placebo effect: {}; randomization p = {}\n", short(p.eta_c), short(pv)));
    }
    Ok(out)
}

fn timing_name(t: ConstraintTiming) -> String {
    serde_json::to_value(t).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn model(m: &ModelSection, art: &mut Artifacts) -> Result<String, RunError> {
    let mut out = String::new();
    if let (Some(params), Some(ps)) = (&m.household, &m.path) {
        out.push_str(&model_path(params, ps, m, art)?);
    }
    if let (Some(params), Some(t)) = (&m.household, &m.timing) {
        let x = TimingInputs { c: t.c, h_next: t.h_next, mu: t.mu, kappa: t.kappa, p: t.p, delta_next: t.delta_next };
        let rows = ConstraintTiming::ALL
            .iter()
            .map(|v| Ok(vec![timing_name(*v), num(timing_foc_residual(params, *v, &x)?)]))
            .collect::<Result<Vec<_>, RunError>>()?;
        art.csv("timing.csv", &["timing", "foc_residual"], &rows)?;
        out.push_str(&text_table(&["timing", "foc_residual"], &rows));
    }
    if !m.three_period.is_empty() {
        out.push_str(&three_period(m, art)?);
    }
    Ok(out)
}

fn model_path(
    params: &HouseholdParams,
    ps: &hel_core::housemodel::PathSpec,
    m: &ModelSection,
    art: &mut Artifacts,
) -> Result<String, RunError> {
    let path = build_path(params, ps)?;
    let n = path.len();
    let foc = price_foc_residual(&path, params)?;
    let csf = path.csf(params)?;
    let rent = path.rent(params)?;
    let sdf = path.sdf(params)?;
    let rows: Vec<Vec<String>> = (0..n)
        .map(|t| {
            let inner = |f: &dyn Fn() -> f64| if t + 1 < n { num(f()) } else { String::new() };
            vec![
                t.to_string(),
                num(path.c[t]),
                num(path.h[t]),
                num(path.a[t]),
                num(path.p[t]),
                num(path.mu[t]),
                inner(&|| path.y[t]),
                num(path.r[t]),
                num(path.kappa[t]),
                num(path.delta[t]),
                num(csf[t]),
                num(rent[t]),
                inner(&|| sdf[t]),
                inner(&|| path.budget_residual(t)),
                inner(&|| path.slackness(t)),
                inner(&|| foc[t]),
            ]
        })
        .collect();
    art.csv(
        "path.csv",
        &[
            "t", "c", "h", "a", "p", "mu", "y", "r", "kappa", "delta", "csf", "rent", "sdf_next",
            "budget_residual", "slackness", "price_foc_residual",
        ],
        &rows,
    )?;
    let grad = path_lagrangian_gradient_fd(params, &path, m.fd_step)?;
    let grows: Vec<Vec<String>> = grad.iter().map(|(k, g)| vec![k.clone(), num(*g)]).collect();
    art.csv("path_gradient.csv", &["variable", "lagrangian_gradient"], &grows)?;

    let max_foc = foc.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let max_grad = grad.iter().fold(0.0f64, |a, (_, v)| a.max(v.abs()));
    let issues = check_path(&path);
    let mut out = format!(
        "path: {n} periods; max |price condition residual| = {max_foc:e}; max |Lagrangian gradient| = {max_grad:e}\n"
    );
    for i in &issues {
        out.push_str(&format!("  check: {i}\n"));
    }

    if let Some(tail) = m.tail {
        let h = n - 1;
        let d = price_decomposition(&rent[1..], &csf[1..], &sdf, path.delta[0], h, tail)?;
        // What the horizon leaves out on a finite path: the discounted,
        // depreciated resale value of the house in the last period.
        let discount: f64 = sdf.iter().product();
        let terminal = discount * (1.0 - path.delta[0]).powi(h as i32) * path.p[h];
        let rows = vec![
            vec!["model_price".into(), num(path.p[0])],
            vec!["terminal_value".into(), num(terminal)],
            vec!["residual".into(), num(path.p[0] - d.price() - terminal)],
            vec!["pdv_rent".into(), num(d.pdv_rent)],
            vec!["pdv_csf".into(), num(d.pdv_csf)],
            vec!["tail_rent".into(), num(d.tail_rent)],
            vec!["tail_csf".into(), num(d.tail_csf)],
            vec!["truncation_bound".into(), num(d.truncation_bound)],
            vec!["price".into(), num(d.price())],
            vec!["price_with_tail".into(), num(d.price_with_tail())],
            vec!["csf_share".into(), num(d.csf_share())],
        ];
        art.csv("decomposition.csv", &["quantity", "value"], &rows)?;
        out.push_str(&format!(
            "price decomposition over {h} periods: rents {}, collateral {}, tail {} (bound {}); collateral share {}\n",
            short(d.pdv_rent),
            short(d.pdv_csf),
            short(d.tail_rent + d.tail_csf),
            short(d.truncation_bound),
            short(d.csf_share()),
        ));
    }
    Ok(out)
}

fn three_period(m: &ModelSection, art: &mut Artifacts) -> Result<String, RunError> {
    let header = [
        "case", "status", "purchase_binds", "hel_binds", "c0", "c1", "c2", "h", "b0_pm", "b1_hel", "lambda0",
        "lambda1", "lambda2", "mu0", "mu1", "utility", "purchase_csf", "hel_csf", "housing_foc_residual",
        "max_lagrangian_gradient", "kkt_violations", "grid_b0", "grid_b1", "grid_h", "grid_max_gap",
    ];
    let mut rows = Vec::new();
    let mut out = String::new();
    for (i, input) in m.three_period.iter().enumerate() {
        let sol = match solve_three_period(input) {
            Ok(s) => s,
            Err(e) => {
                let mut r = vec![i.to_string(), e.to_string().replace('\n', "; ")];
                r.resize(header.len(), String::new());
                rows.push(r);
                out.push_str(&format!("case {i}: {e}\n"));
                continue;
            }
        };
        let g = three_period_lagrangian_gradient_fd(input, &sol, m.fd_step);
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let viol = kkt_violations(input, sol.b0_pm, sol.b1_hel, sol.h);
        let grid = m.grid_resolution.map(|r| grid_search_three_period(input, r)).transpose()?;
        let gap = grid.map(|(b0, b1, h)| (b0 - sol.b0_pm).abs().max((b1 - sol.b1_hel).abs()).max((h - sol.h).abs()));
        rows.push(vec![
            i.to_string(),
            "ok".into(),
            sol.pattern.purchase_binds.to_string(),
            sol.pattern.hel_binds.to_string(),
            num(sol.c[0]),
            num(sol.c[1]),
            num(sol.c[2]),
            num(sol.h),
            num(sol.b0_pm),
            num(sol.b1_hel),
            num(sol.lambda[0]),
            num(sol.lambda[1]),
            num(sol.lambda[2]),
            num(sol.mu0),
            num(sol.mu1),
            num(sol.utility),
            num(sol.purchase_csf(input)),
            num(sol.hel_csf(input)),
            num(sol.housing_foc_residual(input)),
            num(gmax),
            viol.len().to_string(),
            opt(grid.map(|g| g.0)),
            opt(grid.map(|g| g.1)),
            opt(grid.map(|g| g.2)),
            opt(gap),
        ]);
        out.push_str(&format!(
            "case {i}: h = {}, b0 = {}, b1 = {}, binding (purchase, HEL) = ({}, {}), max |gradient| = {gmax:e}{}\n",
            short(sol.h),
            short(sol.b0_pm),
            short(sol.b1_hel),
            sol.pattern.purchase_binds,
            sol.pattern.hel_binds,
            gap.map_or(String::new(), |g| format!(", grid gap = {g:e}")),
        ));
    }
    art.csv("three_period.csv", &header, &rows)?;
    Ok(out)
}

fn dgp(l: &LoadedSpec, art: &mut Artifacts) -> Result<String, RunError> {
    let cfg = l.spec.dgp.as_ref().expect("validated").with_seed(l.spec.seed);
    let (ds, truth) = generate(&cfg)?;
    let mut buf = art.stamp().comment().into_bytes();
    ds.write_csv(&mut buf)?;
    art.raw("panel.csv", &buf)?;
    let tv = serde_json::to_value(&truth).map_err(|e| RunError::Message(e.to_string()))?;
    art.json("truth.json", tv)?;
    Ok(format!("{} observations on {} units over {} years\n", ds.len(), ds.units().len(), ds.years().len()))
}

fn summary_rows(s: &McSummary) -> Vec<Vec<String>> {
    s.rows
        .iter()
        .map(|r| {
            vec![
                r.estimator.clone(),
                r.term.clone(),
                r.plan.clone(),
                num(r.truth),
                r.n.to_string(),
                num(r.mean),
                num(r.bias),
                num(r.rmse),
                num(r.mc_se),
                opt(r.mean_se),
                opt(r.coverage),
            ]
        })
        .collect()
}

fn montecarlo(l: &LoadedSpec, art: &mut Artifacts) -> Result<String, RunError> {
    let seed = l.spec.seed;
    let mc = l.spec.montecarlo.as_ref().expect("validated");
    let mut summary = Vec::new();
    let mut reps_rows = Vec::new();
    let mut pretrend = Vec::new();
    if let Some(d) = &mc.did {
        let cfg = d.dgp.with_seed(seed);
        let spec = d.design.did_spec(false);
        let est = format!("did_{}", mode_name(spec.mode));
        let reps = run_did(&cfg, &spec, &d.variance, mc.reps)?;
        let names: Vec<String> = d.variance.iter().map(|p| p.name()).collect();
        for r in &reps {
            for t in &r.terms {
                for (k, plan) in names.iter().enumerate() {
                    reps_rows.push(vec![
                        est.clone(),
                        r.rep.to_string(),
                        r.seed.to_string(),
                        t.term.clone(),
                        plan.clone(),
                        num(t.truth),
                        num(t.estimate),
                        num(t.se[k]),
                        t.covered[k].to_string(),
                    ]);
                }
            }
        }
        let s = summarize_did(&est, &reps, &d.variance);
        if let Some(rate) = s.pretrend_rejection {
            let n = reps.iter().filter(|r| r.pretrend_p.is_some()).count();
            pretrend.push(vec![est.clone(), names[0].clone(), n.to_string(), num(rate)]);
        }
        summary.extend(summary_rows(&s));
    }
    if let Some(sy) = &mc.synth {
        let cfg = sy.dgp.with_seed(seed);
        let grid = sy.grid.clone().unwrap_or_else(default_grid);
        let reps = run_synth(&cfg, &grid, mc.reps)?;
        for r in &reps {
            for (term, truth, v) in [("eta_treated", cfg.effect, r.eta), ("eta_placebo", 0.0, r.eta_c)] {
                reps_rows.push(vec![
                    "synth".into(),
                    r.rep.to_string(),
                    r.seed.to_string(),
                    term.into(),
                    "placebo".into(),
                    num(truth),
                    num(v),
                    String::new(),
                    String::new(),
                ]);
            }
        }
        summary.extend(summary_rows(&summarize_synth(&reps, cfg.effect)));
    }
    let header =
        ["estimator", "term", "plan", "truth", "n", "mean", "bias", "rmse", "mc_se", "mean_se", "coverage"];
    art.csv("summary.csv", &header, &summary)?;
    art.csv(
        "replications.csv",
        &["estimator", "rep", "seed", "term", "plan", "truth", "estimate", "se", "covered"],
        &reps_rows,
    )?;
    if !pretrend.is_empty() {
        art.csv("pretrend.csv", &["estimator", "plan", "n", "rejection_rate"], &pretrend)?;
    }
    let console: Vec<Vec<String>> = summary
        .iter()
        .map(|r| {
            let f = |s: &str| s.parse::<f64>().map(short).unwrap_or_default();
            vec![r[0].clone(), r[1].clone(), r[2].clone(), f(&r[6]), f(&r[7]), f(&r[10])]
        })
        .collect();
    let mut out = format!("{} replications\n", mc.reps);
    out.push_str(&text_table(&["estimator", "term", "plan", "bias", "rmse", "coverage"], &console));
    for p in &pretrend {
        out.push_str(&format!("{}: joint pre-period test rejects at 5% in {} of replications\n", p[0], p[3]));
    }
    Ok(out)
}

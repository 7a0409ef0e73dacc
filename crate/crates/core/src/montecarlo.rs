//! Monte Carlo experiments over DGP replications.
//!
//! Replications run in parallel but are collected in replication order and
//! summarized with pairwise sums, so summaries do not depend on the number
//! of threads.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{generate, generate_synth_panel, replication_seed, DgpConfig, EffectSpec, GroundTruth, SynthDgpConfig};
use crate::did::{estimate, treated_post_name, DidMode, DidResult, DidSpec};
use crate::error::{Error, Result};
use crate::infer::VariancePlan;
use crate::numeric::pairwise_sum;
use crate::panel::PanelDataset;
use crate::synth::{self, GridPoint};

/// One effect coefficient from one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDraw {
    pub term: String,
    pub truth: f64,
    pub estimate: f64,
    /// SE per variance plan, in plan order.
    pub se: Vec<f64>,
    /// Whether the 95% interval under each plan covers the truth.
    pub covered: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: u64,
    pub seed: u64,
    pub terms: Vec<TermDraw>,
    pub pretrend_p: Option<f64>,
}

/// Aggregate over replications for one term under one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub term: String,
    pub plan: String,
    pub truth: f64,
    pub n: usize,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
    pub mean_se: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub rows: Vec<SummaryRow>,
    /// Share of replications whose joint pre-trend test rejects at 5%.
    pub pretrend_rejection: Option<f64>,
}

impl McSummary {
    pub fn row(&self, term: &str, plan: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.term == term && r.plan == plan)
    }
}

fn mean_treated_h(ds: &PanelDataset, truth: &GroundTruth) -> f64 {
    let v: Vec<f64> = ds
        .observations()
        .iter()
        .zip(&truth.h)
        .filter(|(o, _)| ds.is_treated(o) && ds.is_post(o))
        .map(|(_, h)| *h)
        .collect();
    pairwise_sum(&v) / v.len() as f64
}

/// Per-year effect on treated units under the injected effect.
fn effect_in_year(effect: &EffectSpec, year: i32, treatment_year: i32, h_bar: f64) -> f64 {
    match effect {
        EffectSpec::Constant { tau } => {
            if year >= treatment_year {
                *tau
            } else {
                0.0
            }
        }
        EffectSpec::Dynamic { by_year } => by_year.get(&year).copied().unwrap_or(0.0),
        EffectSpec::Heterogeneous { beta_0, beta_h, .. } => {
            if year >= treatment_year {
                beta_0 + beta_h * h_bar
            } else {
                0.0
            }
        }
    }
}

/// True value of each reported effect term, when the design identifies one.
pub fn did_truths(ds: &PanelDataset, truth: &GroundTruth, result: &DidResult) -> Vec<Option<f64>> {
    let cfg = &truth.config;
    let t0 = cfg.treatment_year;
    let h_bar = if truth.h.is_empty() { 0.0 } else { mean_treated_h(ds, truth) };
    let per_year = |y: i32| effect_in_year(&cfg.effect, y, t0, h_bar);
    let years: Vec<i32> = truth.years.clone();
    result
        .terms
        .iter()
        .map(|t| match result.mode {
            DidMode::Static => {
                // Balanced TWFE: average post effect minus average pre effect.
                let pre: Vec<f64> = years.iter().filter(|y| **y < t0).map(|y| per_year(*y)).collect();
                let post: Vec<f64> = years.iter().filter(|y| **y >= t0).map(|y| per_year(*y)).collect();
                Some(pairwise_sum(&post) / post.len() as f64 - pairwise_sum(&pre) / pre.len() as f64)
            }
            DidMode::Dynamic => {
                let base = result.base_year?;
                t.year.map(|y| per_year(y) - per_year(base))
            }
            DidMode::Triple => match &cfg.effect {
                EffectSpec::Heterogeneous { beta_0, beta_h, .. } => {
                    let c = result.h_center.unwrap_or(0.0);
                    if t.name == treated_post_name(ds) {
                        Some(beta_0 + beta_h * c)
                    } else {
                        Some(*beta_h)
                    }
                }
                EffectSpec::Constant { tau } => Some(if t.name == treated_post_name(ds) { *tau } else { 0.0 }),
                EffectSpec::Dynamic { .. } => None,
            },
        })
        .collect()
}

/// Runs one DID replication.
pub fn did_replication(cfg: &DgpConfig, spec: &DidSpec, plans: &[VariancePlan], rep: u64) -> Result<Replication> {
    let seed = replication_seed(cfg.seed, rep);
    let (ds, truth) = generate(&cfg.with_seed(seed))?;
    let ds = Arc::new(ds);
    let result = estimate(&ds, spec, plans)?;
    let truths = did_truths(&ds, &truth, &result);
    let mut terms = Vec::new();
    for (t, tr) in result.terms.iter().zip(truths) {
        let Some(tr) = tr else { continue };
        let covered = result
            .variances
            .iter()
            .zip(&t.se_by_plan)
            .map(|(v, se)| (t.estimate - tr).abs() <= v.critical_value(0.05) * se)
            .collect();
        terms.push(TermDraw { term: t.name.clone(), truth: tr, estimate: t.estimate, se: t.se_by_plan.clone(), covered });
    }
    Ok(Replication { rep, seed, terms, pretrend_p: result.pre_period_p_value })
}

/// Runs `reps` DID replications.
pub fn run_did(cfg: &DgpConfig, spec: &DidSpec, plans: &[VariancePlan], reps: u64) -> Result<Vec<Replication>> {
    if reps == 0 {
        return Err(Error::Config("Monte Carlo needs at least one replication".into()));
    }
    if spec.mode == DidMode::Triple && spec.heterogeneity.is_none() {
        return Err(Error::Config("triple design needs a heterogeneity column".into()));
    }
    (0..reps).into_par_iter().map(|r| did_replication(cfg, spec, plans, r)).collect()
}

fn moments(v: &[f64], truth: f64) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let m = pairwise_sum(v) / n;
    let sq: Vec<f64> = v.iter().map(|x| (x - truth).powi(2)).collect();
    let rmse = (pairwise_sum(&sq) / n).sqrt();
    let dev: Vec<f64> = v.iter().map(|x| (x - m).powi(2)).collect();
    let sd = if v.len() > 1 { (pairwise_sum(&dev) / (n - 1.0)).sqrt() } else { f64::NAN };
    (m, rmse, sd / n.sqrt())
}

/// Summarizes replications term by term and plan by plan. Terms are
/// matched by name; a term whose truth varies across replications is
/// summarized against the mean truth.
pub fn summarize_did(estimator: &str, reps: &[Replication], plans: &[VariancePlan]) -> McSummary {
    let mut names: Vec<String> = Vec::new();
    for r in reps {
        for t in &r.terms {
            if !names.contains(&t.term) {
                names.push(t.term.clone());
            }
        }
    }
    let mut rows = Vec::new();
    for name in &names {
        let draws: Vec<&TermDraw> = reps.iter().flat_map(|r| r.terms.iter().filter(|t| &t.term == name)).collect();
        let est: Vec<f64> = draws.iter().map(|d| d.estimate).collect();
        let truths: Vec<f64> = draws.iter().map(|d| d.truth).collect();
        let truth = pairwise_sum(&truths) / truths.len() as f64;
        let err: Vec<f64> = draws.iter().map(|d| d.estimate - d.truth).collect();
        let (m, _, mc_se) = moments(&est, truth);
        let (bias, rmse, _) = moments(&err, 0.0);
        for (k, plan) in plans.iter().enumerate() {
            let ses: Vec<f64> = draws.iter().map(|d| d.se[k]).collect();
            let cov = draws.iter().filter(|d| d.covered[k]).count() as f64 / draws.len() as f64;
            rows.push(SummaryRow {
                estimator: estimator.to_string(),
                term: name.clone(),
                plan: plan.name(),
                truth,
                n: draws.len(),
                mean: m,
                bias,
                rmse,
                mc_se,
                mean_se: Some(pairwise_sum(&ses) / ses.len() as f64),
                coverage: Some(cov),
            });
        }
    }
    let ps: Vec<f64> = reps.iter().filter_map(|r| r.pretrend_p).collect();
    let pretrend_rejection =
        (!ps.is_empty()).then(|| ps.iter().filter(|p| **p < 0.05).count() as f64 / ps.len() as f64);
    McSummary { rows, pretrend_rejection }
}

/// One synthetic-control replication: averaged treated effect and mean
/// placebo effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthReplication {
    pub rep: u64,
    pub seed: u64,
    pub eta: f64,
    pub eta_c: f64,
    pub lambda: f64,
    pub alpha: f64,
}

pub fn run_synth(cfg: &SynthDgpConfig, grid: &[GridPoint], reps: u64) -> Result<Vec<SynthReplication>> {
    if reps == 0 {
        return Err(Error::Config("Monte Carlo needs at least one replication".into()));
    }
    (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seed = replication_seed(cfg.seed, rep);
            let (data, _) = generate_synth_panel(&cfg.with_seed(seed))?;
            let run = synth::run(&data, grid, true)?;
            let eta_c = run.placebo.as_ref().map_or(f64::NAN, |p| p.eta_c);
            Ok(SynthReplication {
                rep,
                seed,
                eta: run.path.post_mean,
                eta_c,
                lambda: run.cv.best.lambda,
                alpha: run.cv.best.alpha,
            })
        })
        .collect()
}

pub fn summarize_synth(reps: &[SynthReplication], effect: f64) -> McSummary {
    let row = |term: &str, v: Vec<f64>, truth: f64| {
        let (m, rmse, mc_se) = moments(&v, truth);
        SummaryRow {
            estimator: "synth".into(),
            term: term.into(),
            plan: "placebo".into(),
            truth,
            n: v.len(),
            mean: m,
            bias: m - truth,
            rmse,
            mc_se,
            mean_se: None,
            coverage: None,
        }
    };
    McSummary {
        rows: vec![
            row("eta_treated", reps.iter().map(|r| r.eta).collect(), effect),
            row("eta_placebo", reps.iter().map(|r| r.eta_c).collect(), 0.0),
        ],
        pretrend_rejection: None,
    }
}

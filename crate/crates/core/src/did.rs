//! Difference-in-differences designs compiled onto [`crate::regress`]:
//! the static treated × post design, the event study with an omitted base
//! year, and the triple difference with a heterogeneity variable.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{max_se_from, vcov, MaxSe, VariancePlan, VarianceResult};
use crate::numeric::{mean, pairwise_sum};
use crate::panel::{FeDim, PanelDataset};
use crate::regress::{fit_wls, DesignSpec, Factor, RegressionFit, Term, Weighting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DidMode {
    Static,
    Dynamic,
    Triple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    pub column: String,
    /// Subtract the weighted sample mean of H first. This moves the meaning
    /// of the intercept from H = 0 to H = mean(H).
    #[serde(default)]
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidSpec {
    pub mode: DidMode,
    #[serde(default = "default_response")]
    pub response: String,
    /// Omitted event-study year; defaults to the year before treatment.
    #[serde(default)]
    pub base_year: Option<i32>,
    #[serde(default)]
    pub heterogeneity: Option<Heterogeneity>,
    #[serde(default)]
    pub controls: Vec<Term>,
    #[serde(default = "default_absorb")]
    pub absorb: Vec<FeDim>,
    #[serde(default)]
    pub weights: Weighting,
}

fn default_response() -> String {
    "outcome".into()
}

fn default_absorb() -> Vec<FeDim> {
    vec![FeDim::Unit, FeDim::Year]
}

impl DidSpec {
    pub fn new(mode: DidMode) -> Self {
        DidSpec {
            mode,
            response: default_response(),
            base_year: None,
            heterogeneity: None,
            controls: Vec::new(),
            absorb: default_absorb(),
            weights: Weighting::Column,
        }
    }

    pub fn with_heterogeneity(mut self, column: &str, center: bool) -> Self {
        self.heterogeneity = Some(Heterogeneity { column: column.into(), center });
        self
    }

    pub fn with_controls(mut self, controls: Vec<Term>) -> Self {
        self.controls = controls;
        self
    }

    pub fn with_absorb(mut self, absorb: Vec<FeDim>) -> Self {
        self.absorb = absorb;
        self
    }

    pub fn with_base_year(mut self, year: i32) -> Self {
        self.base_year = Some(year);
        self
    }
}

/// Name of the treated × post regressor.
pub fn treated_post_name(ds: &PanelDataset) -> String {
    format!("{} × Post", ds.treatment().state)
}

pub fn treated_year_name(ds: &PanelDataset, year: i32) -> String {
    format!("{} × {year}", ds.treatment().state)
}

pub fn treated_post_h_name(ds: &PanelDataset, h: &str) -> String {
    format!("{} × Post × {h}", ds.treatment().state)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Static { beta: f64 },
    Dynamic { eta: BTreeMap<i32, f64> },
    Triple { beta_h0: f64, beta_h: f64 },
}

/// One reported coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct TermEstimate {
    pub name: String,
    pub estimate: f64,
    /// SE under each plan, in plan order.
    pub se_by_plan: Vec<f64>,
    /// Largest SE across plans, which is the reported one.
    pub se: f64,
    pub se_plan: String,
    pub p_value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Event-study year, when the term is a per-year effect.
    pub year: Option<i32>,
}

#[derive(Debug, Clone)]
pub struct DidResult {
    pub mode: DidMode,
    pub effect: Effect,
    /// Effect coefficients in report order.
    pub terms: Vec<TermEstimate>,
    pub variances: Vec<VarianceResult>,
    pub max_se: Vec<MaxSe>,
    /// Wald statistic for all pre-period event-study coefficients being zero.
    pub pre_period_joint_stat: Option<f64>,
    pub pre_period_p_value: Option<f64>,
    pub base_year: Option<i32>,
    /// Mean subtracted from H when centering was requested.
    pub h_center: Option<f64>,
    pub fit: RegressionFit,
}

impl DidResult {
    pub fn term(&self, name: &str) -> Option<&TermEstimate> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Event-study rows `(year, eta, se, ci_lo, ci_hi)`; the base year is
    /// never present.
    pub fn event_study_rows(&self) -> Vec<(i32, f64, f64, f64, f64)> {
        self.terms
            .iter()
            .filter_map(|t| t.year.map(|y| (y, t.estimate, t.se, t.ci_lo, t.ci_hi)))
            .collect()
    }
}

fn check_groups(ds: &PanelDataset) -> Result<()> {
    let t = ds.treatment().year;
    let mut seen = [[false; 2]; 2];
    for o in ds.observations() {
        seen[usize::from(ds.is_treated(o))][usize::from(o.year >= t)] = true;
    }
    if !seen[1][0] && !seen[1][1] {
        return Err(Error::Design(format!(
            "no treated units: no observation in state `{}`",
            ds.treatment().state
        )));
    }
    let labels = ["control", "treated"];
    for g in 0..2 {
        for (p, period) in ["pre", "post"].iter().enumerate() {
            if !seen[g][p] {
                return Err(Error::Design(format!(
                    "{} units have no {period}-period observations",
                    labels[g]
                )));
            }
        }
    }
    Ok(())
}

/// Fit, per-plan variances, max-SE summary and the effect terms.
type Report = (RegressionFit, Vec<VarianceResult>, Vec<MaxSe>, Vec<TermEstimate>);

fn report(
    ds: &Arc<PanelDataset>,
    spec: &DesignSpec,
    plans: &[VariancePlan],
    effect_terms: &[(String, Option<i32>)],
) -> Result<Report> {
    if plans.is_empty() {
        return Err(Error::Inference("at least one variance plan is required".into()));
    }
    let fit = fit_wls(ds, spec)?;
    let variances = plans.iter().map(|p| vcov(&fit, p)).collect::<Result<Vec<_>>>()?;
    let max_se = max_se_from(&variances)?;
    let mut terms = Vec::new();
    for (name, year) in effect_terms {
        let i = fit.index_of(name).ok_or_else(|| {
            Error::Identification(format!("effect term `{name}` is collinear with the fixed effects"))
        })?;
        let m = &max_se[i];
        let v = &variances[m.plan_index];
        let est = fit.coefficients[i];
        let crit = v.critical_value(0.05);
        terms.push(TermEstimate {
            name: name.clone(),
            estimate: est,
            se_by_plan: variances.iter().map(|v| v.se[i]).collect(),
            se: m.se,
            se_plan: m.plan_name.clone(),
            p_value: v.p_value(est, m.se),
            ci_lo: est - crit * m.se,
            ci_hi: est + crit * m.se,
            year: *year,
        });
    }
    Ok((fit, variances, max_se, terms))
}

fn design(spec: &DidSpec, mut effect: Vec<Term>) -> Result<DesignSpec> {
    effect.extend(spec.controls.iter().cloned());
    Ok(DesignSpec::new(&spec.response, effect, spec.absorb.clone())?.with_weights(spec.weights))
}

/// Static design: coefficient on treated × post.
pub fn estimate_static(
    ds: &Arc<PanelDataset>,
    spec: &DidSpec,
    plans: &[VariancePlan],
) -> Result<DidResult> {
    check_groups(ds)?;
    let name = treated_post_name(ds);
    let dspec = design(
        spec,
        vec![Term::product(name.clone(), vec![Factor::Treated, Factor::Post])],
    )?;
    let (fit, variances, max_se, terms) = report(ds, &dspec, plans, &[(name, None)])?;
    Ok(DidResult {
        mode: DidMode::Static,
        effect: Effect::Static { beta: terms[0].estimate },
        terms,
        variances,
        max_se,
        pre_period_joint_stat: None,
        pre_period_p_value: None,
        base_year: None,
        h_center: None,
        fit,
    })
}

/// Event study: one treated × year coefficient for every year except the
/// base year, plus a joint Wald test that all pre-period coefficients are
/// zero (first plan).
pub fn estimate_dynamic(
    ds: &Arc<PanelDataset>,
    spec: &DidSpec,
    plans: &[VariancePlan],
) -> Result<DidResult> {
    check_groups(ds)?;
    let t = ds.treatment().year;
    let years = ds.years();
    let pre: Vec<i32> = years.iter().copied().filter(|&y| y < t).collect();
    if pre.len() < 2 {
        return Err(Error::Design(format!(
            "event study needs at least two pre-treatment years, found {}",
            pre.len()
        )));
    }
    let base = spec.base_year.unwrap_or(t - 1);
    if !years.contains(&base) {
        return Err(Error::Design(format!("base year {base} is not in the data")));
    }
    let effect: Vec<(String, Option<i32>)> = years
        .iter()
        .filter(|&&y| y != base)
        .map(|&y| (treated_year_name(ds, y), Some(y)))
        .collect();
    let terms: Vec<Term> = effect
        .iter()
        .map(|(n, y)| Term::product(n.clone(), vec![Factor::Treated, Factor::YearIs(y.unwrap())]))
        .collect();
    let dspec = design(spec, terms)?;
    let (fit, variances, max_se, terms) = report(ds, &dspec, plans, &effect)?;
    let pre_names: Vec<String> = terms
        .iter()
        .filter(|e| e.year.is_some_and(|y| y < t))
        .map(|e| e.name.clone())
        .collect();
    let (w, p) = variances[0].wald(&fit, &pre_names)?;
    let eta = terms.iter().map(|e| (e.year.unwrap(), e.estimate)).collect();
    Ok(DidResult {
        mode: DidMode::Dynamic,
        effect: Effect::Dynamic { eta },
        terms,
        variances,
        max_se,
        pre_period_joint_stat: Some(w),
        pre_period_p_value: Some(p),
        base_year: Some(base),
        h_center: None,
        fit,
    })
}

/// Triple difference: treated × post (the effect at H = 0) and
/// treated × post × H, with the lower-order treated × H and post × H terms.
pub fn estimate_triple(
    ds: &Arc<PanelDataset>,
    spec: &DidSpec,
    plans: &[VariancePlan],
) -> Result<DidResult> {
    check_groups(ds)?;
    let het = spec
        .heterogeneity
        .as_ref()
        .ok_or_else(|| Error::Design("triple difference needs a heterogeneity column".into()))?;
    let h = ds.column(&het.column)?;
    let (mut treated_h, mut control_h) = (Vec::new(), Vec::new());
    for (o, &v) in ds.observations().iter().zip(&h) {
        if ds.is_treated(o) {
            treated_h.push(v);
        } else {
            control_h.push(v);
        }
    }
    let scale = h.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for (label, vals) in [("treated", &treated_h), ("control", &control_h)] {
        let m = mean(vals);
        let spread = vals.iter().fold(0.0f64, |a, v| a.max((v - m).abs()));
        if spread <= 1e-12 * scale {
            return Err(Error::Identification(format!(
                "heterogeneity `{}` is constant within the {label} group",
                het.column
            )));
        }
    }
    let (data, hcol, center) = if het.center {
        log::warn!(
            "centering `{}`: the treated × post coefficient becomes the effect at mean H, not H = 0",
            het.column
        );
        let w: Vec<f64> = ds.observations().iter().map(|o| o.weight).collect();
        let c = pairwise_sum(&h.iter().zip(&w).map(|(a, b)| a * b).collect::<Vec<_>>())
            / pairwise_sum(&w);
        let name = format!("{}_centered", het.column);
        let centered: Vec<f64> = h.iter().map(|v| v - c).collect();
        (Arc::new(ds.with_covariate(&name, &centered)?), name, Some(c))
    } else {
        (Arc::clone(ds), het.column.clone(), None)
    };
    let tp = treated_post_name(&data);
    let tph = treated_post_h_name(&data, &hcol);
    let st = &data.treatment().state;
    let hf = || Factor::Column(hcol.clone());
    let terms = vec![
        Term::product(tp.clone(), vec![Factor::Treated, Factor::Post]),
        Term::product(tph.clone(), vec![Factor::Treated, Factor::Post, hf()]),
        Term::product(format!("{st} × {hcol}"), vec![Factor::Treated, hf()]),
        Term::product(format!("Post × {hcol}"), vec![Factor::Post, hf()]),
    ];
    let dspec = design(spec, terms)?;
    let (fit, variances, max_se, terms) =
        report(&data, &dspec, plans, &[(tp, None), (tph, None)])?;
    Ok(DidResult {
        mode: DidMode::Triple,
        effect: Effect::Triple { beta_h0: terms[0].estimate, beta_h: terms[1].estimate },
        terms,
        variances,
        max_se,
        pre_period_joint_stat: None,
        pre_period_p_value: None,
        base_year: None,
        h_center: center,
        fit,
    })
}

pub fn estimate(ds: &Arc<PanelDataset>, spec: &DidSpec, plans: &[VariancePlan]) -> Result<DidResult> {
    match spec.mode {
        DidMode::Static => estimate_static(ds, spec, plans),
        DidMode::Dynamic => estimate_dynamic(ds, spec, plans),
        DidMode::Triple => estimate_triple(ds, spec, plans),
    }
}

/// `β_{H,0} + β_H · h` for a triple-difference result.
pub fn fitted_ate(result: &DidResult, h: f64) -> Result<f64> {
    match result.effect {
        Effect::Triple { beta_h0, beta_h } => Ok(ate_line(beta_h0, beta_h, h)),
        _ => Err(Error::Mode("fitted ATE needs a triple-difference result".into())),
    }
}

pub fn ate_line(beta_h0: f64, beta_h: f64, h: f64) -> f64 {
    beta_h0 + beta_h * h
}

/// `exp(β) − 1`: the proportional effect implied by a log-point coefficient.
pub fn proportional_effect(log_points: f64) -> f64 {
    log_points.exp_m1()
}

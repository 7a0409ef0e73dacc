//! Elastic-net synthetic control.
//!
//! A treated series is regressed on control-unit series over the pre-period
//! with an unpenalized intercept and an elastic-net penalty on the weights,
//! which may be negative and need not sum to one. Post-period gaps between
//! the treated series and its synthetic counterpart are the effect estimates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, pairwise_sum, pairwise_sum_iter, sample_sd};
use crate::panel::PanelDataset;

pub const CD_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 100_000;
const TIE_RTOL: f64 = 1e-12;

/// One point of the regularization grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub alpha: f64,
}

impl GridPoint {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(GridPoint { lambda, alpha })
    }
}

/// λ ∈ {10^k : k = −4..2} × α ∈ {0, 0.25, 0.5, 0.75, 1}.
pub fn default_grid() -> Vec<GridPoint> {
    let mut g = Vec::new();
    for k in -4..=2 {
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            g.push(GridPoint { lambda: 10f64.powi(k), alpha: a });
        }
    }
    g
}

/// One treated unit against a donor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProblem {
    pub unit: String,
    pub treated_pre: DVector<f64>,
    pub treated_post: DVector<f64>,
    /// Rows are pre-years; the first `n_controls` columns are control-unit
    /// outcomes and any remaining columns are extra predictors.
    pub controls_pre: DMatrix<f64>,
    pub controls_post: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub n_controls: usize,
    pub pre_years: Vec<i32>,
    pub post_years: Vec<i32>,
}

impl SynthProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        unit: impl Into<String>,
        treated_pre: DVector<f64>,
        treated_post: DVector<f64>,
        controls_pre: DMatrix<f64>,
        controls_post: DMatrix<f64>,
        column_names: Vec<String>,
        n_controls: usize,
        pre_years: Vec<i32>,
        post_years: Vec<i32>,
    ) -> Result<Self> {
        let p = SynthProblem {
            unit: unit.into(),
            treated_pre,
            treated_post,
            controls_pre,
            controls_post,
            column_names,
            n_controls,
            pre_years,
            post_years,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let tp = self.pre_years.len();
        let k = self.controls_pre.ncols();
        if tp < 2 {
            return Err(Error::Alignment(format!("pre-period has {tp} years, need at least 2")));
        }
        if k == 0 || self.n_controls == 0 || self.n_controls > k {
            return Err(Error::Alignment("synthetic control needs at least one control column".into()));
        }
        if self.treated_pre.len() != tp || self.controls_pre.nrows() != tp {
            return Err(Error::Alignment("pre-period rows do not match pre-years".into()));
        }
        let tq = self.post_years.len();
        if self.treated_post.len() != tq || self.controls_post.nrows() != tq {
            return Err(Error::Alignment("post-period rows do not match post-years".into()));
        }
        if self.controls_post.ncols() != k || self.column_names.len() != k {
            return Err(Error::Alignment("post-period columns do not match pre-period columns".into()));
        }
        let all = self
            .treated_pre
            .iter()
            .chain(self.treated_post.iter())
            .chain(self.controls_pre.iter())
            .chain(self.controls_post.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Alignment("missing or non-finite entries".into()));
        }
        Ok(())
    }

    pub fn years(&self) -> Vec<i32> {
        self.pre_years.iter().chain(&self.post_years).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFit {
    pub unit: String,
    pub mu: f64,
    pub omega: DVector<f64>,
    pub lambda: f64,
    pub alpha: f64,
    pub pre_rmse: f64,
    pub pre_years: Vec<i32>,
    pub post_years: Vec<i32>,
    /// Gaps for pre-years then post-years.
    pub gaps: Vec<f64>,
    pub sweeps: usize,
}

impl SynthFit {
    pub fn years(&self) -> Vec<i32> {
        self.pre_years.iter().chain(&self.post_years).copied().collect()
    }

    pub fn pre_gaps(&self) -> &[f64] {
        &self.gaps[..self.pre_years.len()]
    }

    pub fn post_gaps(&self) -> &[f64] {
        &self.gaps[self.pre_years.len()..]
    }

    /// Mean gap over the post-period.
    pub fn post_mean(&self) -> f64 {
        mean(self.post_gaps())
    }
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Centered least-squares problem in Gram form.
struct Gram {
    g: DMatrix<f64>,
    c: DVector<f64>,
    yy: f64,
}

impl Gram {
    fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> (Self, DVector<f64>, f64) {
        let n = x.nrows();
        let xbar = DVector::from_fn(x.ncols(), |j, _| mean(x.column(j).as_slice()));
        let ybar = mean(y.as_slice());
        let xc = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - xbar[j]);
        let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        let k = x.ncols();
        let g = DMatrix::from_fn(k, k, |a, b| {
            pairwise_sum_iter((0..n).map(|i| xc[(i, a)] * xc[(i, b)]))
        });
        let c = DVector::from_fn(k, |a, _| pairwise_sum_iter((0..n).map(|i| xc[(i, a)] * yc[i])));
        let yy = pairwise_sum_iter(yc.iter().map(|v| v * v));
        (Gram { g, c, yy }, xbar, ybar)
    }

    fn objective(&self, w: &DVector<f64>, gp: GridPoint) -> f64 {
        let quad = (w.transpose() * &self.g * w)[(0, 0)];
        let rss = (self.yy - 2.0 * self.c.dot(w) + quad).max(0.0);
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        rss + gp.lambda * (gp.alpha * l1 + (1.0 - gp.alpha) * w.norm_squared())
    }

    /// Step toward the exact minimizer on the current orthant face. With the
    /// signs of the nonzero coordinates fixed the objective is the quadratic
    /// `wᵀAw − 2bᵀw`. If `b` has a component in the null space of `A` the
    /// face objective is linear along it, so move that way until the first
    /// coordinate reaches zero; this shrinks the active set toward rank(A).
    /// Otherwise take the Newton step, stopping at the first zero crossing.
    /// Neither move can increase the objective.
    fn polish(&self, w: &DVector<f64>, gp: GridPoint) -> Option<DVector<f64>> {
        let active: Vec<usize> = (0..w.len()).filter(|&j| w[j] != 0.0).collect();
        if active.is_empty() {
            return None;
        }
        let m = active.len();
        let a = DMatrix::from_fn(m, m, |r, s| {
            self.g[(active[r], active[s])]
                + if r == s { gp.lambda * (1.0 - gp.alpha) } else { 0.0 }
        });
        let b = DVector::from_fn(m, |r, _| {
            self.c[active[r]] - 0.5 * gp.lambda * gp.alpha * w[active[r]].signum()
        });
        let wa = DVector::from_fn(m, |r, _| w[active[r]]);
        let eig = a.clone().symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
        let mut null_dir = DVector::zeros(m);
        let mut newton = DVector::zeros(m);
        let resid = &b - &a * &wa;
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            let q = eig.eigenvectors.column(k);
            if ev.abs() <= tol {
                null_dir += q * q.dot(&b);
            } else {
                newton += q * (q.dot(&resid) / ev);
            }
        }
        let scale = b.norm().max(f64::MIN_POSITIVE);
        let (dir, cap) = if null_dir.norm() > 1e-12 * scale {
            (null_dir, f64::INFINITY)
        } else {
            (newton, 1.0)
        };
        if dir.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut step = cap;
        let mut hit = None;
        for (r, &j) in active.iter().enumerate() {
            if dir[r] != 0.0 && dir[r].signum() != w[j].signum() {
                let t = -w[j] / dir[r];
                if t < step {
                    step = t;
                    hit = Some(j);
                }
            }
        }
        if !step.is_finite() {
            return None;
        }
        let mut out = DVector::zeros(w.len());
        for (r, &j) in active.iter().enumerate() {
            out[j] = w[j] + step * dir[r];
        }
        if let Some(j) = hit {
            out[j] = 0.0;
        }
        Some(out)
    }

    /// Coordinate descent with soft-thresholding, warm-started from `w`.
    fn descend(&self, w: &mut DVector<f64>, gp: GridPoint) -> Result<usize> {
        let k = w.len();
        let thresh = 0.5 * gp.lambda * gp.alpha;
        let ridge = gp.lambda * (1.0 - gp.alpha);
        let mut prev = self.objective(w, gp);
        let mut trace = vec![prev];
        let mut prev_signs: Vec<i8> = Vec::new();
        for sweep in 1..=MAX_SWEEPS {
            let mut max_step = 0.0f64;
            for j in 0..k {
                let denom = self.g[(j, j)] + ridge;
                let new = if denom > 0.0 {
                    let gw = pairwise_sum_iter((0..k).map(|l| self.g[(j, l)] * w[l]));
                    let z = self.c[j] - gw + self.g[(j, j)] * w[j];
                    soft_threshold(z, thresh) / denom
                } else {
                    0.0
                };
                max_step = max_step.max((new - w[j]).abs());
                w[j] = new;
            }
            let obj = self.objective(w, gp);
            let slack = 1e-12 * prev.abs().max(self.yy).max(f64::MIN_POSITIVE);
            assert!(
                obj <= prev + slack,
                "coordinate descent objective increased: {prev} -> {obj}"
            );
            prev = obj;
            if sweep.is_power_of_two() {
                trace.push(obj);
            }
            if max_step <= CD_TOL {
                return Ok(sweep);
            }
            let signs: Vec<i8> = w.iter().map(|v| v.signum() as i8 * i8::from(*v != 0.0)).collect();
            if signs == prev_signs {
                if let Some(p) = self.polish(w, gp) {
                    let po = self.objective(&p, gp);
                    // Near a flat face minimizer the two objectives differ
                    // only by rounding; accept within the monotonicity slack.
                    if po <= prev + slack {
                        *w = p;
                        prev = po;
                    }
                }
            }
            prev_signs = signs;
        }
        trace.push(prev);
        Err(Error::SynthConvergence {
            sweeps: MAX_SWEEPS,
            final_objective: prev,
            objective_trace: trace,
        })
    }
}

/// Column scales: 1 for control-unit columns; extra predictors are rescaled
/// to the spread of the control outcomes.
fn column_scales(x: &DMatrix<f64>, n_controls: usize) -> Vec<f64> {
    let ctrl: Vec<f64> = (0..n_controls).flat_map(|j| x.column(j).iter().copied().collect::<Vec<_>>()).collect();
    let target = sample_sd(&ctrl);
    (0..x.ncols())
        .map(|j| {
            if j < n_controls {
                return 1.0;
            }
            let sd = sample_sd(x.column(j).as_slice());
            if sd > 0.0 && target.is_finite() && target > 0.0 {
                target / sd
            } else {
                1.0
            }
        })
        .collect()
}

fn scaled(x: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * s[j])
}

/// Minimizes ‖y − μ − Xω‖² + λ(α‖ω‖₁ + (1 − α)‖ω‖₂²) over the pre-period.
pub fn fit_synth(p: &SynthProblem, lambda: f64, alpha: f64) -> Result<SynthFit> {
    fit_synth_from(p, GridPoint::new(lambda, alpha)?, None)
}

fn fit_synth_from(p: &SynthProblem, gp: GridPoint, start: Option<&DVector<f64>>) -> Result<SynthFit> {
    p.validate()?;
    let s = column_scales(&p.controls_pre, p.n_controls);
    let xs = scaled(&p.controls_pre, &s);
    let (gram, xbar, ybar) = Gram::new(&xs, &p.treated_pre);
    let mut w = match start {
        Some(w0) => DVector::from_fn(w0.len(), |j, _| w0[j] / s[j]),
        None => DVector::zeros(xs.ncols()),
    };
    let sweeps = gram.descend(&mut w, gp)?;
    let mu = ybar - xbar.dot(&w);
    let omega = DVector::from_fn(w.len(), |j, _| w[j] * s[j]);
    Ok(assemble(p, mu, omega, gp, sweeps))
}

fn predict_row(x: &DMatrix<f64>, i: usize, mu: f64, omega: &DVector<f64>) -> f64 {
    mu + pairwise_sum_iter((0..x.ncols()).map(|j| x[(i, j)] * omega[j]))
}

fn assemble(p: &SynthProblem, mu: f64, omega: DVector<f64>, gp: GridPoint, sweeps: usize) -> SynthFit {
    let mut gaps = Vec::with_capacity(p.pre_years.len() + p.post_years.len());
    for i in 0..p.pre_years.len() {
        gaps.push(p.treated_pre[i] - predict_row(&p.controls_pre, i, mu, &omega));
    }
    for i in 0..p.post_years.len() {
        gaps.push(p.treated_post[i] - predict_row(&p.controls_post, i, mu, &omega));
    }
    let pre_rmse = pre_rmse_of(&gaps[..p.pre_years.len()]);
    SynthFit {
        unit: p.unit.clone(),
        mu,
        omega,
        lambda: gp.lambda,
        alpha: gp.alpha,
        pre_rmse,
        pre_years: p.pre_years.clone(),
        post_years: p.post_years.clone(),
        gaps,
        sweeps,
    }
}

pub fn pre_rmse_of(pre_gaps: &[f64]) -> f64 {
    (pairwise_sum_iter(pre_gaps.iter().map(|g| g * g)) / pre_gaps.len() as f64).sqrt()
}

/// Validation MSE per grid point for one pseudo-treated series, with warm
/// starts along decreasing λ for each α.
fn cv_path(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    n_controls: usize,
    n_fit: usize,
    grid: &[GridPoint],
) -> Result<Vec<f64>> {
    let t = y.len();
    let s = column_scales(&x.rows(0, n_fit).into_owned(), n_controls);
    let xs = scaled(x, &s);
    let xf = xs.rows(0, n_fit).into_owned();
    let yf = y.rows(0, n_fit).into_owned();
    let (gram, xbar, ybar) = Gram::new(&xf, &yf);
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        grid[a]
            .alpha
            .total_cmp(&grid[b].alpha)
            .then(grid[b].lambda.total_cmp(&grid[a].lambda))
    });
    let mut out = vec![0.0; grid.len()];
    let mut w = DVector::zeros(xs.ncols());
    let mut last_alpha = f64::NAN;
    for gi in order {
        let gp = grid[gi];
        if gp.alpha != last_alpha {
            w = DVector::zeros(xs.ncols());
            last_alpha = gp.alpha;
        }
        gram.descend(&mut w, gp)?;
        let mu = ybar - xbar.dot(&w);
        let errs: Vec<f64> = (n_fit..t)
            .map(|i| {
                let e = y[i] - predict_row(&xs, i, mu, &w);
                e * e
            })
            .collect();
        out[gi] = mean(&errs);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best: GridPoint,
    /// Average validation MSE per grid point, in grid order.
    pub mse: Vec<f64>,
}

/// Number of leading pre-years used for fitting inside cross-validation.
pub fn cv_fit_len(t: usize) -> usize {
    3 * t / 4
}

/// Leave-one-control-out cross-validation over the grid. Each control is
/// predicted from the others (plus extra predictor columns) on the first
/// three quarters of the pre-period and scored on the rest.
pub fn cross_validate(
    controls_pre: &DMatrix<f64>,
    extra_pre: Option<&DMatrix<f64>>,
    grid: &[GridPoint],
) -> Result<CvResult> {
    let j = controls_pre.ncols();
    if j < 3 {
        return Err(Error::CrossValidation(format!("need at least 3 controls, got {j}")));
    }
    if grid.is_empty() {
        return Err(Error::CrossValidation("empty grid".into()));
    }
    let t = controls_pre.nrows();
    let n_fit = cv_fit_len(t);
    if n_fit < 2 || n_fit >= t {
        return Err(Error::CrossValidation(format!(
            "pre-period of {t} years is too short to split into fit and validation years"
        )));
    }
    let n_extra = extra_pre.map_or(0, |e| e.ncols());
    if let Some(e) = extra_pre {
        if e.nrows() != t {
            return Err(Error::Alignment("extra predictors do not match pre-years".into()));
        }
    }
    let per_unit: Vec<Vec<f64>> = (0..j)
        .into_par_iter()
        .map(|u| {
            let y = controls_pre.column(u).into_owned();
            let x = DMatrix::from_fn(t, j - 1 + n_extra, |i, c| {
                if c < j - 1 {
                    controls_pre[(i, if c < u { c } else { c + 1 })]
                } else {
                    extra_pre.unwrap()[(i, c - (j - 1))]
                }
            });
            cv_path(&y, &x, j - 1, n_fit, grid)
        })
        .collect::<Result<_>>()?;
    let mse: Vec<f64> = (0..grid.len())
        .map(|g| pairwise_sum_iter(per_unit.iter().map(|m| m[g])) / j as f64)
        .collect();
    Ok(CvResult { best: grid[select(grid, &mse)], mse })
}

/// Lowest MSE; ties go to the smaller λ, then the larger α.
fn select(grid: &[GridPoint], mse: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        grid[a]
            .lambda
            .total_cmp(&grid[b].lambda)
            .then(grid[b].alpha.total_cmp(&grid[a].alpha))
    });
    let mut best = order[0];
    for &i in &order[1..] {
        let (m, b) = (mse[i], mse[best]);
        if m < b && (b - m) > TIE_RTOL * m.abs().max(b.abs()) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentPath {
    pub years: Vec<i32>,
    pub n_pre: usize,
    /// Cross-unit mean gap per year.
    pub eta: Vec<f64>,
    /// Mean of `eta` over post-years.
    pub post_mean: f64,
}

impl TreatmentPath {
    pub fn post_years(&self) -> &[i32] {
        &self.years[self.n_pre..]
    }
}

/// Average gaps across treated units by year.
pub fn treatment_path(fits: &[SynthFit]) -> Result<TreatmentPath> {
    let first = fits.first().ok_or_else(|| Error::Alignment("no fits to average".into()))?;
    for f in fits {
        if f.pre_years != first.pre_years || f.post_years != first.post_years {
            return Err(Error::Alignment(format!(
                "unit `{}` has different year labels from `{}`",
                f.unit, first.unit
            )));
        }
    }
    let years = first.years();
    let eta: Vec<f64> = (0..years.len())
        .map(|t| pairwise_sum_iter(fits.iter().map(|f| f.gaps[t])) / fits.len() as f64)
        .collect();
    let n_pre = first.pre_years.len();
    let post_mean = mean(&eta[n_pre..]);
    Ok(TreatmentPath { years, n_pre, eta, post_mean })
}

/// Control and treated outcome matrices assembled from a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub pre_years: Vec<i32>,
    pub post_years: Vec<i32>,
    pub control_names: Vec<String>,
    /// Rows are years, columns are control units.
    pub controls_pre: DMatrix<f64>,
    pub controls_post: DMatrix<f64>,
    pub extra_names: Vec<String>,
    pub extra_pre: DMatrix<f64>,
    pub extra_post: DMatrix<f64>,
    pub treated: Vec<(String, DVector<f64>, DVector<f64>)>,
}

impl SynthData {
    /// Treated units are those in the treated state; everything else is a
    /// control. `outcome` names the outcome role or a covariate. Extra
    /// predictors are covariates read from each year's first row.
    pub fn from_panel(ds: &PanelDataset, outcome: &str, extras: &[String]) -> Result<Self> {
        if ds.is_stacked() {
            return Err(Error::Design("synthetic control needs an unstacked panel".into()));
        }
        let years = ds.years();
        let t0 = ds.treatment().year;
        let pre_years: Vec<i32> = years.iter().copied().filter(|&y| y < t0).collect();
        let post_years: Vec<i32> = years.iter().copied().filter(|&y| y >= t0).collect();
        let vals = ds.column(outcome)?;
        let mut by_unit: BTreeMap<&str, (bool, BTreeMap<i32, f64>)> = BTreeMap::new();
        let mut extra_by_year: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
        let extra_cols = extras.iter().map(|e| ds.column(e)).collect::<Result<Vec<_>>>()?;
        for (i, o) in ds.observations().iter().enumerate() {
            let e = by_unit.entry(o.unit.as_str()).or_insert((ds.is_treated(o), BTreeMap::new()));
            e.1.insert(o.year, vals[i]);
            extra_by_year
                .entry(o.year)
                .or_insert_with(|| extra_cols.iter().map(|c| c[i]).collect());
        }
        let series = |m: &BTreeMap<i32, f64>, ys: &[i32], unit: &str| -> Result<DVector<f64>> {
            let v = ys
                .iter()
                .map(|y| {
                    m.get(y).copied().ok_or_else(|| {
                        Error::Alignment(format!("unit `{unit}` has no observation in {y}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DVector::from_vec(v))
        };
        let mut control_names = Vec::new();
        let (mut cpre, mut cpost) = (Vec::new(), Vec::new());
        let mut treated = Vec::new();
        for (u, (is_t, m)) in &by_unit {
            let pre = series(m, &pre_years, u)?;
            let post = series(m, &post_years, u)?;
            if *is_t {
                treated.push((u.to_string(), pre, post));
            } else {
                control_names.push(u.to_string());
                cpre.push(pre);
                cpost.push(post);
            }
        }
        if treated.is_empty() || control_names.is_empty() {
            return Err(Error::Design("synthetic control needs treated and control units".into()));
        }
        let matrix = |ys: &[i32]| {
            DMatrix::from_fn(ys.len(), extras.len(), |i, c| extra_by_year[&ys[i]][c])
        };
        Ok(SynthData {
            controls_pre: DMatrix::from_columns(&cpre),
            controls_post: DMatrix::from_columns(&cpost),
            extra_pre: matrix(&pre_years),
            extra_post: matrix(&post_years),
            extra_names: extras.to_vec(),
            pre_years,
            post_years,
            control_names,
            treated,
        })
    }

    fn donors(&self, exclude: Option<usize>) -> (DMatrix<f64>, DMatrix<f64>, Vec<String>, usize) {
        let keep: Vec<usize> =
            (0..self.control_names.len()).filter(|&j| Some(j) != exclude).collect();
        let n = keep.len();
        let build = |c: &DMatrix<f64>, e: &DMatrix<f64>| {
            DMatrix::from_fn(c.nrows(), n + e.ncols(), |i, k| {
                if k < n {
                    c[(i, keep[k])]
                } else {
                    e[(i, k - n)]
                }
            })
        };
        let mut names: Vec<String> = keep.iter().map(|&j| self.control_names[j].clone()).collect();
        names.extend(self.extra_names.iter().cloned());
        (
            build(&self.controls_pre, &self.extra_pre),
            build(&self.controls_post, &self.extra_post),
            names,
            n,
        )
    }

    fn extra_pre_opt(&self) -> Option<&DMatrix<f64>> {
        (self.extra_pre.ncols() > 0).then_some(&self.extra_pre)
    }

    /// Problem for the `i`-th treated unit against all controls.
    pub fn problem(&self, i: usize) -> Result<SynthProblem> {
        let (unit, pre, post) = &self.treated[i];
        let (xp, xq, names, n) = self.donors(None);
        SynthProblem::new(
            unit.clone(),
            pre.clone(),
            post.clone(),
            xp,
            xq,
            names,
            n,
            self.pre_years.clone(),
            self.post_years.clone(),
        )
    }

    fn placebo_problem(&self, j: usize) -> Result<SynthProblem> {
        let (xp, xq, names, n) = self.donors(Some(j));
        SynthProblem::new(
            self.control_names[j].clone(),
            self.controls_pre.column(j).into_owned(),
            self.controls_post.column(j).into_owned(),
            xp,
            xq,
            names,
            n,
            self.pre_years.clone(),
            self.post_years.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceboResult {
    pub fits: Vec<SynthFit>,
    /// Post-period mean gap per placebo unit.
    pub post_means: Vec<f64>,
    /// Rank of each placebo by |post mean|, 1 = largest.
    pub ranks: Vec<usize>,
    /// Mean placebo post-period effect.
    pub eta_c: f64,
}

impl PlaceboResult {
    /// Randomization p-value of an effect against the placebo distribution:
    /// (1 + #{|placebo| ≥ |effect|}) / (n + 1).
    pub fn p_value(&self, effect: f64) -> f64 {
        let n = self.post_means.len();
        let hits = self.post_means.iter().filter(|m| m.abs() >= effect.abs()).count();
        (1 + hits) as f64 / (n + 1) as f64
    }
}

/// Runs every control through the full pipeline as a pseudo-treated unit
/// against the remaining controls. When fewer than three donors remain,
/// cross-validation is impossible and `fallback` is used.
pub fn placebo_suite(data: &SynthData, grid: &[GridPoint], fallback: GridPoint) -> Result<PlaceboResult> {
    let j = data.control_names.len();
    if j < 3 {
        return Err(Error::CrossValidation(format!("placebo suite needs at least 3 controls, got {j}")));
    }
    let fits: Vec<SynthFit> = (0..j)
        .into_par_iter()
        .map(|u| {
            let p = data.placebo_problem(u)?;
            let gp = if p.n_controls >= 3 {
                let cpre = p.controls_pre.columns(0, p.n_controls).into_owned();
                let epre = p.controls_pre.columns(p.n_controls, p.controls_pre.ncols() - p.n_controls).into_owned();
                cross_validate(&cpre, (epre.ncols() > 0).then_some(&epre), grid)?.best
            } else {
                fallback
            };
            fit_synth_from(&p, gp, None)
        })
        .collect::<Result<_>>()?;
    let post_means: Vec<f64> = fits.iter().map(|f| f.post_mean()).collect();
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| post_means[b].abs().total_cmp(&post_means[a].abs()).then(a.cmp(&b)));
    let mut ranks = vec![0; j];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    let eta_c = mean(&post_means);
    Ok(PlaceboResult { fits, post_means, ranks, eta_c })
}

/// Everything a synthetic-control run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRun {
    pub cv: CvResult,
    pub fits: Vec<SynthFit>,
    pub path: TreatmentPath,
    pub placebo: Option<PlaceboResult>,
    /// Randomization p-value of the averaged post effect.
    pub p_value: Option<f64>,
}

/// Cross-validate on the controls, fit every treated unit, average, and
/// optionally run the placebo suite.
pub fn run(data: &SynthData, grid: &[GridPoint], placebos: bool) -> Result<SynthRun> {
    let cv = cross_validate(&data.controls_pre, data.extra_pre_opt(), grid)?;
    let fits = (0..data.treated.len())
        .into_par_iter()
        .map(|i| fit_synth_from(&data.problem(i)?, cv.best, None))
        .collect::<Result<Vec<_>>>()?;
    let path = treatment_path(&fits)?;
    let placebo = if placebos { Some(placebo_suite(data, grid, cv.best)?) } else { None };
    let p_value = placebo.as_ref().map(|p| p.p_value(path.post_mean));
    Ok(SynthRun { cv, fits, path, placebo, p_value })
}

/// Objective value of a fit on its own problem; exposed for checks.
pub fn objective(p: &SynthProblem, mu: f64, omega: &DVector<f64>, gp: GridPoint) -> f64 {
    let r: Vec<f64> = (0..p.pre_years.len())
        .map(|i| {
            let e = p.treated_pre[i] - predict_row(&p.controls_pre, i, mu, omega);
            e * e
        })
        .collect();
    let l1: f64 = omega.iter().map(|v| v.abs()).sum();
    pairwise_sum(&r) + gp.lambda * (gp.alpha * l1 + (1.0 - gp.alpha) * omega.norm_squared())
}

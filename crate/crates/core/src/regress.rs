//! Weighted least squares with multi-way fixed effects absorbed by
//! alternating projections.
//!
//! Rows are put into a canonical order (unit, year, stack tag) before any
//! arithmetic, and every reduction is a pairwise sum, so coefficients do not
//! depend on input row order or thread count.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::panel::{FeDim, Observation, PanelDataset};

/// One multiplicative factor of a regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    /// Outcome, weight, year, or a covariate.
    Column(String),
    /// 1 for observations in the treated state.
    Treated,
    /// 1 for years at or after the treatment year.
    Post,
    /// 1 for a single calendar year.
    YearIs(i32),
    /// Linear time trend, years since the first year of the dataset.
    Trend,
    Constant,
}

/// A regressor definition. Group-expanded terms produce one column per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Product { name: String, factors: Vec<Factor> },
    /// `factors × 1[dim = level]` for every level of `dim`.
    ByLevel { name: String, factors: Vec<Factor>, dim: FeDim },
    /// Indicator per level of a dimension.
    Dummies { dim: FeDim },
}

impl Term {
    pub fn product(name: impl Into<String>, factors: Vec<Factor>) -> Self {
        Term::Product { name: name.into(), factors }
    }

    pub fn column(name: &str) -> Self {
        Term::product(name, vec![Factor::Column(name.into())])
    }

    pub fn intercept() -> Self {
        Term::product("(intercept)", vec![Factor::Constant])
    }

    /// Linear trend interacted with state dummies.
    pub fn state_trends() -> Self {
        Term::ByLevel { name: "trend".into(), factors: vec![Factor::Trend], dim: FeDim::State }
    }

    /// Linear trend interacted with MSA dummies.
    pub fn msa_trends() -> Self {
        Term::ByLevel { name: "trend".into(), factors: vec![Factor::Trend], dim: FeDim::Msa }
    }

    /// A national series (e.g. oil prices) interacted with MSA dummies.
    pub fn by_msa(col: &str) -> Self {
        Term::ByLevel {
            name: col.to_string(),
            factors: vec![Factor::Column(col.into())],
            dim: FeDim::Msa,
        }
    }

    fn indicator_dim(&self) -> Option<FeDim> {
        match self {
            Term::Dummies { dim } => Some(*dim),
            Term::ByLevel { factors, dim, .. }
                if factors.iter().all(|f| matches!(f, Factor::Constant)) =>
            {
                Some(*dim)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Use each observation's stored weight.
    #[default]
    Column,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub response: String,
    pub regressors: Vec<Term>,
    pub absorb: Vec<FeDim>,
    pub weights: Weighting,
    /// Relative tolerance on the largest per-group weighted mean.
    pub tol: f64,
    pub max_iter: usize,
}

impl DesignSpec {
    pub const DEFAULT_TOL: f64 = 1e-10;
    pub const DEFAULT_MAX_ITER: usize = 10_000;

    pub fn new(response: &str, regressors: Vec<Term>, absorb: Vec<FeDim>) -> Result<Self> {
        let spec = DesignSpec {
            response: response.into(),
            regressors,
            absorb,
            weights: Weighting::Column,
            tol: Self::DEFAULT_TOL,
            max_iter: Self::DEFAULT_MAX_ITER,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_weights(mut self, w: Weighting) -> Self {
        self.weights = w;
        self
    }

    /// Dummy sets for an absorbed dimension are collinear with it by
    /// construction and are rejected.
    pub fn validate(&self) -> Result<()> {
        for t in &self.regressors {
            if let Some(d) = t.indicator_dim() {
                if self.absorb.contains(&d) {
                    return Err(Error::Design(format!(
                        "dummy set for `{}` duplicates an absorbed dimension",
                        d.name()
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for d in &self.absorb {
            if !seen.insert(*d) {
                return Err(Error::Design(format!("dimension `{}` absorbed twice", d.name())));
            }
        }
        Ok(())
    }
}

/// Design matrix before absorption, in the dataset's row order.
#[derive(Debug, Clone)]
pub struct RawDesign {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub response: Vec<f64>,
    pub weights: Vec<f64>,
}

fn factor_value(ds: &PanelDataset, o: &Observation, f: &Factor, first_year: i32) -> Result<f64> {
    Ok(match f {
        Factor::Column(c) => match c.as_str() {
            "outcome" => o.outcome,
            "weight" => o.weight,
            "year" => f64::from(o.year),
            _ => {
                let j = ds
                    .covariate_index(c)
                    .ok_or_else(|| Error::Design(format!("unknown column `{c}`")))?;
                o.covariates[j]
            }
        },
        Factor::Treated => f64::from(u8::from(ds.is_treated(o))),
        Factor::Post => f64::from(u8::from(ds.is_post(o))),
        Factor::YearIs(y) => f64::from(u8::from(o.year == *y)),
        Factor::Trend => f64::from(o.year - first_year),
        Factor::Constant => 1.0,
    })
}

/// Expand the spec's terms into named columns.
pub fn build_design(ds: &PanelDataset, spec: &DesignSpec) -> Result<RawDesign> {
    spec.validate()?;
    let first_year = ds.year_span().map(|s| s.0).unwrap_or(0);
    let obs = ds.observations();
    let product = |factors: &[Factor]| -> Result<Vec<f64>> {
        obs.iter()
            .map(|o| {
                factors
                    .iter()
                    .try_fold(1.0, |acc, f| Ok(acc * factor_value(ds, o, f, first_year)?))
            })
            .collect()
    };
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for t in &spec.regressors {
        match t {
            Term::Product { name, factors } => {
                names.push(name.clone());
                columns.push(product(factors)?);
            }
            Term::ByLevel { name, factors, dim } => {
                let base = product(factors)?;
                let codes = ds.fe_codes(*dim)?;
                let labels = level_labels(ds, *dim, &codes.codes, codes.n_levels);
                for (lvl, label) in labels.iter().enumerate() {
                    names.push(format!("{name}[{label}]"));
                    columns.push(
                        base.iter()
                            .zip(&codes.codes)
                            .map(|(v, &c)| if c == lvl { *v } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Term::Dummies { dim } => {
                let codes = ds.fe_codes(*dim)?;
                let labels = level_labels(ds, *dim, &codes.codes, codes.n_levels);
                for (lvl, label) in labels.iter().enumerate() {
                    names.push(format!("{}[{label}]", dim.name()));
                    columns.push(
                        codes.codes.iter().map(|&c| f64::from(u8::from(c == lvl))).collect(),
                    );
                }
            }
        }
    }
    let response = ds.column(&spec.response)?;
    let weights = match spec.weights {
        Weighting::Column => obs.iter().map(|o| o.weight).collect(),
        Weighting::Uniform => vec![1.0; obs.len()],
    };
    Ok(RawDesign { names, columns, response, weights })
}

fn level_labels(ds: &PanelDataset, dim: FeDim, codes: &[usize], n: usize) -> Vec<String> {
    let mut labels = vec![String::new(); n];
    for (o, &c) in ds.observations().iter().zip(codes) {
        if labels[c].is_empty() {
            labels[c] = dim.key(o).unwrap_or_default();
        }
    }
    labels
}

/// Row permutation into (unit, year, stack tag) order: `perm[k]` is the
/// original index of canonical row `k`.
pub(crate) fn canonical_order(ds: &PanelDataset) -> Vec<usize> {
    let obs = ds.observations();
    let mut perm: Vec<usize> = (0..obs.len()).collect();
    perm.sort_by(|&a, &b| {
        let (x, y) = (&obs[a], &obs[b]);
        (&x.unit, x.year, &x.stack_tag).cmp(&(&y.unit, y.year, &y.stack_tag))
    });
    perm
}

/// Group membership of one absorbed dimension, over canonical rows.
#[derive(Debug, Clone)]
struct Groups {
    codes: Vec<usize>,
    members: Vec<Vec<usize>>,
    weight_sums: Vec<f64>,
}

impl Groups {
    fn new(codes: Vec<usize>, n_levels: usize, w: &[f64]) -> Self {
        let mut members = vec![Vec::new(); n_levels];
        for (i, &c) in codes.iter().enumerate() {
            members[c].push(i);
        }
        let weight_sums = members
            .iter()
            .map(|m| pairwise_sum(&m.iter().map(|&i| w[i]).collect::<Vec<_>>()))
            .collect();
        Groups { codes, members, weight_sums }
    }

    fn means(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut buf = Vec::new();
        self.members
            .iter()
            .zip(&self.weight_sums)
            .map(|(m, &ws)| {
                buf.clear();
                buf.extend(m.iter().map(|&i| w[i] * x[i]));
                pairwise_sum(&buf) / ws
            })
            .collect()
    }
}

fn demean_column(
    x: &mut [f64],
    w: &[f64],
    groups: &[Groups],
    tol: f64,
    max_iter: usize,
) -> Result<usize> {
    if groups.is_empty() {
        return Ok(0);
    }
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut last = f64::INFINITY;
    for iter in 1..=max_iter {
        for g in groups {
            let m = g.means(x, w);
            for (xi, &c) in x.iter_mut().zip(&g.codes) {
                *xi -= m[c];
            }
        }
        if groups.len() == 1 {
            return Ok(iter);
        }
        last = groups
            .iter()
            .flat_map(|g| g.means(x, w))
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if last <= tol * scale {
            return Ok(iter);
        }
    }
    Err(Error::Convergence { iterations: max_iter, last_norm: last })
}

/// Response and regressors after within-group demeaning.
#[derive(Debug, Clone)]
pub struct Absorbed {
    pub names: Vec<String>,
    /// Demeaned regressors, in the dataset's row order.
    pub columns: Vec<Vec<f64>>,
    pub response: Vec<f64>,
    pub weights: Vec<f64>,
    /// Largest iteration count over all columns.
    pub iterations: usize,
    /// Number of fixed-effect parameters absorbed, net of redundancies.
    pub absorbed_levels: usize,
}

/// Alternating weighted within-group demeaning over every absorbed
/// dimension. One absorbed dimension converges in a single pass; none is the
/// identity.
pub fn absorb_fixed_effects(ds: &PanelDataset, spec: &DesignSpec) -> Result<Absorbed> {
    let raw = build_design(ds, spec)?;
    absorb_raw(ds, spec, raw)
}

fn absorb_raw(ds: &PanelDataset, spec: &DesignSpec, raw: RawDesign) -> Result<Absorbed> {
    let perm = canonical_order(ds);
    let to_canon = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let w = to_canon(&raw.weights);

    let mut groups = Vec::with_capacity(spec.absorb.len());
    for &d in &spec.absorb {
        let fc = ds.fe_codes(d)?;
        if fc.n_levels < 2 {
            return Err(Error::Design(format!(
                "absorbed dimension `{}` has fewer than two levels",
                d.name()
            )));
        }
        let codes = perm.iter().map(|&i| fc.codes[i]).collect();
        groups.push(Groups::new(codes, fc.n_levels, &w));
    }
    let absorbed_levels = absorbed_dof(&groups, ds.len());

    let mut cols: Vec<Vec<f64>> = std::iter::once(&raw.response)
        .chain(raw.columns.iter())
        .map(|c| to_canon(c))
        .collect();
    let iters: Vec<usize> = cols
        .par_iter_mut()
        .map(|c| demean_column(c, &w, &groups, spec.tol, spec.max_iter))
        .collect::<Result<_>>()?;

    let back = |c: &[f64]| {
        let mut out = vec![0.0; c.len()];
        for (k, &i) in perm.iter().enumerate() {
            out[i] = c[k];
        }
        out
    };
    let response = back(&cols[0]);
    let columns = cols[1..].iter().map(|c| back(c)).collect();
    cols.clear();
    Ok(Absorbed {
        names: raw.names,
        columns,
        response,
        weights: raw.weights,
        iterations: iters.into_iter().max().unwrap_or(0),
        absorbed_levels,
    })
}

/// Absorbed fixed-effect parameter count. A dimension nested in an earlier
/// one contributes nothing; the second non-nested dimension loses one level
/// per connected component of the bipartite level graph; later dimensions
/// lose one level each.
fn absorbed_dof(groups: &[Groups], n: usize) -> usize {
    let mut total = 0usize;
    let mut kept: Vec<&Groups> = Vec::new();
    for g in groups {
        let nested = kept.iter().any(|e| is_coarser(g, e, n));
        if nested {
            continue;
        }
        let levels = g.members.len();
        total += match kept.len() {
            0 => levels,
            1 => levels - components(kept[0], g),
            _ => levels - 1,
        };
        kept.push(g);
    }
    total
}

/// True when every level of `fine` maps into a single level of `coarse`.
fn is_coarser(coarse: &Groups, fine: &Groups, n: usize) -> bool {
    let mut map = vec![usize::MAX; fine.members.len()];
    for i in 0..n {
        let f = fine.codes[i];
        let c = coarse.codes[i];
        if map[f] == usize::MAX {
            map[f] = c;
        } else if map[f] != c {
            return false;
        }
    }
    true
}

fn components(a: &Groups, b: &Groups) -> usize {
    let na = a.members.len();
    let mut parent: Vec<usize> = (0..na + b.members.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (&ca, &cb) in a.codes.iter().zip(&b.codes) {
        let (ra, rb) = (find(&mut parent, ca), find(&mut parent, na + cb));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    (0..parent.len()).filter(|&x| find(&mut parent, x) == x).count()
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// Names of retained regressors, aligned with `coefficients`.
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    /// Residuals in the dataset's row order.
    pub residuals: Vec<f64>,
    /// Demeaned retained regressors (n × k), dataset row order.
    pub demeaned_design: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// (X'WX)^-1 over the retained regressors.
    pub weighted_xtx_inv: DMatrix<f64>,
    pub dof: usize,
    pub absorbed_levels: usize,
    pub absorbed_dims: Vec<FeDim>,
    /// Regressors dropped as collinear, in spec order.
    pub dropped: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub data: Arc<PanelDataset>,
}

impl RegressionFit {
    pub fn n_obs(&self) -> usize {
        self.residuals.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.coefficients[i])
    }

    /// Weighted residual sum of squares.
    pub fn weighted_rss(&self) -> f64 {
        pairwise_sum(
            &self.residuals.iter().zip(&self.weights).map(|(e, w)| w * e * e).collect::<Vec<_>>(),
        )
    }
}

/// Relative threshold below which a demeaned column counts as collinear.
const RANK_TOL: f64 = 1e-9;

/// Weighted least squares with absorbed fixed effects.
pub fn fit_wls(ds: &Arc<PanelDataset>, spec: &DesignSpec) -> Result<RegressionFit> {
    let raw = build_design(ds, spec)?;
    let raw_norms: Vec<f64> = raw
        .columns
        .iter()
        .map(|c| {
            pairwise_sum(&c.iter().zip(&raw.weights).map(|(x, w)| w * x * x).collect::<Vec<_>>())
                .sqrt()
        })
        .collect();
    let ab = absorb_raw(ds, spec, raw)?;
    let n = ab.response.len();
    let perm = canonical_order(ds);
    let sw: Vec<f64> = perm.iter().map(|&i| ab.weights[i].sqrt()).collect();

    // Greedy rank selection in spec order via modified Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in ab.columns.iter().enumerate() {
        let mut v: Vec<f64> = perm.iter().zip(&sw).map(|(&i, s)| col[i] * s).collect();
        for _ in 0..2 {
            for q in &basis {
                let d = dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= d * qi;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if raw_norms[j] > 0.0 && norm > RANK_TOL * raw_norms[j] {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
            kept.push(j);
        } else {
            log::warn!("dropping collinear regressor `{}`", ab.names[j]);
            dropped.push(ab.names[j].clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDesign(ab.names.join(", ")));
    }
    let k = kept.len();

    let xw = DMatrix::from_fn(n, k, |r, c| ab.columns[kept[c]][perm[r]] * sw[r]);
    let yw = DVector::from_fn(n, |r, _| ab.response[perm[r]] * sw[r]);
    let qr = xw.qr();
    let q = qr.q();
    let r = qr.r();
    let qty = DVector::from_fn(k, |c, _| dot(q.column(c).as_slice(), yw.as_slice()));
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Design("singular triangular factor".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Design("singular triangular factor".into()))?;
    let xtx_inv = crate::numeric::symmetrize(&(&r_inv * r_inv.transpose()));

    let demeaned = DMatrix::from_fn(n, k, |r, c| ab.columns[kept[c]][r]);
    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let fitted: Vec<f64> = (0..k).map(|c| demeaned[(i, c)] * beta[c]).collect();
            ab.response[i] - pairwise_sum(&fitted)
        })
        .collect();
    let used = k + ab.absorbed_levels;
    Ok(RegressionFit {
        names: kept.iter().map(|&j| ab.names[j].clone()).collect(),
        coefficients: beta,
        residuals,
        demeaned_design: demeaned,
        weights: ab.weights,
        weighted_xtx_inv: xtx_inv,
        dof: n.saturating_sub(used),
        absorbed_levels: ab.absorbed_levels,
        absorbed_dims: spec.absorb.clone(),
        dropped,
        converged: true,
        iterations: ab.iterations,
        data: Arc::clone(ds),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    pairwise_sum(&a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>())
}

//! Sandwich variance estimators for a [`RegressionFit`].
//!
//! Every estimator has the form `(X'WX)^-1 M (X'WX)^-1` with scores
//! `s_i = w_i e_i x_i` built from the demeaned design, and differs only in
//! the meat `M`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};
use crate::numeric::{pairwise_matrix_sum, pairwise_sum, psd_floor, symmetrize};
use crate::panel::FeDim;
use crate::regress::{canonical_order, RegressionFit};

/// Mean Earth radius (km).
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Uniform,
    #[default]
    Bartlett,
}

impl Kernel {
    /// Weight for a pair of distinct observations at distance `d`.
    fn weight(self, d: f64, cutoff: f64) -> f64 {
        if d >= cutoff {
            return 0.0;
        }
        match self {
            Kernel::Uniform => 1.0,
            Kernel::Bartlett => 1.0 - d / cutoff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceKind {
    Classical,
    HcRobust,
    Cluster { dim: FeDim },
    TwoWayCluster { dim_a: FeDim, dim_b: FeDim },
    /// Conley-type spatial HAC among observations in the same year.
    Spatial {
        #[serde(default = "default_cutoff")]
        cutoff_km: f64,
        #[serde(default)]
        kernel: Kernel,
    },
}

fn default_cutoff() -> f64 {
    100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallSample {
    None,
    /// `G/(G-1) · (N-1)/(N-K)`.
    ClusterCountCorrection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariancePlan {
    #[serde(flatten)]
    pub kind: VarianceKind,
    /// Defaults to the cluster-count correction for clustered plans and to
    /// none otherwise.
    #[serde(default)]
    pub small_sample: Option<SmallSample>,
}

impl VariancePlan {
    pub fn new(kind: VarianceKind) -> Self {
        VariancePlan { kind, small_sample: None }
    }

    pub fn classical() -> Self {
        Self::new(VarianceKind::Classical)
    }

    pub fn hc() -> Self {
        Self::new(VarianceKind::HcRobust)
    }

    pub fn cluster(dim: FeDim) -> Self {
        Self::new(VarianceKind::Cluster { dim })
    }

    pub fn two_way(dim_a: FeDim, dim_b: FeDim) -> Self {
        Self::new(VarianceKind::TwoWayCluster { dim_a, dim_b })
    }

    pub fn spatial(cutoff_km: f64, kernel: Kernel) -> Self {
        Self::new(VarianceKind::Spatial { cutoff_km, kernel })
    }

    pub fn with_small_sample(mut self, s: SmallSample) -> Self {
        self.small_sample = Some(s);
        self
    }

    pub fn small_sample(&self) -> SmallSample {
        self.small_sample.unwrap_or(match self.kind {
            VarianceKind::Cluster { .. } | VarianceKind::TwoWayCluster { .. } => {
                SmallSample::ClusterCountCorrection
            }
            _ => SmallSample::None,
        })
    }

    /// Short identifier used for `se_<name>` report columns.
    pub fn name(&self) -> String {
        match &self.kind {
            VarianceKind::Classical => "classical".into(),
            VarianceKind::HcRobust => "hc".into(),
            VarianceKind::Cluster { dim } => format!("cluster_{}", dim.name()),
            VarianceKind::TwoWayCluster { dim_a, dim_b } => {
                format!("twoway_{}_{}", dim_a.name(), dim_b.name())
            }
            VarianceKind::Spatial { cutoff_km, kernel } => {
                let k = match kernel {
                    Kernel::Uniform => "uniform",
                    Kernel::Bartlett => "bartlett",
                };
                format!("spatial_{k}_{cutoff_km}km")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct VarianceResult {
    pub plan: VariancePlan,
    pub names: Vec<String>,
    pub vcov: DMatrix<f64>,
    pub se: DVector<f64>,
    /// Cluster counts per clustering dimension (empty for unclustered plans).
    pub n_clusters: Vec<(String, usize)>,
    pub psd_adjusted: bool,
    /// Degrees of freedom for t and F reference distributions.
    pub df: usize,
}

impl VarianceResult {
    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.se[i])
    }

    /// Two-sided p-value of `estimate / se` against Student's t.
    pub fn p_value(&self, estimate: f64, se: f64) -> f64 {
        t_p_value(estimate / se, self.df)
    }

    /// Critical value for a two-sided interval at level `1 - alpha`.
    pub fn critical_value(&self, alpha: f64) -> f64 {
        t_critical(alpha, self.df)
    }

    /// Wald statistic `b' V^-1 b` for the named coefficients together with
    /// its F-based p-value (statistic / q against F(q, df)).
    pub fn wald(&self, fit: &RegressionFit, names: &[String]) -> Result<(f64, f64)> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                fit.index_of(n)
                    .ok_or_else(|| Error::Inference(format!("coefficient `{n}` not in fit")))
            })
            .collect::<Result<_>>()?;
        let q = idx.len();
        if q == 0 {
            return Err(Error::Inference("Wald test over zero coefficients".into()));
        }
        let b = DVector::from_fn(q, |r, _| fit.coefficients[idx[r]]);
        let v = DMatrix::from_fn(q, q, |r, c| self.vcov[(idx[r], idx[c])]);
        let vinv = v
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| v.pseudo_inverse(1e-12).ok())
            .ok_or_else(|| Error::Inference("singular covariance in Wald test".into()))?;
        let w = (b.transpose() * vinv * &b)[(0, 0)];
        let p = if self.df == 0 {
            f64::NAN
        } else {
            let f = FisherSnedecor::new(q as f64, self.df as f64)
                .map_err(|e| Error::Inference(e.to_string()))?;
            1.0 - f.cdf(w / q as f64)
        };
        Ok((w, p))
    }
}

pub fn t_p_value(t: f64, df: usize) -> f64 {
    if !t.is_finite() || df == 0 {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

pub fn t_critical(alpha: f64, df: usize) -> f64 {
    if df == 0 {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("valid t distribution");
    dist.inverse_cdf(1.0 - alpha / 2.0)
}

/// Haversine distance in km.
pub fn great_circle_km(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for &(lat, lon) in &[a, b] {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Domain(format!("coordinate ({lat}, {lon}) out of range")));
        }
    }
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = p2 - p1;
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

/// Scores in canonical row order.
struct Scores {
    /// `rows[i]` is the score vector of canonical row `i`.
    rows: Vec<DVector<f64>>,
    /// Original dataset index of canonical row `i`.
    perm: Vec<usize>,
    k: usize,
}

impl Scores {
    fn new(fit: &RegressionFit) -> Self {
        let perm = canonical_order(&fit.data);
        let k = fit.names.len();
        let rows = perm
            .iter()
            .map(|&i| {
                let we = fit.weights[i] * fit.residuals[i];
                DVector::from_fn(k, |c, _| we * fit.demeaned_design[(i, c)])
            })
            .collect();
        Scores { rows, perm, k }
    }

    fn outer_sum(&self, vecs: &[DVector<f64>]) -> DMatrix<f64> {
        let k = self.k;
        DMatrix::from_fn(k, k, |r, c| {
            pairwise_sum(&vecs.iter().map(|v| v[r] * v[c]).collect::<Vec<_>>())
        })
    }

    fn hc_meat(&self) -> DMatrix<f64> {
        self.outer_sum(&self.rows)
    }

    /// Meat summing within groups given per-canonical-row group codes.
    fn cluster_meat(&self, codes: &[usize], n_groups: usize) -> DMatrix<f64> {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for (i, &g) in codes.iter().enumerate() {
            members[g].push(i);
        }
        let sums: Vec<DVector<f64>> = members
            .iter()
            .filter(|m| !m.is_empty())
            .map(|m| {
                DVector::from_fn(self.k, |c, _| {
                    pairwise_sum(&m.iter().map(|&i| self.rows[i][c]).collect::<Vec<_>>())
                })
            })
            .collect();
        self.outer_sum(&sums)
    }
}

fn group_codes(fit: &RegressionFit, perm: &[usize], dims: &[FeDim]) -> Result<(Vec<usize>, usize)> {
    let obs = fit.data.observations();
    let mut keys = Vec::with_capacity(perm.len());
    for &i in perm {
        let mut key = Vec::with_capacity(dims.len());
        for d in dims {
            key.push(d.key(&obs[i]).ok_or_else(|| {
                Error::Inference(format!("cluster dimension `{}` does not resolve", d.name()))
            })?);
        }
        keys.push(key);
    }
    let mut index: BTreeMap<&Vec<String>, usize> = BTreeMap::new();
    for k in &keys {
        index.entry(k).or_insert(0);
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let codes = keys.iter().map(|k| index[k]).collect();
    Ok((codes, index.len()))
}

fn sandwich(bread: &DMatrix<f64>, meat: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(bread * meat * bread))
}

fn finish(
    fit: &RegressionFit,
    plan: &VariancePlan,
    vcov: DMatrix<f64>,
    n_clusters: Vec<(String, usize)>,
    psd_adjusted: bool,
    df: usize,
) -> VarianceResult {
    let k = fit.names.len();
    let se = DVector::from_fn(k, |i, _| vcov[(i, i)].max(0.0).sqrt());
    VarianceResult {
        plan: plan.clone(),
        names: fit.names.clone(),
        vcov,
        se,
        n_clusters,
        psd_adjusted,
        df,
    }
}

/// Variance of the retained coefficients under `plan`.
pub fn vcov(fit: &RegressionFit, plan: &VariancePlan) -> Result<VarianceResult> {
    if !fit.converged {
        return Err(Error::Inference("fit did not converge".into()));
    }
    let n = fit.n_obs();
    let k = fit.names.len();
    let bread = &fit.weighted_xtx_inv;
    let scores = Scores::new(fit);
    let small = plan.small_sample();
    let correction = |g: usize| -> f64 {
        match small {
            SmallSample::None => 1.0,
            SmallSample::ClusterCountCorrection => {
                (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64))
            }
        }
    };
    match &plan.kind {
        VarianceKind::Classical => {
            if fit.dof == 0 {
                return Err(Error::Inference("classical variance needs residual dof".into()));
            }
            let sigma2 = fit.weighted_rss() / fit.dof as f64;
            Ok(finish(fit, plan, bread * sigma2, vec![], false, fit.dof))
        }
        VarianceKind::HcRobust => {
            let v = sandwich(bread, &scores.hc_meat());
            Ok(finish(fit, plan, v, vec![], false, fit.dof))
        }
        VarianceKind::Cluster { dim } => {
            let (codes, g) = group_codes(fit, &scores.perm, &[*dim])?;
            if g < 2 {
                return Err(Error::Inference(format!(
                    "clustering by `{}` needs at least two clusters, found {g}",
                    dim.name()
                )));
            }
            let v = sandwich(bread, &scores.cluster_meat(&codes, g)) * correction(g);
            Ok(finish(fit, plan, v, vec![(dim.name().to_string(), g)], false, g - 1))
        }
        VarianceKind::TwoWayCluster { dim_a, dim_b } => {
            let (ca, ga) = group_codes(fit, &scores.perm, &[*dim_a])?;
            let (cb, gb) = group_codes(fit, &scores.perm, &[*dim_b])?;
            let (cab, gab) = group_codes(fit, &scores.perm, &[*dim_a, *dim_b])?;
            if ga < 2 || gb < 2 {
                return Err(Error::Inference(format!(
                    "two-way clustering needs at least two clusters per dimension, found {ga} and {gb}"
                )));
            }
            let va = sandwich(bread, &scores.cluster_meat(&ca, ga)) * correction(ga);
            let vb = sandwich(bread, &scores.cluster_meat(&cb, gb)) * correction(gb);
            let vab = if gab >= 2 {
                sandwich(bread, &scores.cluster_meat(&cab, gab)) * correction(gab)
            } else {
                DMatrix::zeros(k, k)
            };
            let (v, adjusted) = psd_floor(&(va + vb - vab), 1e-12);
            let counts = vec![
                (dim_a.name().to_string(), ga),
                (dim_b.name().to_string(), gb),
                (format!("{}x{}", dim_a.name(), dim_b.name()), gab),
            ];
            Ok(finish(fit, plan, v, counts, adjusted, ga.min(gb) - 1))
        }
        VarianceKind::Spatial { cutoff_km, kernel } => {
            if !(*cutoff_km >= 0.0) {
                return Err(Error::Inference(format!("spatial cutoff {cutoff_km} must be >= 0")));
            }
            if !fit.data.has_coordinates() {
                return Err(Error::Inference(
                    "spatial standard errors need coordinates on every observation".into(),
                ));
            }
            let meat = spatial_meat(fit, &scores, *cutoff_km, *kernel)?;
            let (v, adjusted) = psd_floor(&sandwich(bread, &meat), 1e-12);
            Ok(finish(fit, plan, v, vec![], adjusted, fit.dof))
        }
    }
}

fn spatial_meat(
    fit: &RegressionFit,
    scores: &Scores,
    cutoff: f64,
    kernel: Kernel,
) -> Result<DMatrix<f64>> {
    let obs = fit.data.observations();
    let coords: Vec<(f64, f64)> = scores
        .perm
        .iter()
        .map(|&i| (obs[i].lat.unwrap_or(f64::NAN), obs[i].lon.unwrap_or(f64::NAN)))
        .collect();
    let years: Vec<i32> = scores.perm.iter().map(|&i| obs[i].year).collect();
    let mut by_year: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in years.iter().enumerate() {
        by_year.entry(y).or_default().push(i);
    }
    let k = scores.k;
    // v_i = sum_j K(d_ij) s_j over same-year neighbours, i = j included with weight 1.
    let partial: Vec<DMatrix<f64>> = (0..scores.rows.len())
        .into_par_iter()
        .map(|i| -> Result<DMatrix<f64>> {
            let mut terms: Vec<(f64, usize)> = Vec::new();
            for &j in &by_year[&years[i]] {
                let w = if i == j {
                    1.0
                } else {
                    kernel.weight(great_circle_km(coords[i], coords[j])?, cutoff)
                };
                if w != 0.0 {
                    terms.push((w, j));
                }
            }
            let v = DVector::from_fn(k, |c, _| {
                pairwise_sum(&terms.iter().map(|&(w, j)| w * scores.rows[j][c]).collect::<Vec<_>>())
            });
            Ok(&scores.rows[i] * v.transpose())
        })
        .collect::<Result<_>>()?;
    Ok(symmetrize(&pairwise_matrix_sum(&partial, k, k)))
}

/// Largest standard error across plans for one coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxSe {
    pub name: String,
    pub se: f64,
    pub plan_index: usize,
    pub plan_name: String,
}

/// Per coefficient, the largest SE over `plans`; ties go to the earlier plan.
pub fn max_se_report(fit: &RegressionFit, plans: &[VariancePlan]) -> Result<Vec<MaxSe>> {
    let results = plans.iter().map(|p| vcov(fit, p)).collect::<Result<Vec<_>>>()?;
    max_se_from(&results)
}

pub fn max_se_from(results: &[VarianceResult]) -> Result<Vec<MaxSe>> {
    let first = results
        .first()
        .ok_or_else(|| Error::Inference("max-SE report needs at least one plan".into()))?;
    Ok(first
        .names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mut best = 0usize;
            for (p, r) in results.iter().enumerate().skip(1) {
                if r.se[c] > results[best].se[c] {
                    best = p;
                }
            }
            MaxSe {
                name: name.clone(),
                se: results[best].se[c],
                plan_index: best,
                plan_name: results[best].plan.name(),
            }
        })
        .collect())
}

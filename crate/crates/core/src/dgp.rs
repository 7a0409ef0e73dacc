//! Synthetic panels with known injected effects.
//!
//! Every replication draws from its own ChaCha8 stream seeded by
//! [`replication_seed`]`(seed, rep)`, so Monte Carlo runs give the same
//! answer whatever the thread count or scheduling order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::great_circle_km;
use crate::panel::{Observation, PanelDataset, Treatment};
use crate::synth::SynthData;

pub const TREATED_STATE: &str = "Texas";
const NEIGHBOURS: [&str; 4] = ["Oklahoma", "Arkansas", "Louisiana", "New Mexico"];

/// SplitMix64 finalizer applied to `seed ⊕ golden · (rep + 1)`.
pub fn replication_seed(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HDistribution {
    /// Unit-level draw, uniform on [lo, hi).
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectSpec {
    Constant { tau: f64 },
    /// Effect by calendar year for treated units; years not listed get 0.
    Dynamic { by_year: BTreeMap<i32, f64> },
    /// Post-period effect `beta_0 + beta_h · H` with unit-level H.
    Heterogeneous { beta_0: f64, beta_h: f64, h: HDistribution },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLevel {
    Unit,
    County,
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorSpec {
    Iid { sigma: f64 },
    /// AR(1) shock shared within each cluster (innovation sd `sigma_cluster`,
    /// persistence `rho`) plus idiosyncratic noise with sd `sigma_u`.
    Clustered {
        sigma_u: f64,
        sigma_cluster: f64,
        dim: ClusterLevel,
        #[serde(default = "default_rho")]
        rho: f64,
    },
    /// Gaussian process across unit locations with covariance
    /// `sigma² exp(−d / range_km)`, independent across years.
    Spatial { sigma: f64, range_km: f64 },
}

fn default_rho() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Confounds {
    /// Sd of each MSA's loading on the national oil-price series.
    pub oil_loading_sd: f64,
    /// Sd of state-specific linear trends (per year).
    pub state_trend_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    #[serde(default = "d_states")]
    pub n_states: usize,
    #[serde(default = "d_counties")]
    pub n_counties_per_state: usize,
    #[serde(default = "d_units")]
    pub n_units_per_county: usize,
    /// County count in the treated state; 7 by default, `None` for
    /// `n_counties_per_state`.
    #[serde(default = "d_treated_counties_opt")]
    pub treated_state_counties: Option<usize>,
    #[serde(default = "d_first")]
    pub first_year: i32,
    #[serde(default = "d_last")]
    pub last_year: i32,
    #[serde(default = "d_tstate")]
    pub treatment_state: String,
    #[serde(default = "d_tyear")]
    pub treatment_year: i32,
    pub effect: EffectSpec,
    pub error: ErrorSpec,
    #[serde(default)]
    pub confounds: Confounds,
    /// Sd of unit fixed effects.
    #[serde(default = "d_unit_sd")]
    pub unit_fe_sd: f64,
    /// Sd of year fixed effects.
    #[serde(default = "d_year_sd")]
    pub year_fe_sd: f64,
    /// Distance between neighbouring units on the location grid.
    #[serde(default = "d_spacing")]
    pub grid_spacing_km: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_states() -> usize {
    5
}
fn d_counties() -> usize {
    3
}
fn d_units() -> usize {
    4
}
fn d_treated_counties() -> usize {
    7
}
fn d_treated_counties_opt() -> Option<usize> {
    Some(d_treated_counties())
}
fn d_first() -> i32 {
    1992
}
fn d_last() -> i32 {
    2004
}
fn d_tstate() -> String {
    TREATED_STATE.into()
}
fn d_tyear() -> i32 {
    1998
}
fn d_unit_sd() -> f64 {
    0.5
}
fn d_year_sd() -> f64 {
    0.05
}
fn d_spacing() -> f64 {
    20.0
}

impl DgpConfig {
    /// Desk-scale default over 1992–2004: four control states of 3 counties
    /// and a treated state of 7 counties, 4 units per county (76 units).
    pub fn new(effect: EffectSpec, error: ErrorSpec, seed: u64) -> Self {
        DgpConfig {
            n_states: d_states(),
            n_counties_per_state: d_counties(),
            n_units_per_county: d_units(),
            treated_state_counties: Some(d_treated_counties()),
            first_year: d_first(),
            last_year: d_last(),
            treatment_state: d_tstate(),
            treatment_year: d_tyear(),
            effect,
            error,
            confounds: Confounds::default(),
            unit_fe_sd: d_unit_sd(),
            year_fe_sd: d_year_sd(),
            grid_spacing_km: d_spacing(),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DgpConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 || self.n_counties_per_state < 1 || self.n_units_per_county < 1 {
            return Err(Error::Config(
                "need at least 2 states and at least 1 county and 1 unit per county".into(),
            ));
        }
        if self.last_year <= self.first_year {
            return Err(Error::Config(format!(
                "degenerate year span {}–{}",
                self.first_year, self.last_year
            )));
        }
        if !(self.first_year < self.treatment_year && self.treatment_year <= self.last_year) {
            return Err(Error::Config(format!(
                "treatment year {} is not interior to {}–{}",
                self.treatment_year, self.first_year, self.last_year
            )));
        }
        if self.treated_state_counties == Some(0) {
            return Err(Error::Config("treated state needs at least one county".into()));
        }
        let n: usize = (0..self.n_states).map(|s| self.counties_in(s)).sum::<usize>() * self.n_units_per_county;
        if let ErrorSpec::Spatial { range_km, .. } = self.error {
            if n > 2000 {
                return Err(Error::Config(format!("spatial errors support at most 2000 units, got {n}")));
            }
            if !(range_km > 0.0) {
                return Err(Error::Config("spatial range must be positive".into()));
            }
        }
        if let ErrorSpec::Clustered { rho, .. } = self.error {
            if !(rho.abs() < 1.0) {
                return Err(Error::Config(format!("AR(1) persistence must satisfy |rho| < 1, got {rho}")));
            }
        }
        if let EffectSpec::Heterogeneous { h: HDistribution::Uniform { lo, hi }, .. } = self.effect {
            if !(lo < hi) {
                return Err(Error::Config("H distribution needs lo < hi".into()));
            }
        }
        Ok(())
    }

    fn counties_in(&self, state: usize) -> usize {
        match (state, self.treated_state_counties) {
            (0, Some(n)) => n,
            _ => self.n_counties_per_state,
        }
    }

    fn state_names(&self) -> Vec<String> {
        let mut names = vec![self.treatment_state.clone()];
        let mut k = 0;
        while names.len() < self.n_states {
            names.push(match NEIGHBOURS.get(k) {
                Some(n) if *n != self.treatment_state => n.to_string(),
                Some(_) => {
                    k += 1;
                    continue;
                }
                None => format!("State {}", names.len()),
            });
            k += 1;
        }
        names
    }
}

/// Every injected component, aligned with the observations of the generated
/// dataset. `outcome = systematic + error` holds exactly, where `systematic`
/// adds the components in the order unit, year, trend, confound, effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: DgpConfig,
    pub units: Vec<String>,
    pub years: Vec<i32>,
    pub unit_fe: Vec<f64>,
    pub year_fe: Vec<f64>,
    pub trend: Vec<f64>,
    pub confound: Vec<f64>,
    pub effect: Vec<f64>,
    pub error: Vec<f64>,
    /// Heterogeneity value per observation (empty unless heterogeneous).
    pub h: Vec<f64>,
    pub oil_price: BTreeMap<i32, f64>,
}

impl GroundTruth {
    pub fn systematic(&self, i: usize) -> f64 {
        self.unit_fe[i] + self.year_fe[i] + self.trend[i] + self.confound[i] + self.effect[i]
    }
}

struct Layout {
    unit: String,
    state: usize,
    county: String,
    msa: String,
    lat: f64,
    lon: f64,
}

fn layout(cfg: &DgpConfig, states: &[String]) -> Vec<Layout> {
    let km_per_deg_lat = 111.195;
    let (lat0, lon0) = (31.0f64, -100.0f64);
    let per_state_cols = cfg.n_units_per_county;
    let mut out = Vec::new();
    for (s, st) in states.iter().enumerate() {
        for c in 0..cfg.counties_in(s) {
            let county = format!("{st} C{c}");
            for u in 0..cfg.n_units_per_county {
                let x = (s * per_state_cols + u) as f64 * cfg.grid_spacing_km;
                let y = c as f64 * cfg.grid_spacing_km;
                let lat = lat0 + y / km_per_deg_lat;
                let lon = lon0 + x / (km_per_deg_lat * lat0.to_radians().cos());
                out.push(Layout {
                    unit: format!("{st} C{c} U{u}"),
                    state: s,
                    county: county.clone(),
                    msa: format!("{st} M{c}"),
                    lat,
                    lon,
                });
            }
        }
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates the panel and its ground truth. Covariates: `oil` (national
/// series) and, for heterogeneous effects, `h`.
pub fn generate(cfg: &DgpConfig) -> Result<(PanelDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let states = cfg.state_names();
    let units = layout(cfg, &states);
    let years: Vec<i32> = (cfg.first_year..=cfg.last_year).collect();
    let nu = units.len();
    let nt = years.len();

    let unit_fe: Vec<f64> = (0..nu).map(|_| cfg.unit_fe_sd * normal(&mut rng)).collect();
    let year_fe: Vec<f64> = (0..nt).map(|_| cfg.year_fe_sd * normal(&mut rng)).collect();
    let state_trend: Vec<f64> =
        (0..states.len()).map(|_| cfg.confounds.state_trend_sd * normal(&mut rng)).collect();
    let mut oil = Vec::with_capacity(nt);
    let mut level = 0.0;
    for _ in 0..nt {
        level += 0.1 * normal(&mut rng);
        oil.push(level);
    }
    let msas: Vec<&str> = {
        let mut m: Vec<&str> = units.iter().map(|u| u.msa.as_str()).collect();
        m.sort();
        m.dedup();
        m
    };
    let loading: BTreeMap<&str, f64> = msas
        .iter()
        .map(|m| (*m, cfg.confounds.oil_loading_sd * normal(&mut rng)))
        .collect();
    let h_unit: Vec<f64> = match &cfg.effect {
        EffectSpec::Heterogeneous { h: HDistribution::Uniform { lo, hi }, .. } => {
            (0..nu).map(|_| rng.random_range(*lo..*hi)).collect()
        }
        _ => Vec::new(),
    };
    let errors = draw_errors(cfg, &units, nt, &mut rng)?;

    let heterogeneous = !h_unit.is_empty();
    let mut covariate_names = vec!["oil".to_string()];
    if heterogeneous {
        covariate_names.push("h".into());
    }
    let mut obs = Vec::with_capacity(nu * nt);
    let mut truth = GroundTruth {
        config: cfg.clone(),
        units: Vec::new(),
        years: Vec::new(),
        unit_fe: Vec::new(),
        year_fe: Vec::new(),
        trend: Vec::new(),
        confound: Vec::new(),
        effect: Vec::new(),
        error: Vec::new(),
        h: Vec::new(),
        oil_price: years.iter().copied().zip(oil.iter().copied()).collect(),
    };
    for (u, lay) in units.iter().enumerate() {
        let treated = lay.state == 0;
        for (t, &year) in years.iter().enumerate() {
            let post = year >= cfg.treatment_year;
            let effect = if !treated {
                0.0
            } else {
                match &cfg.effect {
                    EffectSpec::Constant { tau } => {
                        if post {
                            *tau
                        } else {
                            0.0
                        }
                    }
                    EffectSpec::Dynamic { by_year } => by_year.get(&year).copied().unwrap_or(0.0),
                    EffectSpec::Heterogeneous { beta_0, beta_h, .. } => {
                        if post {
                            beta_0 + beta_h * h_unit[u]
                        } else {
                            0.0
                        }
                    }
                }
            };
            let trend = state_trend[lay.state] * f64::from(year - cfg.first_year);
            let confound = loading[lay.msa.as_str()] * oil[t];
            truth.units.push(lay.unit.clone());
            truth.years.push(year);
            truth.unit_fe.push(unit_fe[u]);
            truth.year_fe.push(year_fe[t]);
            truth.trend.push(trend);
            truth.confound.push(confound);
            truth.effect.push(effect);
            let i = truth.units.len() - 1;
            let outcome = truth.systematic(i) + errors[(u, t)];
            truth.error.push(outcome - truth.systematic(i));
            let mut covariates = vec![oil[t]];
            if heterogeneous {
                covariates.push(h_unit[u]);
                truth.h.push(h_unit[u]);
            }
            obs.push(Observation {
                unit: lay.unit.clone(),
                state: states[lay.state].clone(),
                county: lay.county.clone(),
                msa: Some(lay.msa.clone()),
                year,
                outcome,
                weight: 1.0,
                lat: Some(lay.lat),
                lon: Some(lay.lon),
                covariates,
                stack_tag: None,
            });
        }
    }
    let ds = PanelDataset::new(
        obs,
        covariate_names,
        Treatment { state: cfg.treatment_state.clone(), year: cfg.treatment_year },
    )?;
    Ok((ds, truth))
}

/// Error draws indexed (unit, year).
fn draw_errors(cfg: &DgpConfig, units: &[Layout], nt: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let nu = units.len();
    match &cfg.error {
        ErrorSpec::Iid { sigma } => Ok(DMatrix::from_fn(nu, nt, |_, _| sigma * normal(rng))),
        ErrorSpec::Clustered { sigma_u, sigma_cluster, dim, rho } => {
            let key = |l: &Layout| match dim {
                ClusterLevel::Unit => l.unit.clone(),
                ClusterLevel::County => l.county.clone(),
                ClusterLevel::State => l.state.to_string(),
            };
            let mut ids: BTreeMap<String, usize> = BTreeMap::new();
            for l in units {
                let n = ids.len();
                ids.entry(key(l)).or_insert(n);
            }
            let stationary = sigma_cluster / (1.0 - rho * rho).sqrt();
            let mut shocks = DMatrix::zeros(ids.len(), nt);
            for g in 0..ids.len() {
                let mut e = stationary * normal(rng);
                for t in 0..nt {
                    if t > 0 {
                        e = rho * e + sigma_cluster * normal(rng);
                    }
                    shocks[(g, t)] = e;
                }
            }
            let idio = DMatrix::from_fn(nu, nt, |_, _| sigma_u * normal(rng));
            Ok(DMatrix::from_fn(nu, nt, |u, t| shocks[(ids[&key(&units[u])], t)] + idio[(u, t)]))
        }
        ErrorSpec::Spatial { sigma, range_km } => {
            let mut cov = DMatrix::zeros(nu, nu);
            for a in 0..nu {
                for b in 0..=a {
                    let d = great_circle_km((units[a].lat, units[a].lon), (units[b].lat, units[b].lon))?;
                    let c = sigma * sigma * (-d / range_km).exp();
                    cov[(a, b)] = c;
                    cov[(b, a)] = c;
                }
                cov[(a, a)] += 1e-12 * sigma * sigma;
            }
            let l = cov
                .cholesky()
                .ok_or_else(|| Error::Config("spatial covariance is not positive definite".into()))?
                .l();
            let mut out = DMatrix::zeros(nu, nt);
            for t in 0..nt {
                let z = DVector::from_fn(nu, |_, _| normal(rng));
                out.set_column(t, &(&l * z));
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDgpConfig {
    #[serde(default = "s_controls")]
    pub n_controls: usize,
    #[serde(default = "s_treated")]
    pub n_treated: usize,
    #[serde(default = "s_first")]
    pub first_year: i32,
    #[serde(default = "s_pre")]
    pub n_pre: usize,
    #[serde(default = "s_post")]
    pub n_post: usize,
    #[serde(default = "s_factors")]
    pub n_factors: usize,
    /// Injected post-period effect on every treated unit.
    #[serde(default)]
    pub effect: f64,
    /// Sd of idiosyncratic control-series noise.
    #[serde(default = "s_control_noise")]
    pub control_noise: f64,
    /// Sd of noise added to treated series.
    #[serde(default = "s_noise")]
    pub treated_noise: f64,
    /// Donor weights for the first treated unit as (control index, weight);
    /// later treated units draw two random donors with weights (0.6, 0.4).
    #[serde(default = "s_weights")]
    pub weights: Vec<(usize, f64)>,
    #[serde(default)]
    pub seed: u64,
}

fn s_controls() -> usize {
    10
}
fn s_treated() -> usize {
    3
}
fn s_first() -> i32 {
    1986
}
fn s_pre() -> usize {
    12
}
fn s_post() -> usize {
    7
}
fn s_factors() -> usize {
    2
}
fn s_control_noise() -> f64 {
    0.02
}
fn s_noise() -> f64 {
    0.01
}
fn s_weights() -> Vec<(usize, f64)> {
    vec![(0, 0.6), (1, 0.4)]
}

impl SynthDgpConfig {
    pub fn new(effect: f64, seed: u64) -> Self {
        SynthDgpConfig {
            n_controls: s_controls(),
            n_treated: s_treated(),
            first_year: s_first(),
            n_pre: s_pre(),
            n_post: s_post(),
            n_factors: s_factors(),
            effect,
            control_noise: s_control_noise(),
            treated_noise: s_noise(),
            weights: s_weights(),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SynthDgpConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_controls < 2 || self.n_treated < 1 {
            return Err(Error::Config("need at least 2 controls and 1 treated unit".into()));
        }
        if self.n_pre < 2 || self.n_post < 1 {
            return Err(Error::Config("need at least 2 pre-years and 1 post-year".into()));
        }
        if let Some((j, _)) = self.weights.iter().find(|(j, _)| *j >= self.n_controls) {
            return Err(Error::Config(format!("donor index {j} out of range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthDgpConfig,
    /// Per treated unit: intercept and donor weights (control index, weight).
    pub intercepts: Vec<f64>,
    pub weights: Vec<Vec<(usize, f64)>>,
    pub effect: f64,
}

/// Controls follow a factor model; each treated unit is an intercept plus a
/// sparse combination of controls, plus the post-period effect and noise.
pub fn generate_synth_panel(cfg: &SynthDgpConfig) -> Result<(SynthData, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t = cfg.n_pre + cfg.n_post;
    let step = Normal::new(0.0, 0.03).expect("finite sd");
    let mut factors = DMatrix::zeros(t, cfg.n_factors);
    for k in 0..cfg.n_factors {
        let mut f = 0.0;
        for i in 0..t {
            f += step.sample(&mut rng);
            factors[(i, k)] = f;
        }
    }
    let loadings = DMatrix::from_fn(cfg.n_factors, cfg.n_controls, |_, _| 1.0 + 0.5 * normal(&mut rng));
    let levels: Vec<f64> = (0..cfg.n_controls).map(|_| 4.0 + 0.3 * normal(&mut rng)).collect();
    let noise = DMatrix::from_fn(t, cfg.n_controls, |_, _| cfg.control_noise * normal(&mut rng));
    let controls = DMatrix::from_fn(t, cfg.n_controls, |i, j| {
        levels[j] + (0..cfg.n_factors).map(|k| factors[(i, k)] * loadings[(k, j)]).sum::<f64>() + noise[(i, j)]
    });

    let mut weights = Vec::new();
    let mut intercepts = Vec::new();
    let mut treated = Vec::new();
    for z in 0..cfg.n_treated {
        let w = if z == 0 {
            cfg.weights.clone()
        } else {
            let a = rng.random_range(0..cfg.n_controls);
            let mut b = rng.random_range(0..cfg.n_controls - 1);
            if b >= a {
                b += 1;
            }
            vec![(a, 0.6), (b, 0.4)]
        };
        let mu = 0.1 * normal(&mut rng);
        let series: Vec<f64> = (0..t)
            .map(|i| {
                let base: f64 = w.iter().map(|&(j, wj)| wj * controls[(i, j)]).sum();
                let post = if i >= cfg.n_pre { cfg.effect } else { 0.0 };
                mu + base + post + cfg.treated_noise * normal(&mut rng)
            })
            .collect();
        treated.push((
            format!("Treated {z}"),
            DVector::from_column_slice(&series[..cfg.n_pre]),
            DVector::from_column_slice(&series[cfg.n_pre..]),
        ));
        weights.push(w);
        intercepts.push(mu);
    }
    let years: Vec<i32> = (0..t as i32).map(|i| cfg.first_year + i).collect();
    let data = SynthData {
        pre_years: years[..cfg.n_pre].to_vec(),
        post_years: years[cfg.n_pre..].to_vec(),
        control_names: (0..cfg.n_controls).map(|j| format!("Control {j}")).collect(),
        controls_pre: controls.rows(0, cfg.n_pre).into_owned(),
        controls_post: controls.rows(cfg.n_pre, cfg.n_post).into_owned(),
        extra_names: Vec::new(),
        extra_pre: DMatrix::zeros(cfg.n_pre, 0),
        extra_post: DMatrix::zeros(cfg.n_post, 0),
        treated,
    };
    Ok((data, SynthTruth { config: cfg.clone(), intercepts, weights, effect: cfg.effect }))
}

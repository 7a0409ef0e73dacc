//! Collateral-constrained household model with log-separable utility
//! `u(c, h) = log c + φ log h`.
//!
//! Housing bought at `t` (`h_{t+1}`) is priced at `p_t` and yields services
//! from `t + 1`. The constraint `−a_{t+1} ≤ κ_t p_t h_t` carries multiplier
//! `μ_t = u_c(t) − β(1 + r_{t+1}) E_t[u_c(t+1)]`, and the collateral service
//! flow is `CSF_t = μ_t κ_t p_t / u_c(t)`. The price condition for `p_t` uses
//! `CSF_{t+1}`: the same quantity shifted one period ahead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum_iter;

/// Multipliers in `[-MU_CLIP_TOL, 0)` are treated as a slack constraint.
pub const MU_CLIP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseholdParams {
    pub beta: f64,
    #[serde(default)]
    pub delta: f64,
    /// Legal loan-to-value cap.
    pub kappa_bar: f64,
    /// Lender's loan-to-value cap.
    #[serde(default = "one")]
    pub ltv_lender: f64,
    /// Marginal income tax rate.
    #[serde(default)]
    pub tau: f64,
    /// Contract interest rate.
    pub i_contract: f64,
    /// Utility premium of owning over renting.
    #[serde(default = "one")]
    pub omega_own: f64,
    /// Housing weight in utility.
    #[serde(default = "default_phi")]
    pub phi: f64,
}

fn one() -> f64 {
    1.0
}

fn default_phi() -> f64 {
    0.3
}

impl HouseholdParams {
    pub fn new(beta: f64, delta: f64, kappa_bar: f64, i_contract: f64) -> Self {
        HouseholdParams {
            beta,
            delta,
            kappa_bar,
            ltv_lender: 1.0,
            tau: 0.0,
            i_contract,
            omega_own: 1.0,
            phi: default_phi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad(format!("delta must lie in [0, 1), got {}", self.delta));
        }
        if !(0.0..=1.0).contains(&self.kappa_bar) || !(0.0..=1.0).contains(&self.ltv_lender) {
            return bad("LTV caps must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1), got {}", self.tau));
        }
        if !(self.omega_own >= 1.0) {
            return bad(format!("omega_own must be ≥ 1, got {}", self.omega_own));
        }
        if !(self.phi > 0.0) {
            return bad(format!("phi must be positive, got {}", self.phi));
        }
        if !self.i_contract.is_finite() {
            return bad("contract rate must be finite".into());
        }
        Ok(())
    }

    /// `κ = min(κ̄, LTV)`.
    pub fn kappa(&self) -> f64 {
        self.kappa_bar.min(self.ltv_lender)
    }

    /// After-tax rate `r = (1 − τ) i`.
    pub fn effective_rate(&self) -> f64 {
        (1.0 - self.tau) * self.i_contract
    }

    pub fn u_c(&self, c: f64) -> Result<f64> {
        if !(c > 0.0) {
            return Err(Error::Domain(format!("consumption must be positive, got {c}")));
        }
        Ok(1.0 / c)
    }

    pub fn u_h(&self, h: f64) -> Result<f64> {
        if !(h > 0.0) {
            return Err(Error::Domain(format!("housing must be positive, got {h}")));
        }
        Ok(self.phi / h)
    }
}

/// Probability-weighted average over a discrete state grid.
fn expect<T>(states: &[(f64, T)], f: impl Fn(&T) -> Result<f64>) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Domain("empty state grid".into()));
    }
    let total: f64 = states.iter().map(|s| s.0).sum();
    if states.iter().any(|s| !(s.0 >= 0.0)) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("state probabilities must be ≥ 0 and sum to 1, got {total}")));
    }
    let terms = states.iter().map(|(p, s)| Ok(p * f(s)?)).collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum_iter(terms))
}

fn clip_multiplier(raw: f64) -> Result<f64> {
    if raw >= 0.0 {
        Ok(raw)
    } else if raw >= -MU_CLIP_TOL {
        Ok(0.0)
    } else {
        Err(Error::Domain(format!(
            "Euler equation violated: the asset first-order condition implies a negative multiplier ({raw:e})"
        )))
    }
}

/// `μ_t = u_c(c_t) − β(1 + r_{t+1}) E_t[u_c(c_{t+1})]` over next-period
/// consumption states `(probability, c_{t+1})`.
pub fn collateral_multiplier(
    params: &HouseholdParams,
    c_now: f64,
    c_next: &[(f64, f64)],
    r_next: f64,
) -> Result<f64> {
    let uc = params.u_c(c_now)?;
    let euc = expect(c_next, |c| params.u_c(*c))?;
    clip_multiplier(uc - params.beta * (1.0 + r_next) * euc)
}

/// `CSF = μ κ p / u_c`.
pub fn csf_decompose(u_c: f64, mu: f64, kappa: f64, p: f64) -> Result<f64> {
    if !(u_c > 0.0) {
        return Err(Error::Domain(format!("marginal utility must be positive, got {u_c}")));
    }
    if !(mu >= 0.0) {
        return Err(Error::Domain(format!("multiplier must be ≥ 0, got {mu}")));
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Domain(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    if !(p > 0.0) {
        return Err(Error::Domain(format!("price must be positive, got {p}")));
    }
    Ok(mu * kappa * p / u_c)
}

/// One next-period state for the price condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NextState {
    pub c: f64,
    pub h: f64,
    pub mu: f64,
    pub kappa: f64,
    pub p: f64,
    pub delta: f64,
}

/// `p_t − E_t[β u_c(t+1)/u_c(t) (u_h(t+1)/u_c(t+1) + CSF_{t+1} + (1 − δ) p_{t+1})]`.
pub fn price_foc_residual_states(
    params: &HouseholdParams,
    p_now: f64,
    c_now: f64,
    next: &[(f64, NextState)],
) -> Result<f64> {
    let uc = params.u_c(c_now)?;
    let rhs = expect(next, |s| {
        let ucn = params.u_c(s.c)?;
        let rent = params.u_h(s.h)? / ucn;
        let csf = csf_decompose(ucn, s.mu, s.kappa, s.p)?;
        Ok(params.beta * ucn / uc * (rent + csf + (1.0 - s.delta) * s.p))
    })?;
    Ok(p_now - rhs)
}

/// A deterministic path over periods `0..=T`. `a[t]` is the asset position
/// carried into `t`; `h[t]` the housing held during `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPath {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub mu: Vec<f64>,
    /// Income implied by the budget for `t < T`.
    pub y: Vec<f64>,
    pub r: Vec<f64>,
    pub kappa: Vec<f64>,
    pub delta: Vec<f64>,
}

impl ModelPath {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// Budget residual for period `t < T`:
    /// `y + p h (1 − δ) + (1 + r) a − c − p h' − a'`.
    pub fn budget_residual(&self, t: usize) -> f64 {
        self.y[t] + self.p[t] * self.h[t] * (1.0 - self.delta[t]) + (1.0 + self.r[t]) * self.a[t]
            - self.c[t]
            - self.p[t] * self.h[t + 1]
            - self.a[t + 1]
    }

    /// `μ_t (κ_t p_t h_t + a_{t+1})` for `t < T`.
    pub fn slackness(&self, t: usize) -> f64 {
        self.mu[t] * (self.kappa[t] * self.p[t] * self.h[t] + self.a[t + 1])
    }

    /// `CSF_t` for every period.
    pub fn csf(&self, params: &HouseholdParams) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|t| csf_decompose(params.u_c(self.c[t])?, self.mu[t], self.kappa[t], self.p[t]))
            .collect()
    }

    /// Stochastic discount factor `M_{t+1} = β u_c(t+1)/u_c(t)` for `t < T`.
    pub fn sdf(&self, params: &HouseholdParams) -> Result<Vec<f64>> {
        (0..self.len() - 1)
            .map(|t| Ok(params.beta * params.u_c(self.c[t + 1])? / params.u_c(self.c[t])?))
            .collect()
    }

    /// Rent `u_h/u_c` per period.
    pub fn rent(&self, params: &HouseholdParams) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|t| Ok(params.u_h(self.h[t])? / params.u_c(self.c[t])?))
            .collect()
    }
}

/// Inputs for [`build_path`]; all vectors cover periods `0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
    pub r: Vec<f64>,
    pub kappa: Vec<f64>,
    pub delta: Vec<f64>,
    pub terminal_price: f64,
    #[serde(default)]
    pub terminal_mu: f64,
    #[serde(default)]
    pub initial_assets: f64,
}

/// Builds a path consistent with the first-order conditions by backward
/// induction: multipliers from the Euler equation, prices from the price
/// condition, borrowing at the limit whenever the multiplier is positive,
/// and income from the budget identity.
pub fn build_path(params: &HouseholdParams, spec: &PathSpec) -> Result<ModelPath> {
    params.validate()?;
    let n = spec.c.len();
    if n < 2 {
        return Err(Error::Domain("a path needs at least two periods".into()));
    }
    for (name, v) in [("h", &spec.h), ("r", &spec.r), ("kappa", &spec.kappa), ("delta", &spec.delta)] {
        if v.len() != n {
            return Err(Error::Alignment(format!("path `{name}` has {} periods, expected {n}", v.len())));
        }
    }
    if !(spec.terminal_price > 0.0) {
        return Err(Error::Domain("terminal price must be positive".into()));
    }
    let last = n - 1;
    let mut mu = vec![0.0; n];
    mu[last] = clip_multiplier(spec.terminal_mu)?;
    for t in 0..last {
        mu[t] = collateral_multiplier(params, spec.c[t], &[(1.0, spec.c[t + 1])], spec.r[t + 1])?;
    }
    let mut p = vec![0.0; n];
    p[last] = spec.terminal_price;
    for t in (0..last).rev() {
        let uc = params.u_c(spec.c[t])?;
        let ucn = params.u_c(spec.c[t + 1])?;
        let rent = params.u_h(spec.h[t + 1])? / ucn;
        let csf = csf_decompose(ucn, mu[t + 1], spec.kappa[t + 1], p[t + 1])?;
        p[t] = params.beta * ucn / uc * (rent + csf + (1.0 - spec.delta[t + 1]) * p[t + 1]);
    }
    let mut a = vec![0.0; n];
    a[0] = spec.initial_assets;
    for t in 0..last {
        a[t + 1] = if mu[t] > 0.0 { -spec.kappa[t] * p[t] * spec.h[t] } else { 0.0 };
    }
    let mut y = vec![0.0; last];
    for t in 0..last {
        y[t] = spec.c[t] + p[t] * spec.h[t + 1] + a[t + 1]
            - p[t] * spec.h[t] * (1.0 - spec.delta[t])
            - (1.0 + spec.r[t]) * a[t];
    }
    Ok(ModelPath {
        c: spec.c.clone(),
        h: spec.h.clone(),
        a,
        p,
        mu,
        y,
        r: spec.r.clone(),
        kappa: spec.kappa.clone(),
        delta: spec.delta.clone(),
    })
}

/// Price-condition residual for each `t < T` along a deterministic path.
pub fn price_foc_residual(path: &ModelPath, params: &HouseholdParams) -> Result<Vec<f64>> {
    (0..path.len() - 1)
        .map(|t| {
            price_foc_residual_states(
                params,
                path.p[t],
                path.c[t],
                &[(
                    1.0,
                    NextState {
                        c: path.c[t + 1],
                        h: path.h[t + 1],
                        mu: path.mu[t + 1],
                        kappa: path.kappa[t + 1],
                        p: path.p[t + 1],
                        delta: path.delta[t + 1],
                    },
                )],
            )
        })
        .collect()
}

/// Budget, dual-feasibility and slackness violations along a path; empty
/// when every check passes.
pub fn check_path(path: &ModelPath) -> Vec<String> {
    let mut out = Vec::new();
    for t in 0..path.len() - 1 {
        let b = path.budget_residual(t);
        if b.abs() > 1e-10 {
            out.push(format!("period {t}: budget residual {b:e}"));
        }
        let s = path.slackness(t);
        if s.abs() > 1e-10 {
            out.push(format!("period {t}: complementary slackness {s:e}"));
        }
    }
    for (t, m) in path.mu.iter().enumerate() {
        if *m < -MU_CLIP_TOL {
            out.push(format!("period {t}: negative multiplier {m:e}"));
        }
    }
    out
}

/// Finite-horizon Lagrangian of a path, discounted by `β^t`. Period `T`'s
/// budget sells the house and repays the debt.
fn path_lagrangian(params: &HouseholdParams, path: &ModelPath, lambda: &[f64]) -> f64 {
    let n = path.len();
    let mut terms = Vec::new();
    for t in 0..n {
        let disc = params.beta.powi(t as i32);
        let u = path.c[t].ln() + params.phi * path.h[t].ln();
        // The last period liquidates: no purchase, no new borrowing.
        let (h_next, a_next, y) = if t + 1 < n { (path.h[t + 1], path.a[t + 1], path.y[t]) } else { (0.0, 0.0, 0.0) };
        let budget = y + path.p[t] * path.h[t] * (1.0 - path.delta[t]) + (1.0 + path.r[t]) * path.a[t]
            - path.c[t]
            - path.p[t] * h_next
            - a_next;
        let cc = path.kappa[t] * path.p[t] * path.h[t] + a_next;
        terms.push(disc * (u + lambda[t] * budget + path.mu[t] * cc));
    }
    pairwise_sum_iter(terms)
}

/// Central finite-difference derivatives of the path Lagrangian with respect
/// to `c_t` (all `t`), `h_{t+1}` and `a_{t+1}` (`t < T`). Each is zero at a
/// point satisfying the first-order conditions.
pub fn path_lagrangian_gradient_fd(params: &HouseholdParams, path: &ModelPath, step: f64) -> Result<Vec<(String, f64)>> {
    let lambda = path.c.iter().map(|&c| params.u_c(c)).collect::<Result<Vec<_>>>()?;
    let n = path.len();
    let mut out = Vec::new();
    let fd = |f: &dyn Fn(&mut ModelPath, f64)| {
        let mut up = path.clone();
        f(&mut up, step);
        let mut dn = path.clone();
        f(&mut dn, -step);
        (path_lagrangian(params, &up, &lambda) - path_lagrangian(params, &dn, &lambda)) / (2.0 * step)
    };
    for t in 0..n {
        out.push((format!("c[{t}]"), fd(&|p: &mut ModelPath, e| p.c[t] += e)));
    }
    for t in 0..n - 1 {
        out.push((format!("h[{}]", t + 1), fd(&|p: &mut ModelPath, e| p.h[t + 1] += e)));
        out.push((format!("a[{}]", t + 1), fd(&|p: &mut ModelPath, e| p.a[t + 1] += e)));
    }
    Ok(out)
}

/// Declared stationary tail beyond the horizon: bounds on the one-period
/// discount factor and on each flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryTail {
    pub m: f64,
    pub rent: f64,
    pub csf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceDecomposition {
    /// Truncated PDV of rents over the horizon.
    pub pdv_rent: f64,
    /// Truncated PDV of the collateral service flow over the horizon.
    pub pdv_csf: f64,
    /// Geometric continuation of each flow past the horizon at the declared
    /// tail values.
    pub tail_rent: f64,
    pub tail_csf: f64,
    /// Bound on the absolute size of everything past the horizon.
    pub truncation_bound: f64,
}

impl PriceDecomposition {
    pub fn price(&self) -> f64 {
        self.pdv_rent + self.pdv_csf
    }

    pub fn price_with_tail(&self) -> f64 {
        self.pdv_rent + self.pdv_csf + self.tail_rent + self.tail_csf
    }

    /// Share of the price due to collateral, tails included.
    pub fn csf_share(&self) -> f64 {
        (self.pdv_csf + self.tail_csf) / self.price_with_tail()
    }
}

/// `Σ_{j=1}^{H} M_{t+1,t+j} (1 − δ)^{j−1} x_{t+j}` for rents and the
/// collateral service flow, where `M_{t+1,t+j}` is the product of
/// `sdf[0..j]`. Paths are indexed from `t + 1`.
pub fn price_decomposition(
    rent: &[f64],
    csf: &[f64],
    sdf: &[f64],
    delta: f64,
    horizon: usize,
    tail: StationaryTail,
) -> Result<PriceDecomposition> {
    if horizon == 0 {
        return Err(Error::Domain("horizon must be at least 1".into()));
    }
    for (name, v) in [("rent", rent), ("csf", csf), ("sdf", sdf)] {
        if v.len() < horizon {
            return Err(Error::Alignment(format!(
                "`{name}` path has {} periods, horizon is {horizon}",
                v.len()
            )));
        }
    }
    let q = tail.m * (1.0 - delta);
    if !(q.abs() < 1.0) {
        return Err(Error::Divergence(format!(
            "tail discount M(1 − δ) = {q} is not below 1 in absolute value"
        )));
    }
    let mut disc = Vec::with_capacity(horizon);
    let mut prod = 1.0;
    for j in 0..horizon {
        prod *= sdf[j];
        disc.push(prod * (1.0 - delta).powi(j as i32));
    }
    let pdv_rent = pairwise_sum_iter((0..horizon).map(|j| disc[j] * rent[j]));
    let pdv_csf = pairwise_sum_iter((0..horizon).map(|j| disc[j] * csf[j]));
    let lead = prod * (1.0 - delta).powi(horizon as i32) * tail.m / (1.0 - q);
    let tail_rent = lead * tail.rent;
    let tail_csf = lead * tail.csf;
    Ok(PriceDecomposition {
        pdv_rent,
        pdv_csf,
        tail_rent,
        tail_csf,
        truncation_bound: tail_rent.abs() + tail_csf.abs(),
    })
}

/// How a law-induced change in rents biases the price-based estimate of the
/// collateral option value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RentBias {
    /// Rents unaffected.
    None,
    /// Rents weakly lower under the law: the estimate understates the
    /// collateral option value.
    Underestimates,
    Overestimates,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaReport {
    pub eta: f64,
    pub pdv_csf: f64,
    /// Bound on the CSF tail relative to the price.
    pub truncation_bound: f64,
    pub rent_bias: RentBias,
}

/// `η = PDV(CSF) / p_pre`, the price response implied by opening the
/// collateral channel, with the CSF tail included. `csf` and `sdf` start one
/// period after the law takes effect.
pub fn model_implied_eta(
    csf: &[f64],
    sdf: &[f64],
    delta: f64,
    tail: StationaryTail,
    prelaw_price: f64,
    rents: Option<(&[f64], &[f64])>,
) -> Result<EtaReport> {
    if !(prelaw_price > 0.0) {
        return Err(Error::Domain(format!("pre-law price must be positive, got {prelaw_price}")));
    }
    let h = csf.len().min(sdf.len());
    let zeros = vec![0.0; h];
    let d = price_decomposition(&zeros, csf, sdf, delta, h, StationaryTail { rent: 0.0, ..tail })?;
    let pdv = d.pdv_csf + d.tail_csf;
    let rent_bias = match rents {
        None => RentBias::None,
        Some((law, no_law)) => {
            if law.len() != no_law.len() {
                return Err(Error::Alignment("law and no-law rent paths differ in length".into()));
            }
            let le = law.iter().zip(no_law).all(|(a, b)| a <= b);
            let ge = law.iter().zip(no_law).all(|(a, b)| a >= b);
            match (le, ge) {
                (true, true) => RentBias::None,
                (true, false) => RentBias::Underestimates,
                (false, true) => RentBias::Overestimates,
                (false, false) => RentBias::Ambiguous,
            }
        }
    };
    Ok(EtaReport {
        eta: pdv / prelaw_price,
        pdv_csf: pdv,
        truncation_bound: d.truncation_bound / prelaw_price,
        rent_bias,
    })
}

/// Constant CSF level that produces a target `η` under a constant discount
/// factor `m`, found by bisection.
pub fn csf_level_for_eta(target: f64, m: f64, delta: f64, prelaw_price: f64) -> Result<f64> {
    if !(target >= 0.0) {
        return Err(Error::Domain(format!("target eta must be ≥ 0, got {target}")));
    }
    let eta_at = |c: f64| -> Result<f64> {
        Ok(model_implied_eta(&[c], &[m], delta, StationaryTail { m, rent: 0.0, csf: c }, prelaw_price, None)?.eta)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut guard = 0;
    while eta_at(hi)? < target {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::Domain("target eta unreachable".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eta_at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1e-300) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One next-period state for the own-versus-rent spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OwnNext {
    pub m: f64,
    pub csf: f64,
    pub p_own: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OwnRentSpread {
    /// `p_own − ω p_rent`.
    pub spread: f64,
    /// `E[M (CSF' + (1 − δ') p_own')]`.
    pub implied: f64,
    pub residual: f64,
}

pub fn own_rent_spread(
    params: &HouseholdParams,
    p_own: f64,
    p_rent: f64,
    next: &[(f64, OwnNext)],
) -> Result<OwnRentSpread> {
    let spread = p_own - params.omega_own * p_rent;
    let implied = expect(next, |s| Ok(s.m * (s.csf + (1.0 - s.delta) * s.p_own)))?;
    Ok(OwnRentSpread { spread, implied, residual: spread - implied })
}

/// Where the collateral constraint is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintTiming {
    /// `−a_{t+1} ≤ κ_t p_t h_t`.
    CurrentPriceCurrentHouse,
    /// `−a_{t+1} ≤ κ_t E_t[p_{t+1}] h_t`.
    ExpectedPriceCurrentHouse,
    /// `−a_{t+1} ≤ κ_t p_t h_{t+1}`.
    CurrentPriceNewHouse,
    /// `−a_{t+1} ≤ κ_t E_t[p_{t+1}] h_{t+1}`.
    ExpectedPriceNewHouse,
}

impl ConstraintTiming {
    pub const ALL: [ConstraintTiming; 4] = [
        ConstraintTiming::CurrentPriceCurrentHouse,
        ConstraintTiming::ExpectedPriceCurrentHouse,
        ConstraintTiming::CurrentPriceNewHouse,
        ConstraintTiming::ExpectedPriceNewHouse,
    ];
}

/// Deterministic inputs to the housing first-order condition at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingInputs {
    pub c: [f64; 2],
    pub h_next: f64,
    pub mu: [f64; 2],
    pub kappa: [f64; 2],
    /// `p_t, p_{t+1}, p_{t+2}`.
    pub p: [f64; 3],
    pub delta_next: f64,
}

/// Housing first-order-condition residual (in units of the good) under each
/// constraint timing. The collateral term is
/// `β μ_{t+1} κ_{t+1} p_{t+1}`, `β μ_{t+1} κ_{t+1} p_{t+2}`, `μ_t κ_t p_t` or
/// `μ_t κ_t p_{t+1}`, divided by `u_c(t)`.
pub fn timing_foc_residual(params: &HouseholdParams, timing: ConstraintTiming, x: &TimingInputs) -> Result<f64> {
    let uc = params.u_c(x.c[0])?;
    let ucn = params.u_c(x.c[1])?;
    let base = params.beta * (params.u_h(x.h_next)? + ucn * (1.0 - x.delta_next) * x.p[1]) / uc;
    let collateral = match timing {
        ConstraintTiming::CurrentPriceCurrentHouse => params.beta * x.mu[1] * x.kappa[1] * x.p[1],
        ConstraintTiming::ExpectedPriceCurrentHouse => params.beta * x.mu[1] * x.kappa[1] * x.p[2],
        ConstraintTiming::CurrentPriceNewHouse => x.mu[0] * x.kappa[0] * x.p[0],
        ConstraintTiming::ExpectedPriceNewHouse => x.mu[0] * x.kappa[0] * x.p[1],
    } / uc;
    Ok(x.p[0] - base - collateral)
}

/// Inputs to the three-period purchase-versus-equity-loan problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreePeriodInput {
    pub beta: f64,
    #[serde(default = "default_phi")]
    pub phi: f64,
    pub y: [f64; 3],
    pub p: [f64; 3],
    /// Gross interest rate.
    pub gross_rate: f64,
    pub kappa_pm: f64,
    pub kappa_hel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityPattern {
    pub purchase_binds: bool,
    pub hel_binds: bool,
}

impl ActivityPattern {
    pub const ALL: [ActivityPattern; 4] = [
        ActivityPattern { purchase_binds: false, hel_binds: false },
        ActivityPattern { purchase_binds: true, hel_binds: false },
        ActivityPattern { purchase_binds: false, hel_binds: true },
        ActivityPattern { purchase_binds: true, hel_binds: true },
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreePeriodSolution {
    pub c: [f64; 3],
    pub h: f64,
    pub b0_pm: f64,
    pub b1_hel: f64,
    pub lambda: [f64; 3],
    pub mu0: f64,
    pub mu1: f64,
    pub pattern: ActivityPattern,
    pub utility: f64,
}

impl ThreePeriodSolution {
    /// Housing marginal utility `(1 + β) φ / h`.
    pub fn u_h(&self, input: &ThreePeriodInput) -> f64 {
        (1.0 + input.beta) * input.phi / self.h
    }

    pub fn purchase_csf(&self, input: &ThreePeriodInput) -> f64 {
        self.mu0 * input.kappa_pm * input.p[0]
    }

    pub fn hel_csf(&self, input: &ThreePeriodInput) -> f64 {
        self.mu1 * input.kappa_hel * input.p[1]
    }

    /// `p_0 − (U_h + purchase CSF + HEL CSF + λ_2 p_2) / λ_0`.
    pub fn housing_foc_residual(&self, input: &ThreePeriodInput) -> f64 {
        input.p[0]
            - (self.u_h(input) + self.purchase_csf(input) + self.hel_csf(input) + self.lambda[2] * input.p[2])
                / self.lambda[0]
    }
}

impl ThreePeriodInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) || !(self.phi > 0.0) {
            return Err(Error::Domain("need beta in (0, 1) and phi > 0".into()));
        }
        if self.y.iter().any(|v| !(*v > 0.0)) || self.p.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("incomes and prices must be positive".into()));
        }
        if !(self.gross_rate > 0.0) {
            return Err(Error::Domain("gross rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa_pm) || !(0.0..=1.0).contains(&self.kappa_hel) {
            return Err(Error::Domain("LTV limits must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Consumption implied by binding budgets.
    pub fn consumption(&self, b0: f64, b1: f64, h: f64) -> [f64; 3] {
        let r = self.gross_rate;
        [
            self.y[0] + b0 - self.p[0] * h,
            self.y[1] + b1,
            self.y[2] + self.p[2] * h - r * r * b0 - r * b1,
        ]
    }

    /// Lifetime utility, `−∞` outside the consumption domain.
    pub fn utility(&self, b0: f64, b1: f64, h: f64) -> f64 {
        let c = self.consumption(b0, b1, h);
        if c.iter().any(|v| *v <= 0.0) || h <= 0.0 {
            return f64::NEG_INFINITY;
        }
        c[0].ln() + self.phi * h.ln() + self.beta * (c[1].ln() + self.phi * h.ln()) + self.beta * self.beta * c[2].ln()
    }

    /// Constraint slacks `(κ_PM p_0 h − b_0, κ_HEL p_1 h − R b_0 − b_1)`.
    pub fn slacks(&self, b0: f64, b1: f64, h: f64) -> (f64, f64) {
        (
            self.kappa_pm * self.p[0] * h - b0,
            self.kappa_hel * self.p[1] * h - self.gross_rate * b0 - b1,
        )
    }

    fn multipliers(&self, c: [f64; 3]) -> ([f64; 3], f64, f64) {
        let r = self.gross_rate;
        let lambda = [1.0 / c[0], self.beta / c[1], self.beta * self.beta / c[2]];
        let mu1 = lambda[1] - r * lambda[2];
        let mu0 = lambda[0] - r * mu1 - r * r * lambda[2];
        (lambda, mu0, mu1)
    }

    /// Stationarity system for one activity pattern in `(b0, b1, h)`.
    fn system(&self, pat: ActivityPattern, x: [f64; 3]) -> [f64; 3] {
        let [b0, b1, h] = x;
        let c = self.consumption(b0, b1, h);
        let (lambda, mu0, mu1) = self.multipliers(c);
        let (s0, s1) = self.slacks(b0, b1, h);
        let uh = (1.0 + self.beta) * self.phi / h;
        // Scale each equation by the level of marginal utility it involves so
        // Newton tolerances are comparable across equations.
        let e_pm = if pat.purchase_binds { s0 } else { mu0 / lambda[0] };
        let e_hel = if pat.hel_binds { s1 } else { mu1 / lambda[1] };
        let e_h = (uh - lambda[0] * self.p[0]
            + mu0 * self.kappa_pm * self.p[0]
            + mu1 * self.kappa_hel * self.p[1]
            + lambda[2] * self.p[2])
            / lambda[0];
        [e_pm, e_hel, e_h]
    }
}

fn interior(input: &ThreePeriodInput, x: [f64; 3]) -> bool {
    x[2] > 0.0 && input.consumption(x[0], x[1], x[2]).iter().all(|c| *c > 0.0)
}

fn newton(input: &ThreePeriodInput, pat: ActivityPattern, mut x: [f64; 3]) -> Option<[f64; 3]> {
    let norm = |f: [f64; 3]| f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut f = input.system(pat, x);
    for _ in 0..200 {
        if norm(f) <= 1e-13 {
            return Some(x);
        }
        let mut jac = nalgebra::Matrix3::zeros();
        for k in 0..3 {
            let e = 1e-7 * x[k].abs().max(1e-3);
            let (mut up, mut dn) = (x, x);
            up[k] += e;
            dn[k] -= e;
            if !interior(input, up) || !interior(input, dn) {
                return None;
            }
            let (fu, fd) = (input.system(pat, up), input.system(pat, dn));
            for r in 0..3 {
                jac[(r, k)] = (fu[r] - fd[r]) / (2.0 * e);
            }
        }
        let rhs = nalgebra::Vector3::new(-f[0], -f[1], -f[2]);
        let step = jac.lu().solve(&rhs)?;
        let mut t = 1.0;
        loop {
            let cand = [x[0] + t * step[0], x[1] + t * step[1], x[2] + t * step[2]];
            if interior(input, cand) {
                let fc = input.system(pat, cand);
                if norm(fc) < norm(f) || t < 1e-10 {
                    x = cand;
                    f = fc;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                return None;
            }
        }
    }
    (norm(f) <= 1e-11).then_some(x)
}

/// KKT violations of a candidate `(b0, b1, h)`; empty when it is a KKT point.
pub fn kkt_violations(input: &ThreePeriodInput, b0: f64, b1: f64, h: f64) -> Vec<String> {
    let mut v = Vec::new();
    if !interior(input, [b0, b1, h]) {
        v.push("consumption or housing not positive".into());
        return v;
    }
    let c = input.consumption(b0, b1, h);
    let (_, mu0, mu1) = input.multipliers(c);
    let (s0, s1) = input.slacks(b0, b1, h);
    if s0 < -1e-10 || s1 < -1e-10 {
        v.push(format!("primal infeasible: slacks ({s0:e}, {s1:e})"));
    }
    if mu0 < -MU_CLIP_TOL || mu1 < -MU_CLIP_TOL {
        v.push(format!("dual infeasible: multipliers ({mu0:e}, {mu1:e})"));
    }
    let (cs0, cs1) = (mu0.max(0.0) * s0, mu1.max(0.0) * s1);
    if cs0.abs() > 1e-10 || cs1.abs() > 1e-10 {
        v.push(format!("complementary slackness ({cs0:e}, {cs1:e})"));
    }
    v
}

/// Solves the three-period problem by trying each constraint-activity
/// pattern with Newton's method from several starts and keeping the one
/// that satisfies every KKT condition.
pub fn solve_three_period(input: &ThreePeriodInput) -> Result<ThreePeriodSolution> {
    input.validate()?;
    let r = input.gross_rate;
    let wealth = input.y[0] + input.y[1] / r + input.y[2] / (r * r);
    let net_cost = (input.p[0] - input.p[2] / (r * r)).abs().max(0.05 * input.p[0]);
    let mut report = Vec::new();
    for pat in ActivityPattern::ALL {
        let mut found = None;
        'starts: for frac in [0.3, 0.1, 0.6, 0.03, 0.9] {
            let h = frac * wealth / net_cost;
            let h = h.min(0.9 * (input.y[0] + input.y[2] / (r * r)) / input.p[0].max(1e-12)).max(1e-6);
            for b0 in [input.p[0] * h - 0.5 * input.y[0], input.kappa_pm * input.p[0] * h, 0.0] {
                let b1_opts = [
                    input.kappa_hel * input.p[1] * h - r * b0,
                    0.0,
                    0.5 * (input.y[2] + input.p[2] * h - r * r * b0) / r - 0.5 * input.y[1],
                ];
                for b1 in b1_opts {
                    let x0 = [b0, b1, h];
                    if !interior(input, x0) {
                        continue;
                    }
                    if let Some(x) = newton(input, pat, x0) {
                        found = Some(x);
                        break 'starts;
                    }
                }
            }
        }
        let Some([b0, b1, h]) = found else {
            report.push(format!("{pat:?}: Newton did not converge from any start"));
            continue;
        };
        let viol = kkt_violations(input, b0, b1, h);
        if !viol.is_empty() {
            report.push(format!("{pat:?}: {}", viol.join("; ")));
            continue;
        }
        let c = input.consumption(b0, b1, h);
        let (lambda, mu0, mu1) = input.multipliers(c);
        let (mut mu0, mut mu1) = (mu0.max(0.0), mu1.max(0.0));
        let (mut b0, mut b1) = (b0, b1);
        // Snap binding constraints so slackness holds exactly.
        if pat.purchase_binds {
            b0 = input.kappa_pm * input.p[0] * h;
        } else {
            mu0 = 0.0;
        }
        if pat.hel_binds {
            b1 = input.kappa_hel * input.p[1] * h - r * b0;
        } else {
            mu1 = 0.0;
        }
        let c = input.consumption(b0, b1, h);
        return Ok(ThreePeriodSolution {
            c,
            h,
            b0_pm: b0,
            b1_hel: b1,
            lambda,
            mu0,
            mu1,
            pattern: pat,
            utility: input.utility(b0, b1, h),
        });
    }
    Err(Error::Kkt(report))
}

/// Central finite-difference gradient of the three-period Lagrangian with
/// respect to `(c0, c1, c2, h, b0, b1)` at a solution, using the solution's
/// multipliers.
pub fn three_period_lagrangian_gradient_fd(
    input: &ThreePeriodInput,
    s: &ThreePeriodSolution,
    step: f64,
) -> [f64; 6] {
    let r = input.gross_rate;
    let lag = |v: [f64; 6]| {
        let [c0, c1, c2, h, b0, b1] = v;
        let u = c0.ln() + input.phi * h.ln() + input.beta * (c1.ln() + input.phi * h.ln())
            + input.beta * input.beta * c2.ln();
        u + s.lambda[0] * (input.y[0] + b0 - c0 - input.p[0] * h)
            + s.mu0 * (input.kappa_pm * input.p[0] * h - b0)
            + s.lambda[1] * (input.y[1] + b1 - c1)
            + s.mu1 * (input.kappa_hel * input.p[1] * h - r * b0 - b1)
            + s.lambda[2] * (input.y[2] + input.p[2] * h - c2 - r * r * b0 - r * b1)
    };
    let x = [s.c[0], s.c[1], s.c[2], s.h, s.b0_pm, s.b1_hel];
    let mut g = [0.0; 6];
    for k in 0..6 {
        let (mut up, mut dn) = (x, x);
        up[k] += step;
        dn[k] -= step;
        g[k] = (lag(up) - lag(dn)) / (2.0 * step);
    }
    g
}

/// Brute-force maximizer over a grid in `(h, s0, s1)`, where `s0`, `s1` are
/// the two constraint slacks, so the feasible set is a box. The grid is
/// refined coarse-to-fine around the incumbent until every spacing is at most
/// `resolution`. Returns `(b0, b1, h)`.
pub fn grid_search_three_period(input: &ThreePeriodInput, resolution: f64) -> Result<(f64, f64, f64)> {
    input.validate()?;
    let r = input.gross_rate;
    let wealth = input.y[0] + input.y[1] / r + input.y[2] / (r * r);
    // Positive c0 needs p0 h − y0 < b0 ≤ κ p0 h, which bounds both h and s0.
    let mut h_max = wealth / (input.p[0] - input.p[2] / (r * r)).abs().max(0.05 * input.p[0]);
    if input.kappa_pm < 1.0 {
        h_max = h_max.min(input.y[0] / ((1.0 - input.kappa_pm) * input.p[0]));
    }
    let s0_max = input.y[0];
    let s1_max = input.kappa_hel * input.p[1] * h_max + r * input.y[0] + input.y[1];
    let point = |x: [f64; 3]| {
        let [h, s0, s1] = x;
        let b0 = input.kappa_pm * input.p[0] * h - s0;
        let b1 = input.kappa_hel * input.p[1] * h - r * b0 - s1;
        (b0, b1, h)
    };
    let mut lo = [0.0; 3];
    let mut hi = [h_max, s0_max, s1_max];
    let n = 40;
    let mut best = (f64::NEG_INFINITY, [0.0; 3]);
    loop {
        let step: Vec<f64> = (0..3).map(|k| (hi[k] - lo[k]) / n as f64).collect();
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    let x = [
                        lo[0] + step[0] * i as f64,
                        lo[1] + step[1] * j as f64,
                        lo[2] + step[2] * k as f64,
                    ];
                    let (b0, b1, h) = point(x);
                    let u = input.utility(b0, b1, h);
                    if u > best.0 {
                        best = (u, x);
                    }
                }
            }
        }
        if !best.0.is_finite() {
            return Err(Error::Domain("grid search found no feasible point".into()));
        }
        if step.iter().all(|s| *s <= resolution) {
            return Ok(point(best.1));
        }
        for k in 0..3 {
            lo[k] = (best.1[k] - 2.0 * step[k]).max(0.0);
            hi[k] = best.1[k] + 2.0 * step[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> HouseholdParams {
        HouseholdParams::new(0.96, 0.0, 0.8, 0.05)
    }

    #[test]
    fn kappa_and_rate() {
        let mut p = params();
        p.ltv_lender = 0.7;
        p.tau = 0.25;
        assert_eq!(p.kappa(), 0.7);
        assert!((p.effective_rate() - 0.0375).abs() < 1e-15);
    }

    #[test]
    fn multiplier_examples() {
        let p = params();
        let mu = collateral_multiplier(&p, 1.0, &[(1.0, 1.1)], 0.02).unwrap();
        assert!((mu - (1.0 - 0.96 * 1.02 / 1.1)).abs() < 1e-15);
        let r = 1.0 / 0.96 - 1.0;
        assert_eq!(collateral_multiplier(&p, 1.0, &[(1.0, 1.0)], r).unwrap(), 0.0);
        assert!(matches!(collateral_multiplier(&p, -1.0, &[(1.0, 1.0)], r), Err(Error::Domain(_))));
        assert!(matches!(collateral_multiplier(&p, 1.0, &[(1.0, 0.5)], r), Err(Error::Domain(_))));
    }

    #[test]
    fn higher_tax_raises_multiplier() {
        let mut p = params();
        p.i_contract = 0.06;
        let mu_lo = collateral_multiplier(&p, 1.0, &[(1.0, 1.1)], p.effective_rate()).unwrap();
        p.tau = 0.3;
        let mu_hi = collateral_multiplier(&p, 1.0, &[(1.0, 1.1)], p.effective_rate()).unwrap();
        assert!(mu_hi >= mu_lo);
    }

    #[test]
    fn csf_examples() {
        assert_eq!(csf_decompose(1.0, 0.05, 0.0, 100.0).unwrap(), 0.0);
        assert_eq!(csf_decompose(1.0, 0.0, 0.8, 100.0).unwrap(), 0.0);
        assert!((csf_decompose(1.0, 0.05, 0.80, 100.0).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(csf_decompose(0.0, 0.05, 0.8, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn decomposition_single_term_horizon() {
        let d = price_decomposition(&[2.0], &[1.0], &[0.9], 0.1, 1, StationaryTail { m: 0.9, rent: 2.0, csf: 1.0 }).unwrap();
        assert!((d.pdv_rent - 1.8).abs() < 1e-15);
        assert!((d.pdv_csf - 0.9).abs() < 1e-15);
        let closed = 3.0 * 0.9 / (1.0 - 0.9 * 0.9);
        assert!((closed - d.price() - (d.tail_rent + d.tail_csf)).abs() < 1e-12);
        assert!(closed - d.price() <= d.truncation_bound + 1e-12);
    }

    #[test]
    fn decomposition_divergent_tail() {
        let e = price_decomposition(&[1.0], &[0.0], &[1.0], 0.0, 1, StationaryTail { m: 1.0, rent: 1.0, csf: 0.0 });
        assert!(matches!(e, Err(Error::Divergence(_))));
    }

    #[test]
    fn eta_homogeneity_and_inversion() {
        let tail = StationaryTail { m: 0.95, rent: 0.0, csf: 0.1 };
        let a = model_implied_eta(&[0.1; 5], &[0.95; 5], 0.02, tail, 50.0, None).unwrap();
        let b = model_implied_eta(&[0.1; 5], &[0.95; 5], 0.02, tail, 100.0, None).unwrap();
        assert!((a.eta - 2.0 * b.eta).abs() < 1e-14);
        let z = model_implied_eta(&[0.0; 5], &[0.95; 5], 0.02, StationaryTail { csf: 0.0, ..tail }, 50.0, None).unwrap();
        assert_eq!(z.eta, 0.0);
        let c = csf_level_for_eta(0.0413, 0.95, 0.02, 100.0).unwrap();
        let e = model_implied_eta(&[c], &[0.95], 0.02, StationaryTail { m: 0.95, rent: 0.0, csf: c }, 100.0, None).unwrap();
        assert!((e.eta - 0.0413).abs() < 1e-12);
    }

    #[test]
    fn rent_bias_direction() {
        let tail = StationaryTail { m: 0.95, rent: 0.0, csf: 0.0 };
        let r = model_implied_eta(&[0.1], &[0.95], 0.0, tail, 10.0, Some((&[0.9, 1.0], &[1.0, 1.0]))).unwrap();
        assert_eq!(r.rent_bias, RentBias::Underestimates);
    }

    #[test]
    fn own_rent_linear_in_omega() {
        let mut p = params();
        p.omega_own = 1.2;
        let next = [(1.0, OwnNext { m: 0.95, csf: 0.0, p_own: 20.0, delta: 0.02 })];
        let implied = 0.95 * 0.98 * 20.0;
        let p_own = 1.2 * 1.5 + implied;
        let s = own_rent_spread(&p, p_own, 1.5, &next).unwrap();
        assert!(s.residual.abs() < 1e-12);
    }
}

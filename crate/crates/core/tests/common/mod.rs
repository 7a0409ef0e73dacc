//! Test-only helpers: random panels and an explicit dummy-variable OLS
//! oracle solved through the normal equations.
#![allow(dead_code)]

use hel_core::panel::{FeDim, Observation, PanelDataset, Treatment};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Unbalanced random panel with two covariates, `x1` and `x2`, treatment in
/// state `S0` from year 2004. Every unit has at least two years and every
/// year is observed, so the unit/year graph is connected.
pub fn random_panel(seed: u64, max_rows: usize) -> PanelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_years = rng.random_range(3..=8);
    let years: Vec<i32> = (0..n_years).map(|k| 2000 + 2 * k as i32 / 2 + k as i32).collect();
    let max_units = (max_rows / n_years).max(3);
    let n_units = rng.random_range(3..=max_units.min(25));
    let mut rows = Vec::new();
    for u in 0..n_units {
        let state = format!("S{}", u % 3);
        let mut present: Vec<bool> = years.iter().map(|_| rng.random_bool(0.8)).collect();
        // anchor every unit on the first year and one other so the graph connects
        present[0] = true;
        let other = 1 + u % (n_years - 1);
        present[other] = true;
        for (k, &y) in years.iter().enumerate() {
            if !present[k] {
                continue;
            }
            rows.push(Observation {
                unit: format!("u{u:02}"),
                state: state.clone(),
                county: format!("c{}", u / 2),
                msa: Some(format!("m{}", u % 4)),
                year: y,
                outcome: rng.random_range(-1.0..1.0) + 0.3 * u as f64 - 0.1 * k as f64,
                weight: rng.random_range(0.2..3.0),
                lat: Some(30.0 + rng.random_range(0.0..2.0)),
                lon: Some(-97.0 + rng.random_range(0.0..2.0)),
                covariates: vec![rng.random_range(-2.0..2.0), rng.random_range(0.0..5.0)],
                stack_tag: None,
            });
            if rows.len() >= max_rows {
                break;
            }
        }
        if rows.len() >= max_rows {
            break;
        }
    }
    let treat_year = years[n_years / 2];
    PanelDataset::new(rows, vec!["x1".into(), "x2".into()], Treatment { state: "S0".into(), year: treat_year })
        .unwrap()
}

/// Explicit dummies: all levels of the first dimension, all but the first
/// level of each later dimension. Returns the coefficients on `x`'s columns.
pub fn dummy_ols(
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    ds: &PanelDataset,
    dims: &[FeDim],
) -> Vec<f64> {
    let n = y.len();
    let mut cols: Vec<Vec<f64>> = x.to_vec();
    for (d, dim) in dims.iter().enumerate() {
        let mut levels: BTreeMap<String, usize> = BTreeMap::new();
        for o in ds.observations() {
            let k = dim.key(o).unwrap();
            let next = levels.len();
            levels.entry(k).or_insert(next);
        }
        let mut sorted: Vec<String> = levels.keys().cloned().collect();
        sorted.sort();
        let skip = usize::from(d > 0);
        for lvl in sorted.iter().skip(skip) {
            cols.push(ds.observations().iter().map(|o| f64::from(u8::from(dim.key(o).unwrap() == *lvl))).collect());
        }
    }
    if dims.is_empty() {
        // nothing to add
    }
    let p = cols.len();
    let xm = DMatrix::from_fn(n, p, |r, c| cols[c][r]);
    let wm = DMatrix::from_diagonal(&DVector::from_column_slice(w));
    let xtwx = xm.transpose() * &wm * &xm;
    let xtwy = xm.transpose() * &wm * DVector::from_column_slice(y);
    let beta = xtwx.full_piv_lu().solve(&xtwy).expect("oracle normal equations singular");
    beta.iter().take(x.len()).cloned().collect()
}

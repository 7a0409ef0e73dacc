//! Long-format panel data: one row per unit-year (per stack tag once border
//! pairs are stacked).
//!
//! Datasets are immutable. Every transform returns a new [`PanelDataset`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unit-year record.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub unit: String,
    pub state: String,
    pub county: String,
    pub msa: Option<String>,
    pub year: i32,
    pub outcome: f64,
    pub weight: f64,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    /// Values aligned with [`PanelDataset::covariate_names`].
    pub covariates: Vec<f64>,
    /// Border-pair identifier after stacking; `None` is the singleton tag.
    pub stack_tag: Option<String>,
}

/// Fixed-effect dimensions an observation can be grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeDim {
    Unit,
    Year,
    State,
    County,
    Msa,
    /// Border pair (stack tag).
    Pair,
    /// Border pair × year.
    PairYear,
    /// Unit × border pair, so each stacked copy carries its own unit effect.
    UnitPair,
    StateYear,
}

impl FeDim {
    pub fn name(self) -> &'static str {
        match self {
            FeDim::Unit => "unit",
            FeDim::Year => "year",
            FeDim::State => "state",
            FeDim::County => "county",
            FeDim::Msa => "msa",
            FeDim::Pair => "pair",
            FeDim::PairYear => "pair_year",
            FeDim::UnitPair => "unit_pair",
            FeDim::StateYear => "state_year",
        }
    }

    /// Group key of an observation, or `None` when the dimension does not
    /// resolve on it.
    pub fn key(self, o: &Observation) -> Option<String> {
        match self {
            FeDim::Unit => Some(o.unit.clone()),
            FeDim::Year => Some(o.year.to_string()),
            FeDim::State => Some(o.state.clone()),
            FeDim::County => Some(o.county.clone()),
            FeDim::Msa => o.msa.clone(),
            FeDim::Pair => o.stack_tag.clone(),
            FeDim::PairYear => o.stack_tag.as_ref().map(|t| format!("{t}#{}", o.year)),
            FeDim::UnitPair => o.stack_tag.as_ref().map(|t| format!("{}#{t}", o.unit)),
            FeDim::StateYear => Some(format!("{}#{}", o.state, o.year)),
        }
    }
}

impl std::str::FromStr for FeDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "unit" => FeDim::Unit,
            "year" => FeDim::Year,
            "state" => FeDim::State,
            "county" => FeDim::County,
            "msa" => FeDim::Msa,
            "pair" => FeDim::Pair,
            "pair_year" => FeDim::PairYear,
            "unit_pair" => FeDim::UnitPair,
            "state_year" => FeDim::StateYear,
            other => return Err(Error::Schema(format!("unknown fixed-effect dimension `{other}`"))),
        })
    }
}

/// Dense integer coding of a fixed-effect dimension.
#[derive(Debug, Clone)]
pub struct FeCodes {
    pub codes: Vec<usize>,
    pub n_levels: usize,
}

/// Which state is treated and when.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Treatment {
    pub state: String,
    pub year: i32,
}

/// Binds CSV column names to observation roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub unit: String,
    pub state: String,
    pub year: String,
    pub outcome: String,
    pub county: Option<String>,
    pub msa: Option<String>,
    pub weight: Option<String>,
    pub lat: Option<String>,
    pub lon: Option<String>,
    pub stack_tag: Option<String>,
    pub covariates: Vec<String>,
    /// Roles holding log-scale values. `"outcome"` names the outcome role,
    /// anything else a covariate.
    pub log_columns: Vec<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            unit: "unit".into(),
            state: "state".into(),
            year: "year".into(),
            outcome: "outcome".into(),
            county: None,
            msa: None,
            weight: None,
            lat: None,
            lon: None,
            stack_tag: None,
            covariates: Vec::new(),
            log_columns: Vec::new(),
        }
    }
}

impl ColumnSchema {
    /// The schema [`PanelDataset::write_csv`] emits.
    pub fn canonical(covariates: &[String], log_columns: &[String]) -> Self {
        ColumnSchema {
            county: Some("county".into()),
            msa: Some("msa".into()),
            weight: Some("weight".into()),
            lat: Some("lat".into()),
            lon: Some("lon".into()),
            stack_tag: Some("stack_tag".into()),
            covariates: covariates.to_vec(),
            log_columns: log_columns.to_vec(),
            ..ColumnSchema::default()
        }
    }

    pub fn has_coordinates(&self) -> bool {
        self.lat.is_some() && self.lon.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    observations: Vec<Observation>,
    covariate_names: Vec<String>,
    log_columns: BTreeSet<String>,
    fe_dims: Vec<FeDim>,
    treatment: Treatment,
}

impl PanelDataset {
    /// Validates every dataset invariant: positive finite weights, unique
    /// (unit, year, stack tag), covariate arity, and an interior treatment
    /// year whenever the dataset is nonempty.
    pub fn new(
        observations: Vec<Observation>,
        covariate_names: Vec<String>,
        treatment: Treatment,
    ) -> Result<Self> {
        let k = covariate_names.len();
        let mut seen: HashMap<(&str, i32, Option<&str>), usize> = HashMap::new();
        for (i, o) in observations.iter().enumerate() {
            if !(o.weight > 0.0 && o.weight.is_finite()) {
                return Err(Error::Integrity(format!(
                    "observation {i} (unit {}, year {}) has non-positive weight {}",
                    o.unit, o.year, o.weight
                )));
            }
            if o.covariates.len() != k {
                return Err(Error::Integrity(format!(
                    "observation {i} has {} covariates, expected {k}",
                    o.covariates.len()
                )));
            }
            let key = (o.unit.as_str(), o.year, o.stack_tag.as_deref());
            if let Some(first) = seen.insert(key, i) {
                return Err(Error::Integrity(format!(
                    "duplicate (unit {}, year {}) in observations {first} and {i}",
                    o.unit, o.year
                )));
            }
        }
        let ds = PanelDataset {
            observations,
            covariate_names,
            log_columns: BTreeSet::new(),
            fe_dims: vec![FeDim::Unit, FeDim::Year],
            treatment,
        };
        ds.check_treatment_span()?;
        Ok(ds)
    }

    fn check_treatment_span(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Ok(());
        }
        let t = self.treatment.year;
        let pre = self.observations.iter().any(|o| o.year < t);
        let post = self.observations.iter().any(|o| o.year >= t);
        if !(pre && post) {
            return Err(Error::Integrity(format!(
                "treatment year {t} is not interior to the year span {:?}",
                self.year_span()
            )));
        }
        Ok(())
    }

    pub fn with_log_columns<I, S>(mut self, cols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for c in cols {
            let c = c.into();
            if c != "outcome" && self.covariate_index(&c).is_none() {
                return Err(Error::Schema(format!("log column `{c}` is not a known role")));
            }
            self.log_columns.insert(c);
        }
        Ok(self)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn log_columns(&self) -> &BTreeSet<String> {
        &self.log_columns
    }

    pub fn treatment(&self) -> &Treatment {
        &self.treatment
    }

    pub fn fe_dims(&self) -> &[FeDim] {
        &self.fe_dims
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// `(min year, max year)`; `None` for an empty dataset.
    pub fn year_span(&self) -> Option<(i32, i32)> {
        let min = self.observations.iter().map(|o| o.year).min()?;
        let max = self.observations.iter().map(|o| o.year).max()?;
        Some((min, max))
    }

    pub fn years(&self) -> Vec<i32> {
        let s: BTreeSet<i32> = self.observations.iter().map(|o| o.year).collect();
        s.into_iter().collect()
    }

    pub fn units(&self) -> Vec<String> {
        let s: BTreeSet<&str> = self.observations.iter().map(|o| o.unit.as_str()).collect();
        s.into_iter().map(String::from).collect()
    }

    pub fn is_treated(&self, o: &Observation) -> bool {
        o.state == self.treatment.state
    }

    pub fn is_post(&self, o: &Observation) -> bool {
        o.year >= self.treatment.year
    }

    pub fn is_stacked(&self) -> bool {
        self.observations.iter().any(|o| o.stack_tag.is_some())
    }

    /// True when every observation carries coordinates.
    pub fn has_coordinates(&self) -> bool {
        !self.observations.is_empty()
            && self.observations.iter().all(|o| o.lat.is_some() && o.lon.is_some())
    }

    /// Values of a role: `"outcome"`, `"weight"`, `"year"`, or a covariate.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        match name {
            "outcome" => Ok(self.observations.iter().map(|o| o.outcome).collect()),
            "weight" => Ok(self.observations.iter().map(|o| o.weight).collect()),
            "year" => Ok(self.observations.iter().map(|o| f64::from(o.year)).collect()),
            _ => {
                let j = self
                    .covariate_index(name)
                    .ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))?;
                Ok(self.observations.iter().map(|o| o.covariates[j]).collect())
            }
        }
    }

    /// Dense codes for a dimension, levels numbered in sorted key order.
    pub fn fe_codes(&self, dim: FeDim) -> Result<FeCodes> {
        let mut keys = Vec::with_capacity(self.len());
        for (i, o) in self.observations.iter().enumerate() {
            let k = dim.key(o).ok_or_else(|| {
                Error::Design(format!(
                    "fixed-effect dimension `{}` does not resolve on observation {i} (unit {})",
                    dim.name(),
                    o.unit
                ))
            })?;
            keys.push(k);
        }
        let levels: BTreeSet<&String> = keys.iter().collect();
        let index: HashMap<&String, usize> =
            levels.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let codes = keys.iter().map(|k| index[k]).collect();
        Ok(FeCodes { codes, n_levels: levels.len() })
    }

    /// Register a fixed-effect dimension after checking it resolves on every
    /// observation.
    pub fn declare_fe(&self, dim: FeDim) -> Result<Self> {
        self.fe_codes(dim)?;
        let mut out = self.clone();
        if !out.fe_dims.contains(&dim) {
            out.fe_dims.push(dim);
        }
        Ok(out)
    }

    fn with_observations(&self, observations: Vec<Observation>) -> Self {
        PanelDataset {
            observations,
            covariate_names: self.covariate_names.clone(),
            log_columns: self.log_columns.clone(),
            fe_dims: self.fe_dims.clone(),
            treatment: self.treatment.clone(),
        }
    }

    /// Append (or replace) a covariate column.
    pub fn with_covariate(&self, name: &str, values: &[f64]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Schema(format!(
                "covariate `{name}` has {} values for {} observations",
                values.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        match out.covariate_index(name) {
            Some(j) => {
                for (o, &v) in out.observations.iter_mut().zip(values) {
                    o.covariates[j] = v;
                }
            }
            None => {
                out.covariate_names.push(name.to_string());
                for (o, &v) in out.observations.iter_mut().zip(values) {
                    o.covariates.push(v);
                }
            }
        }
        Ok(out)
    }

    /// Keep only observations satisfying `pred`.
    pub fn filter<F: Fn(&Observation) -> bool>(&self, pred: F) -> Result<Self> {
        let kept = self.observations.iter().filter(|o| pred(o)).cloned().collect();
        let out = self.with_observations(kept);
        out.check_treatment_span()?;
        Ok(out)
    }

    /// Divide nominal columns by `index_year / index_base`. The base year
    /// defaults to the first year in the dataset.
    pub fn apply_deflator(
        &self,
        series: &BTreeMap<i32, f64>,
        cols: &[&str],
        base_year: Option<i32>,
    ) -> Result<Self> {
        for &c in cols {
            if self.log_columns.contains(c) {
                return Err(Error::LogColumn(c.to_string()));
            }
        }
        for y in self.years() {
            if !series.contains_key(&y) {
                return Err(Error::Coverage(y));
            }
        }
        let base = match base_year {
            Some(b) => b,
            None => match self.year_span() {
                Some((first, _)) => first,
                None => return Ok(self.clone()),
            },
        };
        let base_index = *series.get(&base).ok_or(Error::Coverage(base))?;
        let mut targets = Vec::with_capacity(cols.len());
        for &c in cols {
            targets.push(match c {
                "outcome" => None,
                _ => Some(
                    self.covariate_index(c)
                        .ok_or_else(|| Error::Schema(format!("unknown column `{c}`")))?,
                ),
            });
        }
        let mut out = self.clone();
        for o in &mut out.observations {
            let factor = series[&o.year] / base_index;
            for t in &targets {
                match t {
                    None => o.outcome /= factor,
                    Some(j) => o.covariates[*j] /= factor,
                }
            }
        }
        Ok(out)
    }

    /// Weight each observation by one over the number of distinct units in
    /// its state.
    pub fn state_inverse_weights(&self) -> Self {
        let mut units: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        for o in &self.observations {
            units.entry(o.state.as_str()).or_default().insert(o.unit.as_str());
        }
        let counts: HashMap<String, usize> =
            units.into_iter().map(|(s, u)| (s.to_string(), u.len())).collect();
        let mut out = self.clone();
        for o in &mut out.observations {
            o.weight = 1.0 / counts[&o.state] as f64;
        }
        out
    }

    /// Replace a covariate by its per-unit mean over pre-treatment years, so
    /// the variable cannot respond to treatment.
    pub fn prelaw_mean(&self, col: &str) -> Result<Self> {
        let j = self
            .covariate_index(col)
            .ok_or_else(|| Error::Schema(format!("unknown column `{col}`")))?;
        let t = self.treatment.year;
        let mut acc: HashMap<&str, Vec<f64>> = HashMap::new();
        for o in self.observations.iter().filter(|o| o.year < t) {
            acc.entry(o.unit.as_str()).or_default().push(o.covariates[j]);
        }
        let means: HashMap<String, f64> = acc
            .into_iter()
            .map(|(u, v)| (u.to_string(), crate::numeric::mean(&v)))
            .collect();
        let mut out = self.clone();
        for o in &mut out.observations {
            let m = means.get(&o.unit).ok_or_else(|| {
                Error::Integrity(format!("unit {} has no pre-treatment observations", o.unit))
            })?;
            o.covariates[j] = *m;
        }
        Ok(out)
    }

    /// Border-pair stacking: one copy of every observation per pair that
    /// contains its county, tagged with the pair id. Pair × year and unit ×
    /// pair dimensions become declarable on the result.
    pub fn stack_border_pairs(&self, pairs: &PairMap) -> Result<Self> {
        if self.is_stacked() {
            return Err(Error::Mapping("dataset is already stacked".into()));
        }
        let mut county_state: BTreeMap<&str, &str> = BTreeMap::new();
        for o in &self.observations {
            county_state.insert(o.county.as_str(), o.state.as_str());
        }
        for (a, b) in pairs.pairs() {
            let sa = county_state
                .get(a.as_str())
                .ok_or_else(|| Error::Mapping(format!("pair references unknown county `{a}`")))?;
            let sb = county_state
                .get(b.as_str())
                .ok_or_else(|| Error::Mapping(format!("pair references unknown county `{b}`")))?;
            if sa == sb {
                return Err(Error::Mapping(format!(
                    "pair ({a}, {b}) lies within a single state `{sa}`"
                )));
            }
        }
        let mut stacked = Vec::new();
        for (a, b) in pairs.pairs() {
            let tag = PairMap::pair_id(a, b);
            for o in &self.observations {
                if o.county == *a || o.county == *b {
                    let mut c = o.clone();
                    c.stack_tag = Some(tag.clone());
                    stacked.push(c);
                }
            }
        }
        let mut out = self.with_observations(stacked);
        if !out.is_empty() {
            out.check_treatment_span()?;
            for d in [FeDim::Pair, FeDim::PairYear, FeDim::UnitPair] {
                if !out.fe_dims.contains(&d) {
                    out.fe_dims.push(d);
                }
            }
        }
        Ok(out)
    }

    /// Write the dataset in canonical column order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = [
            "unit", "state", "county", "msa", "year", "outcome", "weight", "lat", "lon",
            "stack_tag",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.covariate_names.iter().cloned());
        wtr.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for o in &self.observations {
            let mut rec = vec![
                o.unit.clone(),
                o.state.clone(),
                o.county.clone(),
                o.msa.clone().unwrap_or_default(),
                o.year.to_string(),
                o.outcome.to_string(),
                o.weight.to_string(),
                opt(o.lat),
                opt(o.lon),
                o.stack_tag.clone().unwrap_or_default(),
            ];
            rec.extend(o.covariates.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Cross-border county pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairMap {
    pairs: Vec<(String, String)>,
}

impl PairMap {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (a, b) in &pairs {
            if a == b {
                return Err(Error::Mapping(format!("pair ({a}, {b}) repeats a county")));
            }
            let key = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
            if !seen.insert(key) {
                return Err(Error::Mapping(format!("duplicate pair ({a}, {b})")));
            }
        }
        Ok(PairMap { pairs })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn pair_id(a: &str, b: &str) -> String {
        format!("{a}|{b}")
    }

    /// Reads a two-column CSV (`county_a,county_b`) with header.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::Schema("pair file needs two columns".into()));
            }
            pairs.push((rec[0].trim().to_string(), rec[1].trim().to_string()));
        }
        PairMap::new(pairs)
    }
}

/// Load a long-format panel CSV. Every unparseable row is reported, with
/// 1-based file line numbers. Lines starting with `#` are comments.
pub fn load_panel(path: &Path, schema: &ColumnSchema, treatment: &Treatment) -> Result<PanelDataset> {
    let f = std::fs::File::open(path)?;
    read_panel(f, schema, treatment)
}

pub fn read_panel<R: Read>(
    reader: R,
    schema: &ColumnSchema,
    treatment: &Treatment,
) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let mut missing = Vec::new();
    let mut required = |name: &str| {
        let idx = find(name);
        if idx.is_none() {
            missing.push(name.to_string());
        }
        idx.unwrap_or(usize::MAX)
    };
    let unit_i = required(&schema.unit);
    let state_i = required(&schema.state);
    let year_i = required(&schema.year);
    let outcome_i = required(&schema.outcome);
    let cov_i: Vec<usize> = schema.covariates.iter().map(|c| required(c)).collect();
    let mut optional = |col: &Option<String>| -> Option<usize> {
        let name = col.as_ref()?;
        let idx = find(name);
        if idx.is_none() {
            missing.push(name.clone());
        }
        idx
    };
    let county_i = optional(&schema.county);
    let msa_i = optional(&schema.msa);
    let weight_i = optional(&schema.weight);
    let lat_i = optional(&schema.lat);
    let lon_i = optional(&schema.lon);
    let tag_i = optional(&schema.stack_tag);
    if !missing.is_empty() {
        return Err(Error::Schema(format!("missing column(s): {}", missing.join(", "))));
    }

    let mut problems = Vec::new();
    let mut observations = Vec::new();
    let mut lines: Vec<u64> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(row as u64 + 2, |p| p.line());
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let line = rec.position().map_or(row as u64 + 2, |p| p.line());
        let get = |i: usize| rec.get(i).unwrap_or("");
        let mut row_problems = Vec::new();
        let text = |i: usize, role: &str, errs: &mut Vec<String>| -> String {
            let v = get(i);
            if v.is_empty() {
                errs.push(format!("empty {role}"));
            }
            v.to_string()
        };
        let real = |i: usize, role: &str, errs: &mut Vec<String>| -> f64 {
            match get(i).parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    errs.push(format!("{role} `{}` is not a finite number", get(i)));
                    f64::NAN
                }
            }
        };
        let opt_real = |i: Option<usize>, role: &str, errs: &mut Vec<String>| -> Option<f64> {
            let i = i?;
            let v = get(i);
            if v.is_empty() {
                return None;
            }
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Some(x),
                _ => {
                    errs.push(format!("{role} `{v}` is not a finite number"));
                    None
                }
            }
        };
        let opt_text = |i: Option<usize>| -> Option<String> {
            let v = get(i?);
            (!v.is_empty()).then(|| v.to_string())
        };

        let unit = text(unit_i, "unit", &mut row_problems);
        let state = text(state_i, "state", &mut row_problems);
        let year = match get(year_i).parse::<i32>() {
            Ok(y) => y,
            Err(_) => {
                row_problems.push(format!("year `{}` is not an integer", get(year_i)));
                0
            }
        };
        let outcome = real(outcome_i, "outcome", &mut row_problems);
        let weight = match opt_real(weight_i, "weight", &mut row_problems) {
            Some(w) if w <= 0.0 => {
                row_problems.push(format!("weight {w} is not positive"));
                w
            }
            Some(w) => w,
            None => 1.0,
        };
        let lat = opt_real(lat_i, "lat", &mut row_problems);
        let lon = opt_real(lon_i, "lon", &mut row_problems);
        if lat.is_some() != lon.is_some() {
            row_problems.push("lat and lon must both be present or both absent".into());
        }
        let covariates: Vec<f64> = cov_i
            .iter()
            .zip(&schema.covariates)
            .map(|(&i, name)| real(i, name, &mut row_problems))
            .collect();
        if !row_problems.is_empty() {
            problems.push(format!("line {line}: {}", row_problems.join("; ")));
            continue;
        }
        let county = opt_text(county_i).unwrap_or_else(|| unit.clone());
        observations.push(Observation {
            unit,
            state,
            county,
            msa: opt_text(msa_i),
            year,
            outcome,
            weight,
            lat,
            lon,
            covariates,
            stack_tag: opt_text(tag_i),
        });
        lines.push(line);
    }
    if !problems.is_empty() {
        return Err(Error::Parse(problems));
    }

    let mut seen: HashMap<(&str, i32, Option<&str>), u64> = HashMap::new();
    for (o, &line) in observations.iter().zip(&lines) {
        if let Some(first) = seen.insert((&o.unit, o.year, o.stack_tag.as_deref()), line) {
            return Err(Error::Integrity(format!(
                "duplicate (unit {}, year {}) on lines {first} and {line}",
                o.unit, o.year
            )));
        }
    }

    let log_roles: Vec<String> = schema
        .log_columns
        .iter()
        .map(|c| if *c == schema.outcome { "outcome".to_string() } else { c.clone() })
        .collect();
    PanelDataset::new(observations, schema.covariates.clone(), treatment.clone())?
        .with_log_columns(log_roles)
}

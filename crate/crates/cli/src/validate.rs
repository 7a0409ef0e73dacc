//! Full validation of a spec without running it. Every problem found is
//! reported; nothing stops at the first.

use std::fmt;
use std::path::Path;

use hel_core::dgp::EffectSpec;
use hel_core::did::DidMode;
use hel_core::infer::{VarianceKind, VariancePlan};
use hel_core::panel::{ColumnSchema, FeDim};
use serde::Serialize;

use crate::spec::{Command, DesignSection, LoadedSpec, RunSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// Dotted location in the spec, e.g. `variance[1]` or `input.panel`.
    pub at: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.at, self.message)
    }
}

#[derive(Default)]
struct Diags(Vec<Diagnostic>);

impl Diags {
    fn push(&mut self, at: impl Into<String>, message: impl Into<String>) {
        self.0.push(Diagnostic { at: at.into(), message: message.into() });
    }
}

/// Validates a spec file. A file that does not parse yields one diagnostic.
pub fn validate_path(path: &Path, out_override: Option<&Path>) -> Vec<Diagnostic> {
    match crate::spec::load(path) {
        Ok(l) => validate(&l, out_override),
        Err(e) => vec![Diagnostic { at: "spec".into(), message: e }],
    }
}

pub fn validate(l: &LoadedSpec, out_override: Option<&Path>) -> Vec<Diagnostic> {
    let s = &l.spec;
    let mut d = Diags::default();
    unused_sections(s, &mut d);
    check_out_dir(&l.out_dir(out_override), &mut d);
    match s.command {
        Command::Estimate => estimate(l, &mut d),
        Command::Synth => synth(l, &mut d),
        Command::Model => model(s, &mut d),
        Command::Dgp => match &s.dgp {
            None => d.push("dgp", "command `dgp` needs a [dgp] section"),
            Some(cfg) => {
                seed_agrees(s.seed, cfg.seed, "dgp.seed", &mut d);
                if let Err(e) = cfg.validate() {
                    d.push("dgp", e.to_string());
                }
            }
        },
        Command::Montecarlo => montecarlo(s, &mut d),
    }
    d.0
}

fn unused_sections(s: &RunSpec, d: &mut Diags) {
    let used: &[&str] = match s.command {
        Command::Estimate => &["input", "schema", "design", "variance"],
        Command::Synth => &["input", "schema", "synth"],
        Command::Model => &["model"],
        Command::Dgp => &["dgp"],
        Command::Montecarlo => &["montecarlo"],
    };
    let present = [
        ("input", s.input.is_some()),
        ("schema", s.schema.is_some()),
        ("design", s.design.is_some()),
        ("variance", !s.variance.is_empty()),
        ("synth", s.synth.is_some()),
        ("model", s.model.is_some()),
        ("dgp", s.dgp.is_some()),
        ("montecarlo", s.montecarlo.is_some()),
    ];
    for (name, here) in present {
        if here && !used.contains(&name) {
            d.push(name, format!("section is not used by command `{}`", s.command));
        }
    }
}

fn check_out_dir(dir: &Path, d: &mut Diags) {
    let mut p = Some(dir);
    while let Some(cur) = p {
        if let Ok(m) = std::fs::metadata(cur) {
            if !m.is_dir() {
                d.push("out", format!("{} is not a directory", cur.display()));
            } else if m.permissions().readonly() {
                d.push("out", format!("{} is not writable", cur.display()));
            }
            return;
        }
        p = cur.parent().filter(|q| !q.as_os_str().is_empty());
    }
}

fn seed_agrees(top: u64, inner: u64, at: &str, d: &mut Diags) {
    if inner != 0 && inner != top {
        d.push(at, format!("conflicts with top-level seed {top}; set the seed only at the top level"));
    }
}

/// Header of a CSV file, with `#` comment lines skipped.
fn csv_header(path: &Path) -> Result<Vec<String>, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| e.to_string())?;
    Ok(rdr.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect())
}

/// Checks the `[input]` files and that every schema column is present.
fn input_files(l: &LoadedSpec, d: &mut Diags) -> bool {
    let Some(input) = &l.spec.input else {
        d.push("input", format!("command `{}` needs an [input] section", l.spec.command));
        return false;
    };
    let panel = l.resolve(&input.panel);
    let mut ok = true;
    if !panel.is_file() {
        d.push("input.panel", format!("file not found: {}", panel.display()));
        ok = false;
    } else {
        match csv_header(&panel) {
            Err(e) => d.push("input.panel", format!("{}: {e}", panel.display())),
            Ok(h) => {
                for col in schema_columns(&l.panel_schema()) {
                    if !h.iter().any(|c| c == col) {
                        d.push("schema", format!("column `{col}` is not in {}", panel.display()));
                    }
                }
            }
        }
    }
    if let Some(p) = &input.pairs {
        let p = l.resolve(p);
        if !p.is_file() {
            d.push("input.pairs", format!("file not found: {}", p.display()));
        }
    }
    ok
}

fn schema_columns(s: &ColumnSchema) -> Vec<&str> {
    let mut v = vec![s.unit.as_str(), s.state.as_str(), s.year.as_str(), s.outcome.as_str()];
    for c in [&s.county, &s.msa, &s.weight, &s.lat, &s.lon, &s.stack_tag].into_iter().flatten() {
        v.push(c);
    }
    v.extend(s.covariates.iter().map(String::as_str));
    v
}

/// Whether a dimension can resolve given the schema and stacking.
fn dim_available(dim: FeDim, schema: &ColumnSchema, stacked: bool) -> Result<(), String> {
    match dim {
        FeDim::Msa if schema.msa.is_none() => Err("needs an `msa` column in [schema]".into()),
        FeDim::Pair | FeDim::PairYear | FeDim::UnitPair if !stacked && schema.stack_tag.is_none() => {
            Err("needs border pairs (`input.pairs`) or a `stack_tag` column in [schema]".into())
        }
        _ => Ok(()),
    }
}

fn check_plans(plans: &[VariancePlan], at: &str, schema: Option<&ColumnSchema>, stacked: bool, d: &mut Diags) {
    if plans.is_empty() {
        d.push(at, "at least one variance plan is required");
    }
    for (i, p) in plans.iter().enumerate() {
        let here = format!("{at}[{i}]");
        let dims: Vec<FeDim> = match &p.kind {
            VarianceKind::Cluster { dim } => vec![*dim],
            VarianceKind::TwoWayCluster { dim_a, dim_b } => {
                if dim_a == dim_b {
                    d.push(&here, "two-way clustering needs two different dimensions");
                }
                vec![*dim_a, *dim_b]
            }
            VarianceKind::Spatial { cutoff_km, .. } => {
                if !(cutoff_km.is_finite() && *cutoff_km >= 0.0) {
                    d.push(&here, format!("cutoff_km must be finite and ≥ 0, got {cutoff_km}"));
                }
                if let Some(s) = schema {
                    if !s.has_coordinates() {
                        d.push(
                            &here,
                            format!(
                                "spatial plan `{}` needs coordinates, but [schema] sets no `lat`/`lon` columns",
                                p.name()
                            ),
                        );
                    }
                }
                vec![]
            }
            _ => vec![],
        };
        if let Some(s) = schema {
            for dim in dims {
                if let Err(e) = dim_available(dim, s, stacked) {
                    d.push(&here, format!("cluster dimension `{}` {e}", dim.name()));
                }
            }
        }
    }
}

fn check_design(
    ds: &DesignSection,
    at: &str,
    schema: Option<&ColumnSchema>,
    stacked: bool,
    first_year: Option<i32>,
    d: &mut Diags,
) {
    match ds.mode {
        DidMode::Triple if ds.heterogeneity.is_none() => {
            d.push(at, "triple design needs `heterogeneity = { column = \"...\" }`")
        }
        DidMode::Static | DidMode::Dynamic if ds.heterogeneity.is_some() => {
            d.push(format!("{at}.heterogeneity"), "only the triple design uses a heterogeneity column")
        }
        _ => {}
    }
    if ds.base_year.is_some() && ds.mode != DidMode::Dynamic {
        d.push(format!("{at}.base_year"), "only the dynamic design has a base year");
    }
    if let (Some(b), Some(f)) = (ds.base_year, first_year) {
        if b < f {
            d.push(format!("{at}.base_year"), format!("base year {b} precedes the first year {f}"));
        }
    }
    if let Some(s) = schema {
        for c in ds.columns() {
            if !s.covariates.iter().any(|x| x == c) {
                d.push(at, format!("column `{c}` is not listed in the schema covariates"));
            }
        }
        for dim in ds.dims(stacked) {
            if let Err(e) = dim_available(dim, s, stacked) {
                d.push(at, format!("dimension `{}` {e}", dim.name()));
            }
        }
    }
}

fn estimate(l: &LoadedSpec, d: &mut Diags) {
    let s = &l.spec;
    input_files(l, d);
    let schema = l.panel_schema();
    let stacked = s.input.as_ref().is_some_and(|i| i.pairs.is_some());
    match &s.design {
        None => d.push("design", "command `estimate` needs a [design] section"),
        Some(ds) => check_design(ds, "design", Some(&schema), stacked, None, d),
    }
    check_plans(&s.variance, "variance", Some(&schema), stacked, d);
}

fn grid_ok(grid: &Option<Vec<hel_core::synth::GridPoint>>, at: &str, d: &mut Diags) {
    if let Some(g) = grid {
        if g.is_empty() {
            d.push(at, "grid is empty");
        }
        for (i, p) in g.iter().enumerate() {
            if let Err(e) = hel_core::synth::GridPoint::new(p.lambda, p.alpha) {
                d.push(format!("{at}[{i}]"), e.to_string());
            }
        }
    }
}

fn synth(l: &LoadedSpec, d: &mut Diags) {
    let s = &l.spec;
    let Some(sy) = &s.synth else {
        d.push("synth", "command `synth` needs a [synth] section");
        return;
    };
    grid_ok(&sy.grid, "synth.grid", d);
    match (&sy.simulate, &s.input) {
        (Some(_), Some(_)) => d.push("synth.simulate", "give either [input] or [synth.simulate], not both"),
        (None, None) => d.push("input", "command `synth` needs an [input] section or [synth.simulate]"),
        (Some(cfg), None) => {
            seed_agrees(s.seed, cfg.seed, "synth.simulate.seed", d);
            if let Err(e) = cfg.validate() {
                d.push("synth.simulate", e.to_string());
            }
            if !sy.extras.is_empty() {
                d.push("synth.extras", "simulated panels carry no extra predictors");
            }
        }
        (None, Some(input)) => {
            input_files(l, d);
            if input.pairs.is_some() {
                d.push("input.pairs", "synthetic control needs an unstacked panel");
            }
            let schema = l.panel_schema();
            for c in &sy.extras {
                if !schema.covariates.contains(c) {
                    d.push("synth.extras", format!("column `{c}` is not listed in the schema covariates"));
                }
            }
            if sy.outcome != "outcome" && !schema.covariates.contains(&sy.outcome) {
                d.push(
                    "synth.outcome",
                    format!("`{}` is neither `outcome` nor a schema covariate", sy.outcome),
                );
            }
        }
    }
}

fn model(s: &RunSpec, d: &mut Diags) {
    let Some(m) = &s.model else {
        d.push("model", "command `model` needs a [model] section");
        return;
    };
    if m.path.is_none() && m.timing.is_none() && m.three_period.is_empty() {
        d.push("model", "nothing to do: give [model.path], [model.timing] or [[model.three_period]]");
    }
    if let Some(h) = &m.household {
        if let Err(e) = h.validate() {
            d.push("model.household", e.to_string());
        }
    } else if m.path.is_some() || m.timing.is_some() {
        d.push("model.household", "path and timing checks need [model.household]");
    }
    if let Some(p) = &m.path {
        let n = p.c.len();
        if n < 2 {
            d.push("model.path", "a path needs at least two periods");
        }
        for (name, len) in [("h", p.h.len()), ("r", p.r.len()), ("kappa", p.kappa.len()), ("delta", p.delta.len())] {
            if len != n {
                d.push(format!("model.path.{name}"), format!("has {len} entries, `c` has {n}"));
            }
        }
        if m.tail.is_some() && p.delta.windows(2).any(|w| w[0] != w[1]) {
            d.push("model.tail", "price decomposition needs a constant depreciation rate along the path");
        }
    } else if m.tail.is_some() {
        d.push("model.tail", "a tail is only used to decompose the price of [model.path]");
    }
    for (i, t) in m.three_period.iter().enumerate() {
        if let Err(e) = t.validate() {
            d.push(format!("model.three_period[{i}]"), e.to_string());
        }
    }
    if let Some(r) = m.grid_resolution {
        if !(r > 0.0 && r.is_finite()) {
            d.push("model.grid_resolution", "must be positive");
        }
    }
    if !(m.fd_step > 0.0 && m.fd_step.is_finite()) {
        d.push("model.fd_step", "must be positive");
    }
}

fn montecarlo(s: &RunSpec, d: &mut Diags) {
    let Some(mc) = &s.montecarlo else {
        d.push("montecarlo", "command `montecarlo` needs a [montecarlo] section");
        return;
    };
    if mc.reps == 0 {
        d.push("montecarlo.reps", "needs at least one replication");
    }
    if mc.did.is_none() && mc.synth.is_none() {
        d.push("montecarlo", "give [montecarlo.did], [montecarlo.synth] or both");
    }
    if let Some(did) = &mc.did {
        seed_agrees(s.seed, did.dgp.seed, "montecarlo.did.dgp.seed", d);
        if let Err(e) = did.dgp.validate() {
            d.push("montecarlo.did.dgp", e.to_string());
        }
        // Simulated panels carry every canonical column plus `oil`, and `h`
        // under a heterogeneous effect.
        let mut covs = vec!["oil".to_string()];
        if matches!(did.dgp.effect, EffectSpec::Heterogeneous { .. }) {
            covs.push("h".into());
        }
        let schema = ColumnSchema::canonical(&covs, &[]);
        check_design(&did.design, "montecarlo.did.design", Some(&schema), false, Some(did.dgp.first_year), d);
        check_plans(&did.variance, "montecarlo.did.variance", Some(&schema), false, d);
    }
    if let Some(sy) = &mc.synth {
        seed_agrees(s.seed, sy.dgp.seed, "montecarlo.synth.dgp.seed", d);
        if let Err(e) = sy.dgp.validate() {
            d.push("montecarlo.synth.dgp", e.to_string());
        }
        grid_ok(&sy.grid, "montecarlo.synth.grid", d);
    }
}

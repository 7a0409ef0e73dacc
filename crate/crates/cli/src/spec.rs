//! Run specification: a TOML file with one top-level `command` and the
//! sections that command reads. See `docs/spec-format.md` for the grammar.

use std::fmt;
use std::path::{Path, PathBuf};

use hel_core::did::{DidMode, DidSpec, Heterogeneity};
use hel_core::dgp::{DgpConfig, SynthDgpConfig};
use hel_core::housemodel::{HouseholdParams, PathSpec, StationaryTail, ThreePeriodInput};
use hel_core::infer::VariancePlan;
use hel_core::panel::{ColumnSchema, FeDim, Treatment};
use hel_core::regress::{Term, Weighting};
use hel_core::synth::GridPoint;
use serde::Deserialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Estimate,
    Synth,
    Model,
    Dgp,
    Montecarlo,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Synth => "synth",
            Command::Model => "model",
            Command::Dgp => "dgp",
            Command::Montecarlo => "montecarlo",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the spec file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub input: Option<InputSpec>,
    #[serde(default)]
    pub schema: Option<ColumnSchema>,
    #[serde(default)]
    pub design: Option<DesignSection>,
    #[serde(default)]
    pub variance: Vec<VariancePlan>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub dgp: Option<DgpConfig>,
    #[serde(default)]
    pub montecarlo: Option<MonteCarloSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub panel: PathBuf,
    pub treatment: Treatment,
    /// Two-column CSV of border county pairs; stacks the panel when given.
    #[serde(default)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendLevel {
    State,
    Msa,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub mode: DidMode,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub base_year: Option<i32>,
    #[serde(default)]
    pub heterogeneity: Option<Heterogeneity>,
    /// Covariate columns entered linearly.
    #[serde(default)]
    pub controls: Vec<String>,
    /// Covariate columns interacted with MSA dummies.
    #[serde(default)]
    pub by_msa: Vec<String>,
    #[serde(default)]
    pub trends: Option<TrendLevel>,
    /// Fully specified extra regressors.
    #[serde(default)]
    pub terms: Vec<Term>,
    /// Defaults to unit and year, or unit × pair and pair × year on a
    /// stacked panel.
    #[serde(default)]
    pub absorb: Option<Vec<FeDim>>,
    #[serde(default)]
    pub weights: Weighting,
}

impl DesignSection {
    pub fn absorb(&self, stacked: bool) -> Vec<FeDim> {
        self.absorb.clone().unwrap_or_else(|| {
            if stacked {
                vec![FeDim::UnitPair, FeDim::PairYear]
            } else {
                vec![FeDim::Unit, FeDim::Year]
            }
        })
    }

    pub fn did_spec(&self, stacked: bool) -> DidSpec {
        let mut controls: Vec<Term> = self.controls.iter().map(|c| Term::column(c)).collect();
        controls.extend(self.by_msa.iter().map(|c| Term::by_msa(c)));
        match self.trends {
            Some(TrendLevel::State) => controls.push(Term::state_trends()),
            Some(TrendLevel::Msa) => controls.push(Term::msa_trends()),
            None => {}
        }
        controls.extend(self.terms.iter().cloned());
        let mut spec = DidSpec::new(self.mode).with_controls(controls).with_absorb(self.absorb(stacked));
        if let Some(r) = &self.response {
            spec.response = r.clone();
        }
        spec.base_year = self.base_year;
        spec.heterogeneity = self.heterogeneity.clone();
        spec.weights = self.weights;
        spec
    }

    /// Covariate columns the design reads.
    pub fn columns(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.controls.iter().chain(&self.by_msa).map(String::as_str).collect();
        if let Some(h) = &self.heterogeneity {
            v.push(&h.column);
        }
        v
    }

    /// Dimensions the design needs to resolve on every observation.
    pub fn dims(&self, stacked: bool) -> Vec<FeDim> {
        let mut d = self.absorb(stacked);
        if !self.by_msa.is_empty() || self.trends == Some(TrendLevel::Msa) {
            d.push(FeDim::Msa);
        }
        d
    }
}

fn yes() -> bool {
    true
}

fn outcome() -> String {
    "outcome".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(default = "outcome")]
    pub outcome: String,
    /// Covariates used as extra predictors.
    #[serde(default)]
    pub extras: Vec<String>,
    #[serde(default = "yes")]
    pub placebos: bool,
    #[serde(default)]
    pub grid: Option<Vec<GridPoint>>,
    /// Simulate the panel instead of reading `[input]`.
    #[serde(default)]
    pub simulate: Option<SynthDgpConfig>,
}

fn fd_step() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    pub c: [f64; 2],
    pub h_next: f64,
    pub mu: [f64; 2],
    pub kappa: [f64; 2],
    pub p: [f64; 3],
    #[serde(default)]
    pub delta_next: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub household: Option<HouseholdParams>,
    #[serde(default)]
    pub path: Option<PathSpec>,
    /// Stationary tail for decomposing the first-period price of `path`.
    #[serde(default)]
    pub tail: Option<StationaryTail>,
    #[serde(default)]
    pub timing: Option<TimingSection>,
    #[serde(default)]
    pub three_period: Vec<ThreePeriodInput>,
    /// Grid spacing for the brute-force check of three-period solutions.
    #[serde(default)]
    pub grid_resolution: Option<f64>,
    #[serde(default = "fd_step")]
    pub fd_step: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McDid {
    pub dgp: DgpConfig,
    pub design: DesignSection,
    pub variance: Vec<VariancePlan>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSynth {
    pub dgp: SynthDgpConfig,
    #[serde(default)]
    pub grid: Option<Vec<GridPoint>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub reps: u64,
    #[serde(default)]
    pub did: Option<McDid>,
    #[serde(default)]
    pub synth: Option<McSynth>,
}

/// A parsed spec with its provenance.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub spec: RunSpec,
    pub path: PathBuf,
    /// Lowercase hex SHA-256 of the spec file bytes.
    pub hash: String,
}

impl LoadedSpec {
    pub fn dir(&self) -> &Path {
        self.path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
    }

    /// Resolves a spec-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir().join(p)
        }
    }

    /// `override_dir`, else the spec's `out`, else `out/<spec stem>` next to
    /// the spec.
    pub fn out_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        if let Some(o) = override_dir {
            return o.to_path_buf();
        }
        match &self.spec.out {
            Some(o) => self.resolve(o),
            None => {
                let stem = self.path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
                self.dir().join("out").join(stem)
            }
        }
    }

    pub fn panel_schema(&self) -> ColumnSchema {
        self.spec.schema.clone().unwrap_or_default()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Reads and parses a spec. Parse failures come back as a single message.
pub fn load(path: &Path) -> Result<LoadedSpec, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| format!("{} is not UTF-8: {e}", path.display()))?;
    let spec: RunSpec = toml::from_str(text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(LoadedSpec { spec, path: path.to_path_buf(), hash: sha256_hex(&bytes) })
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse errors:\n{}", .0.join("\n"))]
    Parse(Vec<String>),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("deflator coverage error: no index value for year {0}")]
    Coverage(i32),

    #[error("refusing to deflate log-scale column `{0}`")]
    LogColumn(String),

    #[error("pair mapping error: {0}")]
    Mapping(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("empty design: every regressor was absorbed or dropped ({0})")]
    EmptyDesign(String),

    #[error("fixed-effect absorption did not converge after {iterations} iterations (last max group mean {last_norm:e})")]
    Convergence { iterations: usize, last_norm: f64 },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("identification error: {0}")]
    Identification(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("coordinate descent did not converge after {sweeps} sweeps (final objective {final_objective:e})")]
    SynthConvergence {
        sweeps: usize,
        final_objective: f64,
        objective_trace: Vec<f64>,
    },

    #[error("cross-validation error: {0}")]
    CrossValidation(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("divergent present value: {0}")]
    Divergence(String),

    #[error("no constraint pattern yields a KKT point:\n{}", .0.join("\n"))]
    Kkt(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

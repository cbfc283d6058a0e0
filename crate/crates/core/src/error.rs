use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid microstructure: {0}")]
    InvalidSpec(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid cell problem: {0}")]
    InvalidCellProblem(String),

    #[error("invalid cut problem: {0}")]
    InvalidCutProblem(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid regime plan: {0}")]
    InvalidPlan(String),

    #[error("matrix graph is disconnected ({components} components)")]
    DisconnectedMatrix { components: usize },

    #[error("conjugate gradient breakdown: {0}")]
    SolverBreakdown(String),

    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("resolution mismatch: corrector M = {corrector}, lattice M = {lattice}")]
    ResolutionMismatch { corrector: usize, lattice: usize },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

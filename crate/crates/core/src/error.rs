use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Evaluation point or argument outside the region where the map is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite value or failed factorization.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Dimension mismatch or violated precondition on the caller's side.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A waypoint lies on or outside one of its polytope half-spaces.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Optimization problem reported infeasible.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml write error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

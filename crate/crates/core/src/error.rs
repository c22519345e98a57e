use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke a precondition (shape mismatch, missing capture, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A kernel produced NaN or Inf.
    #[error("numerical failure in {op}{}", location.as_deref().map(|l| format!(" at {l}")).unwrap_or_default())]
    Numerical {
        op: String,
        location: Option<String>,
    },

    /// Checked matmul refused to run because n*u > 0.01.
    #[error("precision unsupported for checksummed matmul: n*u = {nu} > 0.01 (n = {n}, u = {u})")]
    PrecisionUnsupported { n: usize, u: f64, nu: f64 },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    /// A runtime self-check failed.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(op: impl Into<String>) -> Self {
        Error::Numerical {
            op: op.into(),
            location: None,
        }
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }

    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::PrecisionUnsupported { .. } => 1,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 1,
            Error::Contract(_) | Error::Invariant(_) => 2,
            Error::Numerical { .. } => 3,
        }
    }
}

/// Attaches a location to numerical failures as they bubble up.
pub trait Locate<T> {
    fn locate(self, loc: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Locate<T> for Result<T> {
    fn locate(self, loc: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| match e {
            Error::Numerical { op, location } => {
                let here = loc();
                let location = Some(match location {
                    Some(inner) => format!("{here}, {inner}"),
                    None => here,
                });
                Error::Numerical { op, location }
            }
            other => other,
        })
    }
}

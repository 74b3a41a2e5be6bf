use crate::cases::CaseError;
use crate::config::ConfigError;
use crate::fvm::FvmError;
use crate::io::FormatError;
use crate::linsolve::SolverError;
use crate::mesh::MeshError;
use crate::profile::ProfileError;
use crate::sparse::SparseError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Fvm(#[from] FvmError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

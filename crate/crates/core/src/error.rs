use thiserror::Error;

/// Errors raised by lattice construction, eigensolves and phase tracking.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("plaquette ({px}, {py}) lies outside a {lx}x{ly} lattice")]
    PlaquetteOutOfBounds { px: usize, py: usize, lx: usize, ly: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("ground state degenerate: gap {gap:.3e} between levels {n} and {} is below {tolerance:.1e}", n + 1)]
    GroundStateDegenerate { n: usize, gap: f64, tolerance: f64 },

    #[error(
        "occupied subspaces are orthogonal (smallest singular value {smallest_singular:.3e}); adiabatic tracking lost"
    )]
    AlignmentLost { smallest_singular: f64 },

    #[error("no band gap: widest spectral window {largest_gap:.3e} is below {threshold:.3e}")]
    NoBandGap { largest_gap: f64, threshold: f64 },

    #[error("eigendecomposition failed to converge")]
    EigenSolver,

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{job}: {source}")]
    InJob {
        job: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn in_job(self, job: impl Into<String>) -> Self {
        Error::InJob {
            job: job.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with step and job annotations removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } | Error::InJob { source, .. } => source.root(),
            e => e,
        }
    }

    /// Step index attached by a sweep, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::AtStep { step, .. } => Some(*step),
            Error::InJob { source, .. } => source.step(),
            _ => None,
        }
    }

    /// Whether the error signals a breakdown of adiabatic tracking.
    pub fn is_tracking_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::GroundStateDegenerate { .. } | Error::AlignmentLost { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

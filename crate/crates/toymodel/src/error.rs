use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error(transparent)]
    Core(#[from] magattn::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("non-finite loss at step {}: {}", .0.step, .0)]
    Diverged(Box<Divergence>),
}

/// Snapshot taken when training produces a non-finite loss or gradient.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub step: usize,
    pub alpha: f64,
    pub loss: f64,
    /// Per-parameter gradient norms (NaN where the gradient itself is not finite).
    pub grad_norms: Vec<(String, f64)>,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "loss={} alpha={}", self.loss, self.alpha)?;
        for (name, n) in &self.grad_norms {
            write!(f, "\n  |grad {name}| = {n}")?;
        }
        Ok(())
    }
}

pub type Result<T, E = ToyError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ToyError {
    let path = path.into();
    move |source| ToyError::Io { path, source }
}

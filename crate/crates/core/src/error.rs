use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the controller, simulator and experiment harness.
#[derive(Error, Debug)]
pub enum Error {
    /// A state or input became non-finite, or the attitude left the operating envelope.
    #[error("integration diverged: {0}")]
    Divergence(String),
    /// The target projects with a depth at or below the near plane.
    #[error("target behind camera (depth {depth:.4} m)")]
    TargetBehindCamera { depth: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// The QP has no feasible point (only reachable without obstacle slacks).
    #[error("QP infeasible")]
    QpInfeasible,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// Rejection sampling of goals or obstacles gave up.
    #[error("scenario sampling exhausted after {0} rejections")]
    SamplingExhausted(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("expression error: {0}")]
    Expr(String),

    #[error("invalid field configuration: {0}")]
    Field(String),

    #[error("invalid temperature field: {0}")]
    Temperature(String),

    #[error("trajectory leaves the half-space between t = {t_lo} and t = {t_hi}")]
    ExitedHalfSpace { t_lo: f64, t_hi: f64 },

    #[error("boundary-crossing bisection did not converge after {iterations} iterations (last |x3| = {residual:e})")]
    BisectionFailed { iterations: usize, residual: f64 },

    #[error("no boundary exit within {max_time} time units")]
    NoExit { max_time: f64 },

    #[error("degenerate bounce map: B3 * t_b = {phase} is resonant")]
    DegenerateBounce { phase: f64 },

    #[error("velocity inversion for the bounce map did not converge (residual {residual:e})")]
    InversionFailed { residual: f64 },

    #[error("wrong field regime: {0}")]
    WrongRegime(String),

    #[error("power iteration did not converge in {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("initial fluctuation makes F0 negative on {fraction:.4} of samples")]
    NegativeInitialData { fraction: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

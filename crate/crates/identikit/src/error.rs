use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("state norm exceeded blow-up bound {bound:.3e} at t = {t:.6} (|z| = {norm:.3e})")]
    BlowUp { t: f64, norm: f64, bound: f64 },

    #[error("step size underflow at t = {t:.6}")]
    StepUnderflow { t: f64 },

    #[error("state left its declared domain at t = {t:.6} (coordinate {index})")]
    DomainExit { t: f64, index: usize },

    #[error("point outside declared domain (coordinate {index}, value {value})")]
    OutOfDomain { index: usize, value: f64 },

    #[error("model has no derivative support")]
    MissingPartials,

    #[error("domain error evaluating `{op}` on {arg}")]
    EvalDomain { op: &'static str, arg: f64 },

    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("unknown identifier `{name}`")]
    UnknownIdentifier { name: String },

    #[error("cannot differentiate: {msg}")]
    UnsupportedDerivative { msg: String },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("could not sample {q} points with separation {delta} after {attempts} attempts")]
    SamplingExhausted { q: usize, delta: f64, attempts: usize },

    #[error("argument {value} outside bracket [{lo}, {hi}]")]
    OutOfBracket { value: f64, lo: f64, hi: f64 },

    #[error("zero direction vector")]
    ZeroDirection,

    #[error("input vectors are linearly dependent")]
    DegenerateInputs,

    #[error("parameter failed the nonsingularity probe")]
    SingularParameter,

    #[error("secant margin {margin:.3e} below required {required:.3e}")]
    MarginTooSmall { margin: f64, required: f64 },

    #[error("{0}")]
    Validation(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

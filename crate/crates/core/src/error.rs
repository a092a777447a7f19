use thiserror::Error;

/// Errors raised by the toolkit. Each variant's message is prefixed with the
/// module that produced it so the CLI can surface it verbatim.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("lti: {0}")]
    Lti(String),
    #[error("lti: pole on the imaginary axis at {freq_hz} Hz")]
    PoleOnAxis { freq_hz: f64 },
    #[error("lti: improper transfer function (numerator degree {num_degree} > denominator degree {den_degree})")]
    Improper { num_degree: usize, den_degree: usize },
    #[error("lti: dimension mismatch: {0}")]
    Dimension(String),
    #[error("lti: time step {dt} s too large, use dt <= {required} s")]
    StepTooLarge { dt: f64, required: f64 },
    #[error("refplant: {0}")]
    Plant(String),
    #[error("channel: {0}")]
    Channel(String),
    #[error("channel: simulation rate {actual} Hz too low, need at least {required} Hz")]
    SampleRateTooLow { actual: f64, required: f64 },
    #[error("delaymodel: {0}")]
    Delay(String),
    #[error("sysid: {0}")]
    Sysid(String),
    #[error("sysid: low excitation: coherence below 0.6 on {bad} of {total} band points")]
    LowCoherence { bad: usize, total: usize },
    #[error("poddesign: {0}")]
    Design(String),
    #[error("poddesign: NY-LIMIT: mode at {mode_hz:.4} Hz exceeds the channel Nyquist limit {limit_hz:.4} Hz")]
    NyquistLimit { mode_hz: f64, limit_hz: f64 },
    #[error("poddesign: infeasible operating point: {0}")]
    Infeasible(String),
    #[error("analysis: {0}")]
    Analysis(String),
    #[error("analysis: mode matching ambiguous near {target_hz:.4} Hz, candidates {candidates_hz:?}")]
    AmbiguousMode { target_hz: f64, candidates_hz: Vec<f64> },
    #[error("simloop: {0}")]
    Sim(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

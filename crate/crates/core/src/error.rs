use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input {value} passed to {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("singular local design at t = {t} with bandwidth h = {h}")]
    SingularDesign { t: f64, h: f64 },

    #[error("estimation failed at every grid point (bandwidth {h})")]
    AllSingular { h: f64 },

    #[error("every cross-validation candidate was invalid")]
    NoValidCandidate,

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset is empty")]
    EmptyDataset,
}

impl Error {
    /// True for errors caused by bad arguments or data rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. } | Error::InvalidInput(_) | Error::EmptyDataset | Error::Contract(_)
        )
    }
}

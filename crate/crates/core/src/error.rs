use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A share denominator (Σd or Σq) is zero.
    #[error("degenerate market: {0} sums to zero")]
    DegenerateMarket(&'static str),
    #[error("invalid data quality {quality} for owner {owner}")]
    InvalidQuality { owner: usize, quality: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("at least 2 participating data owners required, got {0}")]
    InsufficientParticipants(usize),
    #[error("at least 2 computing centers required, got {0}")]
    InsufficientCenters(usize),
    #[error("no viable market: {0}")]
    NoViableMarket(String),
    #[error("training diverged in round {round} at center {center}")]
    TrainingDiverged { round: usize, center: usize },
}

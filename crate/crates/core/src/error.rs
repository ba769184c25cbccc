use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input violated a documented invariant.
    #[error("invalid input: {0}")]
    Validation(String),
    /// Matrix or grid shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// `|S|^2 <= n n'`: the moments admit a classical description and losses
    /// cannot be measured absolutely.
    #[error("classical regime: |S|^2 = {s_sq} <= n n' = {product}; absolute loss measurement impossible")]
    ClassicalRegime { s_sq: f64, product: f64 },
    /// Moments map to an efficiency outside (0, 1].
    #[error("inconsistent moments: {0}")]
    Physicality(String),
    /// The photon-number grid is too small for the requested tail bound.
    #[error("truncation: tail mass {tail_mass:e} exceeds bound {bound:e} at n_max={n_max}")]
    Truncation { n_max: usize, tail_mass: f64, bound: f64 },
    /// The input carries no information for this estimator.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// Observed counts in a cell the model assigns zero probability.
    #[error("support error: {count} counts observed at (k={k}, l={l}) where the model probability is zero")]
    Support { k: usize, l: usize, count: u64 },
    /// Marginal variance does not exceed the mean.
    #[error("sub-Poissonian marginal: variance {variance} <= mean {mean}")]
    SubPoissonianMarginal { mean: f64, variance: f64 },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    /// Stable short identifier, used in machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Dimension(_) => "dimension",
            Error::ClassicalRegime { .. } => "classical_regime",
            Error::Physicality(_) => "physicality",
            Error::Truncation { .. } => "truncation",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Support { .. } => "support",
            Error::SubPoissonianMarginal { .. } => "sub_poissonian_marginal",
        }
    }
}

//! Market participants, strategy profiles and the three utility functions.
//!
//! Quantities and currency are abstract reals. Nothing here rounds; rounding
//! to whole samples only happens when training data is drawn.

use crate::error::{Error, Result};
use crate::matching::Matching;

/// The concave model-quality function `g`. Only `ln(1 + x)` is supported,
/// which is what keeps the optimal payment in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QualityFn {
    #[default]
    LnOnePlus,
}

impl QualityFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            QualityFn::LnOnePlus => x.ln_1p(),
        }
    }
}

/// Global economic constants shared by every participant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketParams {
    /// Market regulating factor between owners and centers.
    pub lambda: f64,
    /// Payment per unit of training data.
    pub rho: f64,
    /// Training cost per unit of data per unit of power factor.
    pub epsilon: f64,
    /// Model-quality adjustment factor.
    pub alpha: f64,
    /// Minimum admissible data quality.
    pub xi: f64,
    pub quality_fn: QualityFn,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            rho: 1.0,
            epsilon: 1.0,
            alpha: 5.0,
            xi: 0.05,
            quality_fn: QualityFn::LnOnePlus,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidInput(format!("{what} = {v}")));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be > 0, got lambda", self.lambda);
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad("rho must be >= 0, got rho", self.rho);
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be > 0, got epsilon", self.epsilon);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be > 0, got alpha", self.alpha);
        }
        if !(0.0..1.0).contains(&self.xi) {
            return bad("xi must lie in [0, 1), got xi", self.xi);
        }
        Ok(())
    }

    /// `α · g(Σq)`, the model owner's revenue for a given total contribution.
    pub fn model_value(&self, total_quality: f64) -> f64 {
        self.alpha * self.quality_fn.eval(total_quality)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataOwner {
    pub id: usize,
    /// Reported data quality `f_n`.
    pub reported_quality: f64,
    /// Maximum data quantity `|X_n|`.
    pub capacity: f64,
    /// Current data quantity `x_n`.
    pub chosen_quantity: f64,
}

impl DataOwner {
    pub fn new(id: usize, reported_quality: f64, capacity: f64) -> Self {
        Self {
            id,
            reported_quality,
            capacity,
            chosen_quantity: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reported_quality > 0.0 && self.reported_quality <= 1.0) {
            return Err(Error::InvalidQuality {
                owner: self.id,
                quality: self.reported_quality,
            });
        }
        if !(self.capacity > 0.0) {
            return Err(Error::InvalidInput(format!(
                "owner {} capacity must be > 0, got {}",
                self.id, self.capacity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeCenter {
    pub id: usize,
    /// Computational power factor `σ_m`; multiplies the unit training cost.
    pub sigma: f64,
    /// Maximum data quantity `|d_m|` the center can undertake.
    pub capacity: f64,
    /// Currently undertaken quantity `d_m`.
    pub undertaken: f64,
}

impl ComputeCenter {
    pub fn new(id: usize, sigma: f64, capacity: f64) -> Self {
        Self {
            id,
            sigma,
            capacity,
            undertaken: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "center {} sigma must be > 0, got {}",
                self.id, self.sigma
            )));
        }
        if !(self.capacity > 0.0) {
            return Err(Error::InvalidInput(format!(
                "center {} capacity must be > 0, got {}",
                self.id, self.capacity
            )));
        }
        Ok(())
    }
}

/// One data owner's strategy: contribution `q_n = f_n · x_n` and quantity `x_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub quality: f64,
    pub quantity: f64,
    /// Set when `x_n` was clipped to the owner's capacity.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityReport {
    pub u_server: f64,
    pub u_owners: Vec<f64>,
    pub u_centers: Vec<f64>,
    pub global: f64,
}

impl UtilityReport {
    pub fn new(u_server: f64, u_owners: Vec<f64>, u_centers: Vec<f64>) -> Self {
        let global = u_server + u_owners.iter().sum::<f64>() + u_centers.iter().sum::<f64>();
        Self {
            u_server,
            u_owners,
            u_centers,
            global,
        }
    }

    pub fn mean_owner_utility(&self) -> f64 {
        if self.u_owners.is_empty() {
            0.0
        } else {
            self.u_owners.iter().sum::<f64>() / self.u_owners.len() as f64
        }
    }
}

/// `⟨η, {q_n, x_n}, {d_m}, G⟩` plus utilities once evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyProfile {
    pub eta: f64,
    /// Indexed by owner position; non-participants hold zeros.
    pub contributions: Vec<Contribution>,
    /// Indexed by center position.
    pub undertakings: Vec<f64>,
    pub matching: Option<Matching>,
    pub utilities: Option<UtilityReport>,
}

impl StrategyProfile {
    pub fn qualities(&self) -> Vec<f64> {
        self.contributions.iter().map(|c| c.quality).collect()
    }

    pub fn quantities(&self) -> Vec<f64> {
        self.contributions.iter().map(|c| c.quantity).collect()
    }

    pub fn total_quality(&self) -> f64 {
        self.contributions.iter().map(|c| c.quality).sum()
    }
}

/// `Σ ρ x_n`, the total training spend flowing from owners to centers.
pub fn total_spend(quantities: &[f64], params: &MarketParams) -> f64 {
    params.rho * quantities.iter().sum::<f64>()
}

/// Computing-center utility `U_m = λ (d_m / Σd) Σρx_n − ε σ_m d_m`.
pub fn utility_center(
    m: usize,
    undertakings: &[f64],
    sigmas: &[f64],
    quantities: &[f64],
    params: &MarketParams,
) -> Result<f64> {
    if m >= undertakings.len() || undertakings.len() != sigmas.len() {
        return Err(Error::InvalidInput(format!(
            "center index {m} out of range or length mismatch ({} undertakings, {} sigmas)",
            undertakings.len(),
            sigmas.len()
        )));
    }
    if undertakings.iter().any(|&d| d < 0.0 || !d.is_finite()) {
        return Err(Error::InvalidInput("undertakings must be finite and >= 0".into()));
    }
    let total: f64 = undertakings.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateMarket("undertaken quantity"));
    }
    let d = undertakings[m];
    Ok(params.lambda * (d / total) * total_spend(quantities, params) - params.epsilon * sigmas[m] * d)
}

/// Data-owner utility `U_n = (q_n / Σq) η − λ ρ x_n` with `x_n = q_n / f_n`.
pub fn utility_owner(
    n: usize,
    contributions: &[f64],
    qualities: &[f64],
    eta: f64,
    params: &MarketParams,
) -> Result<f64> {
    if n >= contributions.len() || contributions.len() != qualities.len() {
        return Err(Error::InvalidInput(format!(
            "owner index {n} out of range or length mismatch ({} contributions, {} qualities)",
            contributions.len(),
            qualities.len()
        )));
    }
    let f = qualities[n];
    if !(f > 0.0) {
        return Err(Error::InvalidQuality { owner: n, quality: f });
    }
    if contributions.iter().any(|&q| q < 0.0 || !q.is_finite()) {
        return Err(Error::InvalidInput("contributions must be finite and >= 0".into()));
    }
    let total: f64 = contributions.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateMarket("model quality contribution"));
    }
    let q = contributions[n];
    Ok(q / total * eta - params.lambda * params.rho * q / f)
}

/// Model-owner utility `U_s = α g(Σq) − η`.
pub fn utility_server(eta: f64, total_quality: f64, params: &MarketParams) -> Result<f64> {
    if total_quality < 0.0 || !total_quality.is_finite() {
        return Err(Error::InvalidInput(format!(
            "total quality must be finite and >= 0, got {total_quality}"
        )));
    }
    Ok(params.model_value(total_quality) - eta)
}

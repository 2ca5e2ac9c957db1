//! Closed-form Stackelberg–Nash equilibrium by backward induction, and a
//! grid-deviation verifier for it.
//!
//! Solve order is payment first, then owner contributions, then center
//! undertakings. The center quantities depend on the owners only through the
//! total spend `Σρx`, so this order gives the same profile as solving from the
//! followers upward.
//!
//! Owners whose best response is not strictly positive, or whose quality is
//! below the admissible threshold, are pruned and the reduced game is solved
//! again until every remaining response is positive. Centers are pruned the
//! same way; a pruned center idles with `d = 0`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{
    total_spend, utility_center, utility_owner, utility_server, ComputeCenter, Contribution,
    DataOwner, MarketParams, StrategyProfile, UtilityReport,
};

/// Fraction of capacity an owner may use at most; `x_n` must stay strictly
/// below `|X_n|`.
pub const CAPACITY_MARGIN: f64 = 1e-9;

/// Default number of points in each deviation grid.
pub const DEFAULT_GRID_STEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverIntermediates {
    /// `S = Σ 1/f_i` over the participants.
    pub inv_quality_sum: f64,
    /// `T_n` for each participant, aligned with `participants`.
    pub response_coeffs: Vec<f64>,
    pub sum_t: f64,
    /// Owner positions that take part in the game.
    pub participants: Vec<usize>,
}

impl SolverIntermediates {
    /// Response coefficients `T_n = (K−1)/(λρS) · (1 − (K−1)/(f_n S))` for the
    /// owners in `members`, where `K = |members|`.
    pub fn compute(qualities: &[f64], members: &[usize], params: &MarketParams) -> Result<Self> {
        let k = members.len();
        if k < 2 {
            return Err(Error::InsufficientParticipants(k));
        }
        for &n in members {
            let f = qualities[n];
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::InvalidQuality { owner: n, quality: f });
            }
        }
        let unit_cost = params.lambda * params.rho;
        if !(unit_cost > 0.0) {
            return Err(Error::NoViableMarket(format!(
                "owners face zero unit cost (lambda * rho = {unit_cost})"
            )));
        }
        let inv_quality_sum: f64 = members.iter().map(|&n| 1.0 / qualities[n]).sum();
        let others = (k - 1) as f64;
        let scale = others / (unit_cost * inv_quality_sum);
        let response_coeffs: Vec<f64> = members
            .iter()
            .map(|&n| scale * (1.0 - others / (qualities[n] * inv_quality_sum)))
            .collect();
        let sum_t = response_coeffs.iter().sum();
        Ok(Self {
            inv_quality_sum,
            response_coeffs,
            sum_t,
            participants: members.to_vec(),
        })
    }

    pub fn coeff_of(&self, owner: usize) -> Option<f64> {
        self.participants
            .iter()
            .position(|&n| n == owner)
            .map(|i| self.response_coeffs[i])
    }
}

fn qualities_of(owners: &[DataOwner]) -> Vec<f64> {
    owners.iter().map(|o| o.reported_quality).collect()
}

fn all_members(owners: &[DataOwner]) -> Vec<usize> {
    (0..owners.len()).collect()
}

fn payment_from_sum(sum_t: f64, params: &MarketParams) -> Result<f64> {
    if !(sum_t > 0.0) {
        return Err(Error::NoViableMarket(format!("sum of response coefficients is {sum_t}")));
    }
    Ok((params.alpha - 1.0 / sum_t).max(0.0))
}

/// Optimal total payment `η* = max(0, α − 1/ΣT_n)` with every owner taking
/// part.
pub fn optimal_payment(owners: &[DataOwner], params: &MarketParams) -> Result<f64> {
    let inter = SolverIntermediates::compute(&qualities_of(owners), &all_members(owners), params)?;
    payment_from_sum(inter.sum_t, params)
}

/// Owner `n`'s equilibrium contribution `q_n* = η T_n`. May be negative for
/// low-quality owners; callers decide participation.
pub fn best_response_quality(
    n: usize,
    owners: &[DataOwner],
    eta: f64,
    params: &MarketParams,
) -> Result<f64> {
    if n >= owners.len() {
        return Err(Error::InvalidInput(format!("owner index {n} out of range")));
    }
    let inter = SolverIntermediates::compute(&qualities_of(owners), &all_members(owners), params)?;
    Ok(eta * inter.response_coeffs[n])
}

/// Equilibrium total contribution `Σq = (N−1)η / Σ(λρ/f_i)`.
pub fn nash_total_quality(eta: f64, owners: &[DataOwner], params: &MarketParams) -> Result<f64> {
    let n = owners.len();
    if n < 2 {
        return Err(Error::InsufficientParticipants(n));
    }
    let denom: f64 = owners
        .iter()
        .map(|o| params.lambda * params.rho / o.reported_quality)
        .sum();
    Ok((n - 1) as f64 * eta / denom)
}

fn raw_undertaking(sigma_m: f64, sigma_sum: f64, count: usize, spend: f64, params: &MarketParams) -> f64 {
    let others = (count - 1) as f64;
    params.lambda * others * spend / (params.epsilon * sigma_sum) * (1.0 - sigma_m * others / sigma_sum)
}

/// Center `m`'s equilibrium undertaking
/// `d_m* = λ(M−1)Σρx/(εΣσ) · (1 − σ_m(M−1)/Σσ)`, clamped at zero.
pub fn optimal_undertaking(
    m: usize,
    centers: &[ComputeCenter],
    total_spend: f64,
    params: &MarketParams,
) -> Result<f64> {
    if centers.len() < 2 {
        return Err(Error::InsufficientCenters(centers.len()));
    }
    if m >= centers.len() {
        return Err(Error::InvalidInput(format!("center index {m} out of range")));
    }
    let sigma_sum: f64 = centers.iter().map(|c| c.sigma).sum();
    Ok(raw_undertaking(centers[m].sigma, sigma_sum, centers.len(), total_spend, params).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Reported quality below the threshold `ξ`.
    BelowThreshold,
    /// Closed-form best response `≤ 0` in the current reduced game.
    NonPositiveResponse,
    /// Excluded by the caller (for example, an owner that was never matched).
    Ineligible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DroppedOwner {
    pub owner: usize,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SneSolution {
    pub profile: StrategyProfile,
    pub intermediates: SolverIntermediates,
    pub dropped_owners: Vec<DroppedOwner>,
    /// Centers whose closed-form undertaking is not positive.
    pub idle_centers: Vec<usize>,
    pub clipped_owners: Vec<usize>,
    pub clipped_centers: Vec<usize>,
    /// Inputs the profile was solved for, with `chosen_quantity` / `undertaken`
    /// set to the solution.
    pub owners: Vec<DataOwner>,
    pub centers: Vec<ComputeCenter>,
    pub params: MarketParams,
}

impl SneSolution {
    pub fn eta(&self) -> f64 {
        self.profile.eta
    }

    pub fn is_participant(&self, owner: usize) -> bool {
        self.intermediates.participants.contains(&owner)
    }

    /// Contribution of a participant at payment `eta`, with capacity clipping.
    fn contribution_at(&self, idx: usize, eta: f64) -> f64 {
        let n = self.intermediates.participants[idx];
        let owner = &self.owners[n];
        let q = eta * self.intermediates.response_coeffs[idx];
        q.min(owner.reported_quality * owner.capacity * (1.0 - CAPACITY_MARGIN))
    }

    /// Total contribution when owners best-respond to `eta`.
    pub fn total_quality_at(&self, eta: f64) -> f64 {
        (0..self.intermediates.participants.len())
            .map(|i| self.contribution_at(i, eta))
            .sum()
    }

    /// Profile when the model owner pays `eta` instead of `η*` and everyone
    /// else still best-responds. The participant set is kept.
    pub fn profile_at(&self, eta: f64) -> Result<StrategyProfile> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidInput(format!("payment {eta}")));
        }
        let mut contributions = vec![
            Contribution { quality: 0.0, quantity: 0.0, clipped: false };
            self.owners.len()
        ];
        for (i, &n) in self.intermediates.participants.iter().enumerate() {
            let q = self.contribution_at(i, eta);
            let unclipped = eta * self.intermediates.response_coeffs[i];
            contributions[n] = Contribution {
                quality: q,
                quantity: q / self.owners[n].reported_quality,
                clipped: q < unclipped,
            };
        }
        let quantities: Vec<f64> = contributions.iter().map(|c| c.quantity).collect();
        let spend = total_spend(&quantities, &self.params);
        let (d, _) = solve_centers(&self.centers, spend, &self.params)?;
        let undertakings = d
            .iter()
            .zip(&self.centers)
            .map(|(&d, c)| d.min(c.capacity))
            .collect();
        let mut profile = StrategyProfile {
            eta,
            contributions,
            undertakings,
            matching: None,
            utilities: None,
        };
        profile.utilities = Some(evaluate_profile(&profile, &self.owners, &self.centers, &self.params));
        Ok(profile)
    }

    pub fn utilities(&self) -> &UtilityReport {
        self.profile
            .utilities
            .as_ref()
            .expect("solver always fills utilities")
    }
}

/// Solve the full game by backward induction.
pub fn solve_sne(
    owners: &[DataOwner],
    centers: &[ComputeCenter],
    params: &MarketParams,
) -> Result<SneSolution> {
    solve_sne_among(owners, centers, params, &vec![true; owners.len()])
}

/// Like [`solve_sne`] but only owners flagged in `eligible` may take part.
pub fn solve_sne_among(
    owners: &[DataOwner],
    centers: &[ComputeCenter],
    params: &MarketParams,
    eligible: &[bool],
) -> Result<SneSolution> {
    params.validate()?;
    if owners.len() < 2 {
        return Err(Error::InsufficientParticipants(owners.len()));
    }
    if centers.len() < 2 {
        return Err(Error::InsufficientCenters(centers.len()));
    }
    if centers.len() < owners.len() {
        return Err(Error::InvalidInput(format!(
            "need at least as many computing centers as data owners ({} < {})",
            centers.len(),
            owners.len()
        )));
    }
    if eligible.len() != owners.len() {
        return Err(Error::InvalidInput("eligibility mask length mismatch".into()));
    }
    for c in centers {
        c.validate()?;
    }
    for (o, &ok) in owners.iter().zip(eligible) {
        if ok {
            o.validate()?;
        }
    }

    let qualities = qualities_of(owners);
    let mut dropped = Vec::new();
    let mut members = Vec::new();
    for (n, o) in owners.iter().enumerate() {
        if !eligible[n] {
            dropped.push(DroppedOwner { owner: n, reason: DropReason::Ineligible });
        } else if o.reported_quality < params.xi {
            dropped.push(DroppedOwner { owner: n, reason: DropReason::BelowThreshold });
        } else {
            members.push(n);
        }
    }

    let inter = loop {
        if members.len() < 2 {
            return Err(Error::NoViableMarket(format!(
                "{} owner(s) left after pruning",
                members.len()
            )));
        }
        let inter = SolverIntermediates::compute(&qualities, &members, params)?;
        let before = members.len();
        let mut kept = Vec::with_capacity(before);
        for (&n, &t) in inter.participants.iter().zip(&inter.response_coeffs) {
            if t > 0.0 {
                kept.push(n);
            } else {
                dropped.push(DroppedOwner { owner: n, reason: DropReason::NonPositiveResponse });
            }
        }
        if kept.len() == before {
            break inter;
        }
        members = kept;
    };
    dropped.sort_by_key(|d| d.owner);

    let eta = payment_from_sum(inter.sum_t, params)?;

    let mut contributions = vec![
        Contribution { quality: 0.0, quantity: 0.0, clipped: false };
        owners.len()
    ];
    let mut clipped_owners = Vec::new();
    for (&n, &t) in inter.participants.iter().zip(&inter.response_coeffs) {
        let f = owners[n].reported_quality;
        let limit = owners[n].capacity * (1.0 - CAPACITY_MARGIN);
        let mut x = eta * t / f;
        let clipped = x > limit;
        if clipped {
            x = limit;
            clipped_owners.push(n);
        }
        contributions[n] = Contribution { quality: f * x, quantity: x, clipped };
    }

    let quantities: Vec<f64> = contributions.iter().map(|c| c.quantity).collect();
    let spend = total_spend(&quantities, params);
    let (undertakings, idle_centers) = solve_centers(centers, spend, params)?;
    let mut clipped_centers = Vec::new();
    let undertakings: Vec<f64> = undertakings
        .into_iter()
        .enumerate()
        .map(|(m, d)| {
            if d > centers[m].capacity {
                clipped_centers.push(m);
                centers[m].capacity
            } else {
                d
            }
        })
        .collect();

    let mut owners_out = owners.to_vec();
    for (o, c) in owners_out.iter_mut().zip(&contributions) {
        o.chosen_quantity = c.quantity;
    }
    let mut centers_out = centers.to_vec();
    for (c, &d) in centers_out.iter_mut().zip(&undertakings) {
        c.undertaken = d;
    }

    let mut profile = StrategyProfile {
        eta,
        contributions,
        undertakings,
        matching: None,
        utilities: None,
    };
    profile.utilities = Some(evaluate_profile(&profile, &owners_out, &centers_out, params));

    Ok(SneSolution {
        profile,
        intermediates: inter,
        dropped_owners: dropped,
        idle_centers,
        clipped_owners,
        clipped_centers,
        owners: owners_out,
        centers: centers_out,
        params: *params,
    })
}

/// Equilibrium undertakings with pruning of centers whose closed form is not
/// positive. Returns per-center quantities and the idle set.
fn solve_centers(
    centers: &[ComputeCenter],
    spend: f64,
    params: &MarketParams,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut d = vec![0.0; centers.len()];
    if spend <= 0.0 {
        return Ok((d, Vec::new()));
    }
    let mut active: Vec<usize> = (0..centers.len()).collect();
    let mut idle = Vec::new();
    loop {
        let sigma_sum: f64 = active.iter().map(|&m| centers[m].sigma).sum();
        let raw: Vec<f64> = active
            .iter()
            .map(|&m| raw_undertaking(centers[m].sigma, sigma_sum, active.len(), spend, params))
            .collect();
        let (keep, drop): (Vec<_>, Vec<_>) =
            active.iter().zip(&raw).partition(|(_, &r)| r > 0.0);
        if drop.is_empty() || keep.len() < 2 {
            break;
        }
        idle.extend(drop.into_iter().map(|(&m, _)| m));
        active = keep.into_iter().map(|(&m, _)| m).collect();
    }
    let sub: Vec<ComputeCenter> = active.iter().map(|&m| centers[m].clone()).collect();
    for (i, &m) in active.iter().enumerate() {
        d[m] = optimal_undertaking(i, &sub, spend, params)?;
    }
    idle.sort_unstable();
    Ok((d, idle))
}

/// Utilities of every party at the given profile. Degenerate shares (`Σq = 0`
/// or `Σd = 0`) count as zero utility for the affected group.
pub fn evaluate_profile(
    profile: &StrategyProfile,
    owners: &[DataOwner],
    centers: &[ComputeCenter],
    params: &MarketParams,
) -> UtilityReport {
    let q = profile.qualities();
    let x = profile.quantities();
    let f: Vec<f64> = owners.iter().map(|o| o.reported_quality).collect();
    let total_q: f64 = q.iter().sum();
    let u_server = utility_server(profile.eta, total_q, params).unwrap_or(f64::NAN);
    let u_owners = (0..owners.len())
        .map(|n| {
            if q[n] > 0.0 {
                utility_owner(n, &q, &f, profile.eta, params).unwrap_or(f64::NAN)
            } else {
                0.0
            }
        })
        .collect();
    let sigmas: Vec<f64> = centers.iter().map(|c| c.sigma).collect();
    let u_centers = (0..centers.len())
        .map(|m| {
            if profile.undertakings[m] > 0.0 {
                utility_center(m, &profile.undertakings, &sigmas, &x, params).unwrap_or(f64::NAN)
            } else {
                0.0
            }
        })
        .collect();
    UtilityReport::new(u_server, u_owners, u_centers)
}

/// Largest utility gain found by unilateral deviation, per party.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub server_gain: f64,
    /// Indexed by owner position; owners excluded by threshold or eligibility
    /// are reported as 0.
    pub owner_gains: Vec<f64>,
    /// Indexed by center position.
    pub center_gains: Vec<f64>,
    pub grid_steps: usize,
    pub tolerance: f64,
}

impl VerificationReport {
    pub fn max_owner_gain(&self) -> f64 {
        self.owner_gains.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_center_gain(&self) -> f64 {
        self.center_gains.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_gain(&self) -> f64 {
        self.server_gain
            .max(self.max_owner_gain())
            .max(self.max_center_gain())
    }

    pub fn passed(&self) -> bool {
        self.max_gain() < self.tolerance
    }
}

/// `steps` evenly spaced points on `[lo, hi]`, both ends included.
pub fn grid(lo: f64, hi: f64, steps: usize) -> impl Iterator<Item = f64> {
    let span = hi - lo;
    let last = (steps.max(2) - 1) as f64;
    (0..steps.max(2)).map(move |i| lo + span * i as f64 / last)
}

fn best_gain(points: impl Iterator<Item = f64>, at: impl Fn(f64) -> Option<f64>, reference: f64) -> f64 {
    points
        .filter_map(at)
        .map(|u| u - reference)
        .fold(0.0, f64::max)
}

/// Check every equilibrium inequality by grid deviation:
/// (a) payment deviations with owners re-solving their best responses,
/// (b) single-owner contribution deviations, and (c) single-center
/// undertaking deviations, all others held at the solution.
pub fn verify_sne(solution: &SneSolution, grid_steps: usize, tolerance: f64) -> VerificationReport {
    let steps = grid_steps.max(100);
    let params = &solution.params;
    let profile = &solution.profile;
    let eta_star = profile.eta;

    let server_at = |eta: f64| utility_server(eta, solution.total_quality_at(eta), params).ok();
    let u_s_star = server_at(eta_star).unwrap_or(f64::NAN);
    let eta_hi = if eta_star > 0.0 { 2.0 * eta_star } else { params.alpha };
    let server_gain = best_gain(grid(0.0, eta_hi, steps), server_at, u_s_star);

    let q = profile.qualities();
    let f: Vec<f64> = solution.owners.iter().map(|o| o.reported_quality).collect();
    let total_q: f64 = q.iter().sum();
    let checked = |n: usize| {
        solution
            .dropped_owners
            .iter()
            .all(|d| d.owner != n || d.reason == DropReason::NonPositiveResponse)
    };
    let owner_gains: Vec<f64> = (0..solution.owners.len())
        .into_par_iter()
        .map(|n| {
            if total_q <= 0.0 || !checked(n) {
                return 0.0;
            }
            let u_star = utility_owner(n, &q, &f, eta_star, params).unwrap_or(f64::NAN);
            let cap = f[n] * solution.owners[n].capacity * (1.0 - CAPACITY_MARGIN);
            let hi = if q[n] > 0.0 { 2.0 * q[n] } else { total_q }.min(cap);
            let others = total_q - q[n];
            let at = |qn: f64| {
                if qn + others <= 0.0 {
                    return None;
                }
                let mut dev = q.clone();
                dev[n] = qn;
                utility_owner(n, &dev, &f, eta_star, params).ok()
            };
            best_gain(grid(0.0, hi, steps), at, u_star)
        })
        .collect();

    let d = &profile.undertakings;
    let x = profile.quantities();
    let sigmas: Vec<f64> = solution.centers.iter().map(|c| c.sigma).collect();
    let total_d: f64 = d.iter().sum();
    let center_gains: Vec<f64> = (0..solution.centers.len())
        .into_par_iter()
        .map(|m| {
            if total_d <= 0.0 {
                return 0.0;
            }
            let u_star = if d[m] > 0.0 {
                utility_center(m, d, &sigmas, &x, params).unwrap_or(f64::NAN)
            } else {
                0.0
            };
            let hi = if d[m] > 0.0 { 2.0 * d[m] } else { total_d }.min(solution.centers[m].capacity);
            let others = total_d - d[m];
            let at = |dm: f64| {
                if dm + others <= 0.0 {
                    return None;
                }
                let mut dev = d.clone();
                dev[m] = dm;
                utility_center(m, &dev, &sigmas, &x, params).ok()
            };
            best_gain(grid(0.0, hi, steps), at, u_star)
        })
        .collect();

    VerificationReport {
        server_gain,
        owner_gains,
        center_gains,
        grid_steps: steps,
        tolerance,
    }
}

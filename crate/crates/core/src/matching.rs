//! One-to-one matching of data owners to computing centers.
//!
//! Every owner proposes in the same order: centers sorted by power factor σ,
//! highest first. Each center ranks owners by how close the owner's quantity
//! `x_n*` is to its own equilibrium undertaking `d_m*`. Owners propose, centers
//! hold the best proposal so far (deferred acceptance). Ties are broken by the
//! lower index on both sides.
//!
//! The matching is computed once and never changed afterwards.

use crate::equilibrium::SneSolution;
use crate::error::{Error, Result};
use crate::market::MarketParams;

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTables {
    /// Per owner, center indices from most to least preferred.
    pub owner_proposal_order: Vec<Vec<usize>>,
    /// Per center, owner indices from most to least preferred.
    pub center_preference: Vec<Vec<usize>>,
}

impl PreferenceTables {
    pub fn owners(&self) -> usize {
        self.owner_proposal_order.len()
    }

    pub fn centers(&self) -> usize {
        self.center_preference.len()
    }

    /// `rank[c][n]` = position of owner `n` in center `c`'s list.
    fn center_ranks(&self) -> Vec<Vec<usize>> {
        rank_table(&self.center_preference, self.owners())
    }

    fn owner_ranks(&self) -> Vec<Vec<usize>> {
        rank_table(&self.owner_proposal_order, self.centers())
    }
}

fn rank_table(lists: &[Vec<usize>], width: usize) -> Vec<Vec<usize>> {
    lists
        .iter()
        .map(|list| {
            let mut rank = vec![usize::MAX; width];
            for (pos, &i) in list.iter().enumerate() {
                rank[i] = pos;
            }
            rank
        })
        .collect()
}

/// Owner-to-center assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Matching {
    /// `pairs[n]` is the center assigned to owner `n`.
    pub pairs: Vec<Option<usize>>,
    pub unmatched_centers: Vec<usize>,
    pub matched_count: usize,
}

impl Matching {
    fn from_pairs(pairs: Vec<Option<usize>>, centers: usize) -> Self {
        let mut taken = vec![false; centers];
        for c in pairs.iter().flatten() {
            taken[*c] = true;
        }
        let unmatched_centers = (0..centers).filter(|&c| !taken[c]).collect();
        let matched_count = pairs.iter().filter(|p| p.is_some()).count();
        Self {
            pairs,
            unmatched_centers,
            matched_count,
        }
    }

    pub fn center_of(&self, owner: usize) -> Option<usize> {
        self.pairs.get(owner).copied().flatten()
    }

    pub fn owner_of(&self, center: usize) -> Option<usize> {
        self.pairs.iter().position(|&p| p == Some(center))
    }

    /// `(owner, center)` pairs in ascending center order.
    pub fn by_center(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .pairs
            .iter()
            .enumerate()
            .filter_map(|(n, c)| c.map(|c| (n, c)))
            .collect();
        out.sort_by_key(|&(_, c)| c);
        out
    }
}

/// Build both sides' preference lists.
pub fn build_preferences(
    owners_x: &[f64],
    sigmas: &[f64],
    centers_d: &[f64],
) -> Result<PreferenceTables> {
    if owners_x.is_empty() || sigmas.is_empty() {
        return Err(Error::InvalidInput("matching needs at least one owner and one center".into()));
    }
    if sigmas.len() != centers_d.len() {
        return Err(Error::InvalidInput(format!(
            "{} sigmas but {} undertakings",
            sigmas.len(),
            centers_d.len()
        )));
    }
    if owners_x.iter().chain(sigmas).chain(centers_d).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite matching input".into()));
    }

    let mut by_sigma: Vec<usize> = (0..sigmas.len()).collect();
    // stable sort keeps lower indices first among equal σ
    by_sigma.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));
    let owner_proposal_order = vec![by_sigma; owners_x.len()];

    let center_preference = centers_d
        .iter()
        .map(|&d| {
            let mut order: Vec<usize> = (0..owners_x.len()).collect();
            order.sort_by(|&a, &b| (d - owners_x[a]).abs().total_cmp(&(d - owners_x[b]).abs()));
            order
        })
        .collect();

    Ok(PreferenceTables {
        owner_proposal_order,
        center_preference,
    })
}

/// Owner-proposing deferred acceptance.
pub fn gale_shapley(prefs: &PreferenceTables) -> Matching {
    let n_owners = prefs.owners();
    let n_centers = prefs.centers();
    let rank = prefs.center_ranks();
    let mut next = vec![0usize; n_owners];
    let mut held: Vec<Option<usize>> = vec![None; n_centers];
    let mut pairs: Vec<Option<usize>> = vec![None; n_owners];

    loop {
        let free: Vec<usize> = (0..n_owners)
            .filter(|&n| pairs[n].is_none() && next[n] < prefs.owner_proposal_order[n].len())
            .collect();
        if free.is_empty() {
            break;
        }
        for n in free {
            // an earlier proposal in this sweep may already have placed n
            if pairs[n].is_some() {
                continue;
            }
            let c = prefs.owner_proposal_order[n][next[n]];
            next[n] += 1;
            match held[c] {
                None => {
                    held[c] = Some(n);
                    pairs[n] = Some(c);
                }
                Some(j) if rank[c][n] < rank[c][j] => {
                    held[c] = Some(n);
                    pairs[n] = Some(c);
                    pairs[j] = None;
                }
                Some(_) => {}
            }
        }
    }
    Matching::from_pairs(pairs, n_centers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockingPair {
    pub owner: usize,
    pub center: usize,
}

/// Every `(owner, center)` pair that would rather be matched to each other.
/// An unmatched center prefers any owner to none; an unmatched owner prefers
/// any center to none.
pub fn is_stable(matching: &Matching, prefs: &PreferenceTables) -> Vec<BlockingPair> {
    let owner_rank = prefs.owner_ranks();
    let center_rank = prefs.center_ranks();
    let holder: Vec<Option<usize>> = (0..prefs.centers()).map(|c| matching.owner_of(c)).collect();
    let mut blocking = Vec::new();
    for n in 0..prefs.owners() {
        for c in 0..prefs.centers() {
            if matching.center_of(n) == Some(c) {
                continue;
            }
            let owner_wants = match matching.center_of(n) {
                None => true,
                Some(cur) => owner_rank[n][c] < owner_rank[n][cur],
            };
            let center_wants = match holder[c] {
                None => true,
                Some(j) => center_rank[c][n] < center_rank[c][j],
            };
            if owner_wants && center_wants {
                blocking.push(BlockingPair { owner: n, center: c });
            }
        }
    }
    blocking
}

/// Match the participating owners of a solved game to its centers. Owners that
/// were pruned from the game stay unmatched.
pub fn match_solution(solution: &SneSolution) -> Result<(Matching, PreferenceTables)> {
    let participants: Vec<usize> = (0..solution.owners.len())
        .filter(|&n| solution.profile.contributions[n].quantity > 0.0)
        .collect();
    if participants.is_empty() {
        return Err(Error::InvalidInput("no owner contributes data".into()));
    }
    let x: Vec<f64> = participants
        .iter()
        .map(|&n| solution.profile.contributions[n].quantity)
        .collect();
    let sigmas: Vec<f64> = solution.centers.iter().map(|c| c.sigma).collect();
    let prefs = build_preferences(&x, &sigmas, &solution.profile.undertakings)?;
    let local = gale_shapley(&prefs);
    let mut pairs = vec![None; solution.owners.len()];
    for (i, &n) in participants.iter().enumerate() {
        pairs[n] = local.pairs[i];
    }
    Ok((Matching::from_pairs(pairs, sigmas.len()), prefs))
}

/// Center utilities once each matched center undertakes exactly its owner's
/// `x_n` (data is never split across centers). Unmatched centers get zero.
pub fn realized_center_utilities(solution: &SneSolution, matching: &Matching) -> Vec<f64> {
    let sigmas: Vec<f64> = solution.centers.iter().map(|c| c.sigma).collect();
    realized_utilities(&solution.profile.quantities(), &sigmas, matching, &solution.params)
}

/// [`realized_center_utilities`] from raw columns.
pub fn realized_utilities(
    quantities: &[f64],
    sigmas: &[f64],
    matching: &Matching,
    params: &MarketParams,
) -> Vec<f64> {
    let mut d = vec![0.0; sigmas.len()];
    for (n, c) in matching.by_center() {
        d[c] = quantities[n];
    }
    let total: f64 = d.iter().sum();
    let spend = params.rho * quantities.iter().sum::<f64>();
    d.iter()
        .zip(sigmas)
        .map(|(&dm, &sigma)| {
            if total > 0.0 && dm > 0.0 {
                params.lambda * dm / total * spend - params.epsilon * sigma * dm
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proposal_order_descends_by_sigma() {
        let p = build_preferences(&[1.0, 2.0], &[0.3, 0.9], &[1.0, 1.0]).unwrap();
        assert_eq!(p.owner_proposal_order, vec![vec![1, 0], vec![1, 0]]);
    }

    #[test]
    fn centers_rank_by_distance() {
        let p = build_preferences(&[9.0, 1.0], &[0.5, 0.5], &[10.0, 0.0]).unwrap();
        assert_eq!(p.center_preference[0], vec![0, 1]);
        assert_eq!(p.center_preference[1], vec![1, 0]);
    }

    #[test]
    fn distance_ties_prefer_lower_index() {
        // |5-3| == |5-7|
        let p = build_preferences(&[7.0, 3.0, 5.0], &[0.4, 0.4, 0.4], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(p.center_preference[0], vec![2, 0, 1]);
        assert_eq!(p.owner_proposal_order[0], vec![0, 1, 2]);
        let m = gale_shapley(&p);
        assert!(is_stable(&m, &p).is_empty());
        assert_eq!(m.pairs, vec![Some(1), Some(2), Some(0)]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(build_preferences(&[], &[1.0], &[1.0]).is_err());
        assert!(build_preferences(&[1.0], &[], &[]).is_err());
    }

    #[test]
    fn single_pair() {
        let p = build_preferences(&[1.0], &[0.5], &[1.0]).unwrap();
        let m = gale_shapley(&p);
        assert_eq!(m.pairs, vec![Some(0)]);
        assert_eq!(m.matched_count, 1);
        assert!(m.unmatched_centers.is_empty());
        assert!(is_stable(&m, &p).is_empty());
    }

    #[test]
    fn extra_centers_stay_unmatched() {
        let p = build_preferences(&[1.0, 2.0], &[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0]).unwrap();
        let m = gale_shapley(&p);
        assert_eq!(m.matched_count, 2);
        assert_eq!(m.unmatched_centers.len(), 1);
        assert!(is_stable(&m, &p).is_empty());
    }

    #[test]
    fn swapped_assignment_blocks() {
        let p = build_preferences(&[1.0, 10.0], &[0.9, 0.5], &[1.0, 10.0]).unwrap();
        let m = gale_shapley(&p);
        assert_eq!(m.pairs, vec![Some(0), Some(1)]);
        let swapped = Matching::from_pairs(vec![Some(1), Some(0)], 2);
        let blocking = is_stable(&swapped, &p);
        assert!(blocking.contains(&BlockingPair { owner: 0, center: 0 }));
    }

    #[test]
    fn realized_utilities_use_owner_quantities() {
        let m = Matching::from_pairs(vec![Some(1), Some(0)], 3);
        let p = MarketParams::default();
        let u = realized_utilities(&[1.0, 3.0], &[0.5, 0.1, 0.9], &m, &p);
        // center 1 takes owner 0 (d=1), center 0 takes owner 1 (d=3), spend 4
        assert!((u[1] - (1.0 / 4.0 * 4.0 - 0.1)).abs() < 1e-15);
        assert!((u[0] - (3.0 / 4.0 * 4.0 - 1.5)).abs() < 1e-15);
        assert_eq!(u[2], 0.0);
    }
}

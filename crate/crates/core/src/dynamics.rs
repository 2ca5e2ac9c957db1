//! Mid-training quality re-assessment and market re-solve.
//!
//! After round `L` the loss drop each center observed is min-max normalized
//! across centers and replaces its owner's reported quality. Owners below `ξ`
//! are excluded, the game is re-solved for the rest, and any owner whose
//! optimal quantity grew ships the extra data and pays for it. Nothing is
//! refunded when a quantity shrinks, and the matching never changes.

use std::collections::BTreeMap;
use std::io::{self, Write};

use crate::equilibrium::{solve_sne_among, SneSolution};
use crate::error::{Error, Result};
use crate::matching::Matching;
use crate::training::RoundRecord;

/// Normalized qualities are floored here so no participant hits exactly 0.
pub const QUALITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct QualityAssessment {
    pub round: usize,
    /// Measured `f_m`, per owner position. `None` if the owner did not train.
    pub raw: Vec<Option<f64>>,
    pub normalized: Vec<Option<f64>>,
    /// Owners whose normalized quality is below `ξ`.
    pub excluded: Vec<usize>,
}

/// Min-max normalize `values` into `[QUALITY_FLOOR, 1]`. All-equal inputs map
/// to 1.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![1.0; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo)).max(QUALITY_FLOOR))
        .collect()
}

/// Assess every owner that trained in `record`.
pub fn evaluate_quality(record: &RoundRecord, owners: usize, xi: f64) -> QualityAssessment {
    let mut raw = vec![None; owners];
    for c in &record.centers {
        if c.owner < owners {
            raw[c.owner] = Some(c.f_m);
        }
    }
    let present: Vec<usize> = (0..owners).filter(|&n| raw[n].is_some()).collect();
    let values: Vec<f64> = present.iter().map(|&n| raw[n].unwrap()).collect();
    let mut normalized = vec![None; owners];
    for (&n, v) in present.iter().zip(normalize(&values)) {
        normalized[n] = Some(v);
    }
    let excluded = present
        .iter()
        .copied()
        .filter(|&n| normalized[n].is_some_and(|v| v < xi))
        .collect();
    QualityAssessment {
        round: record.round,
        raw,
        normalized,
        excluded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub round: usize,
    /// Owner id.
    pub payer: usize,
    /// Center id.
    pub payee: usize,
    pub amount: f64,
}

/// Append-only record of transfer payments for extra data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PaymentLedger {
    pub entries: Vec<LedgerEntry>,
}

impl PaymentLedger {
    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = LedgerEntry>) {
        self.entries.extend(entries);
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.amount).sum()
    }

    pub fn paid_by(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.payer).or_insert(0.0) += e.amount;
        }
        out
    }

    pub fn received_by(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.payee).or_insert(0.0) += e.amount;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "round,payer,payee,amount")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{:.16e}", e.round, e.payer, e.payee, e.amount)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantityChange {
    pub owner: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Readjustment {
    pub solution: SneSolution,
    /// One entry per owner whose quantity grew.
    pub payments: Vec<LedgerEntry>,
    pub changes: Vec<QuantityChange>,
}

/// Re-solve the game with measured qualities. Only matched owners with an
/// assessment are eligible; centers keep their matched partners.
pub fn readjust(
    solution: &SneSolution,
    assessment: &QualityAssessment,
    matching: &Matching,
    round: usize,
) -> Result<Readjustment> {
    let n = solution.owners.len();
    if assessment.normalized.len() != n || matching.pairs.len() != n {
        return Err(Error::InvalidInput("assessment or matching size differs from the market".into()));
    }
    let mut owners = solution.owners.clone();
    let mut eligible = vec![false; n];
    for i in 0..n {
        if let (Some(f), Some(_)) = (assessment.normalized[i], matching.center_of(i)) {
            owners[i].reported_quality = f;
            eligible[i] = true;
        }
    }
    let next = solve_sne_among(&owners, &solution.centers, &solution.params, &eligible)?;

    let rho = solution.params.rho;
    let mut payments = Vec::new();
    let mut changes = Vec::new();
    for i in 0..n {
        let before = solution.profile.contributions[i].quantity;
        let after = next.profile.contributions[i].quantity;
        if before != after {
            changes.push(QuantityChange { owner: i, before, after });
        }
        if after > before {
            if let Some(c) = matching.center_of(i) {
                payments.push(LedgerEntry {
                    round,
                    payer: solution.owners[i].id,
                    payee: solution.centers[c].id,
                    amount: rho * (after - before),
                });
            }
        }
    }
    Ok(Readjustment {
        solution: next,
        payments,
        changes,
    })
}

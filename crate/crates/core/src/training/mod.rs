//! Federated training over matched owner/center pairs.
//!
//! Each matched center trains on its owner's data for `E` local epochs per
//! round, the server aggregates the local models, and at the adjustment round
//! the measured loss drops replace the reported qualities (see
//! [`crate::dynamics`]).

pub mod data;
pub mod model;

use rayon::prelude::*;

use crate::dynamics::{evaluate_quality, readjust, PaymentLedger};
use crate::equilibrium::SneSolution;
use crate::error::{Error, Result};
use crate::matching::Matching;

pub use data::{generate_owner_data, validation_set, OwnerDataset, SamplePool, Samples};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Plain average of local models.
    #[default]
    Mean,
    /// Average weighted by the number of samples each center trained on.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainerKind {
    /// Softmax regression trained with full-batch gradient descent.
    #[default]
    Gradient,
    /// Closed-form loss curve `l0·exp(−κ·q·t)`, no real model.
    Analytic,
}

/// Where the per-round loss drop `f_m` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QualityProbe {
    /// Clean held-out samples shared by all centers.
    #[default]
    Validation,
    /// The owner's own (noisy) training samples.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Round `L` after which qualities are re-assessed. 1-based.
    pub adjust_round: usize,
    pub dynamic_adjustment: bool,
    pub aggregation: Aggregation,
    pub kind: TrainerKind,
    pub probe: QualityProbe,
    /// Samples transferred per unit of `x_n*`.
    pub samples_per_unit: f64,
    pub analytic_l0: f64,
    pub analytic_kappa: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 5,
            learning_rate: 0.01,
            adjust_round: 3,
            dynamic_adjustment: true,
            aggregation: Aggregation::Mean,
            kind: TrainerKind::Gradient,
            probe: QualityProbe::Validation,
            samples_per_unit: 500.0,
            analytic_l0: 1.0,
            analytic_kappa: 1.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.rounds < 1 {
            return bad("rounds must be >= 1".into());
        }
        if self.local_epochs < 1 {
            return bad("local epochs must be >= 1".into());
        }
        if self.adjust_round < 1 || self.adjust_round > self.rounds {
            return bad(format!(
                "adjust round {} outside 1..={}",
                self.adjust_round, self.rounds
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(self.samples_per_unit > 0.0 && self.samples_per_unit.is_finite()) {
            return bad(format!("samples per unit {}", self.samples_per_unit));
        }
        if !(self.analytic_l0 > 0.0 && self.analytic_kappa > 0.0) {
            return bad("analytic curve needs l0 > 0 and kappa > 0".into());
        }
        Ok(())
    }

    /// Number of samples backing a quantity `x`, at least one.
    pub fn samples_for(&self, x: f64) -> usize {
        ((x * self.samples_per_unit).floor() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub w: Vec<f64>,
    pub dims: usize,
    pub classes: usize,
    pub round: usize,
}

impl ModelState {
    pub fn zeros(dims: usize, classes: usize) -> Self {
        Self {
            w: vec![0.0; model::param_len(dims, classes)],
            dims,
            classes,
            round: 0,
        }
    }
}

/// What one center hands back after a round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub model: ModelState,
    pub loss_start: f64,
    pub loss_end: f64,
}

impl ClientUpdate {
    /// Measured quality `f_m`: the drop in loss over the round.
    pub fn quality(&self) -> f64 {
        self.loss_start - self.loss_end
    }
}

/// One center's local training job.
#[derive(Debug, Clone, Copy)]
pub struct Assignment<'a> {
    pub center: usize,
    pub owner: usize,
    pub data: &'a Samples,
    /// Ground-truth quality of the owner's data (used by the analytic curve).
    pub data_quality: f64,
}

/// Run `E` local epochs starting from the global model.
pub fn client_update(
    job: Assignment<'_>,
    global: &ModelState,
    validation: &Samples,
    config: &TrainerConfig,
) -> Result<ClientUpdate> {
    let round = global.round + 1;
    let diverged = || Error::TrainingDiverged { round, center: job.center };
    match config.kind {
        TrainerKind::Analytic => {
            let l0 = config.analytic_l0;
            let loss_end = l0 * (-config.analytic_kappa * job.data_quality).exp();
            let drop = l0 - loss_end;
            let mut w = global.w.clone();
            w.iter_mut().for_each(|v| *v += drop);
            Ok(ClientUpdate {
                model: ModelState { w, dims: global.dims, classes: global.classes, round },
                loss_start: l0,
                loss_end,
            })
        }
        TrainerKind::Gradient => {
            if job.data.is_empty() {
                return Err(Error::InvalidInput(format!("center {} has no samples", job.center)));
            }
            let probe = match config.probe {
                QualityProbe::Validation => validation,
                QualityProbe::Local => job.data,
            };
            let mut w = global.w.clone();
            let loss_start = model::loss(&w, probe);
            for _ in 0..config.local_epochs {
                let g = model::gradient(&w, job.data);
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= config.learning_rate * gi;
                }
            }
            let loss_end = model::loss(&w, probe);
            if !loss_start.is_finite() || !loss_end.is_finite() || w.iter().any(|v| !v.is_finite()) {
                return Err(diverged());
            }
            Ok(ClientUpdate {
                model: ModelState { w, dims: global.dims, classes: global.classes, round },
                loss_start,
                loss_end,
            })
        }
    }
}

/// Combine local models. `weights` are per-model sample counts and are only
/// used in [`Aggregation::Weighted`] mode.
pub fn aggregate(locals: &[ModelState], weights: &[f64], mode: Aggregation) -> Result<ModelState> {
    let first = locals
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to aggregate".into()))?;
    if weights.len() != locals.len() {
        return Err(Error::InvalidInput("one weight per local model required".into()));
    }
    if locals.iter().any(|m| m.w.len() != first.w.len()) {
        return Err(Error::InvalidInput("local models differ in shape".into()));
    }
    let coeffs: Vec<f64> = match mode {
        Aggregation::Mean => vec![1.0 / locals.len() as f64; locals.len()],
        Aggregation::Weighted => {
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
                return Err(Error::InvalidInput("aggregation weights must be >= 0 with positive sum".into()));
            }
            weights.iter().map(|w| w / total).collect()
        }
    };
    let mut w = vec![0.0; first.w.len()];
    for (m, &c) in locals.iter().zip(&coeffs) {
        for (acc, v) in w.iter_mut().zip(&m.w) {
            *acc += c * v;
        }
    }
    Ok(ModelState {
        w,
        dims: first.dims,
        classes: first.classes,
        round: first.round,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterRecord {
    pub center: usize,
    pub owner: usize,
    pub w_m: Vec<f64>,
    pub loss_start: f64,
    pub loss_end: f64,
    /// Measured quality `loss_start − loss_end`.
    pub f_m: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub centers: Vec<CenterRecord>,
    pub global_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunEvent {
    DataTransfer { round: usize, owner: usize, center: usize, samples: usize },
    Readjusted { round: usize, eta_before: f64, eta_after: f64, excluded: Vec<usize> },
    AdjustmentSkipped { round: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub rounds: Vec<RoundRecord>,
    pub events: Vec<RunEvent>,
    pub ledger: PaymentLedger,
    pub initial: SneSolution,
    /// Profile in force at the end of training.
    pub final_solution: SneSolution,
    pub model: ModelState,
    /// Samples transferred per owner by the end of training.
    pub samples_used: Vec<usize>,
}

impl RunHistory {
    pub fn final_loss(&self) -> f64 {
        self.rounds.last().map_or(f64::NAN, |r| r.global_loss)
    }
}

/// Everything a federated run needs besides the trainer settings.
#[derive(Debug, Clone, Copy)]
pub struct FederatedInputs<'a> {
    pub solution: &'a SneSolution,
    pub matching: &'a Matching,
    /// Indexed by owner position in `solution.owners`.
    pub datasets: &'a [OwnerDataset],
    pub validation: &'a Samples,
    pub seed: u64,
}

/// Run the full training loop. Results are bit-identical for a given seed
/// regardless of the rayon thread count: local updates are independent and
/// are merged in ascending center order.
pub fn run_federated(inputs: FederatedInputs<'_>, config: &TrainerConfig) -> Result<RunHistory> {
    config.validate()?;
    let FederatedInputs { solution, matching, datasets, validation, seed } = inputs;
    let owners = solution.owners.len();
    if datasets.len() != owners || matching.pairs.len() != owners {
        return Err(Error::InvalidInput(format!(
            "{owners} owners but {} datasets and {} matching entries",
            datasets.len(),
            matching.pairs.len()
        )));
    }
    let pairs = matching.by_center();
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no matched owners to train".into()));
    }
    let (dims, classes) = (validation.dims, validation.classes);
    for &(n, _) in &pairs {
        let s = &datasets[n].samples;
        if s.dims != dims || s.classes != classes {
            return Err(Error::InvalidInput(format!("owner {n} data shape differs from validation")));
        }
    }

    let mut events = Vec::new();
    let mut pools: Vec<SamplePool> = datasets
        .iter()
        .enumerate()
        .map(|(n, d)| SamplePool::new(d.len(), seed, n))
        .collect();
    let mut train_sets: Vec<Option<Samples>> = vec![None; owners];
    let mut active = vec![false; owners];
    for &(n, c) in &pairs {
        let x = solution.profile.contributions[n].quantity;
        let added = pools[n].draw_to(config.samples_for(x));
        train_sets[n] = Some(datasets[n].samples.select(pools[n].indices()));
        active[n] = true;
        events.push(RunEvent::DataTransfer { round: 0, owner: n, center: c, samples: added });
    }

    let mut current = solution.clone();
    let mut ledger = PaymentLedger::default();
    let mut global = ModelState::zeros(dims, classes);
    let mut rounds = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        let jobs: Vec<Assignment<'_>> = pairs
            .iter()
            .filter(|&&(n, _)| active[n])
            .map(|&(n, c)| Assignment {
                center: c,
                owner: n,
                data: train_sets[n].as_ref().expect("active owners have data"),
                data_quality: datasets[n].initial_quality,
            })
            .collect();
        let updates: Vec<ClientUpdate> = jobs
            .par_iter()
            .map(|job| client_update(*job, &global, validation, config))
            .collect::<Result<_>>()?;

        let centers: Vec<CenterRecord> = jobs
            .iter()
            .zip(&updates)
            .map(|(job, u)| CenterRecord {
                center: job.center,
                owner: job.owner,
                w_m: u.model.w.clone(),
                loss_start: u.loss_start,
                loss_end: u.loss_end,
                f_m: u.quality(),
                samples: job.data.len(),
            })
            .collect();

        let locals: Vec<ModelState> = updates.iter().map(|u| u.model.clone()).collect();
        let weights: Vec<f64> = jobs.iter().map(|j| j.data.len() as f64).collect();
        global = aggregate(&locals, &weights, config.aggregation)?;
        global.round = round;

        let global_loss = match config.kind {
            TrainerKind::Gradient => model::loss(&global.w, validation),
            TrainerKind::Analytic => {
                updates.iter().map(|u| u.loss_end).sum::<f64>() / updates.len() as f64
            }
        };
        if !global_loss.is_finite() {
            return Err(Error::TrainingDiverged { round, center: usize::MAX });
        }
        let record = RoundRecord { round, centers, global_loss };

        if config.dynamic_adjustment && round == config.adjust_round {
            let assessment = evaluate_quality(&record, owners, current.params.xi);
            let outcome = readjust(&current, &assessment, matching, round).and_then(|adj| {
                let survivors = (0..owners)
                    .any(|n| active[n] && adj.solution.profile.contributions[n].quantity > 0.0);
                if survivors {
                    Ok(adj)
                } else {
                    Err(Error::DegenerateMarket("no matched owner keeps a positive quantity"))
                }
            });
            match outcome {
                Ok(adj) => {
                    events.push(RunEvent::Readjusted {
                        round,
                        eta_before: current.eta(),
                        eta_after: adj.solution.eta(),
                        excluded: assessment.excluded.clone(),
                    });
                    for n in 0..owners {
                        if !active[n] {
                            continue;
                        }
                        let x = adj.solution.profile.contributions[n].quantity;
                        if x <= 0.0 {
                            active[n] = false;
                            continue;
                        }
                        let added = pools[n].draw_to(config.samples_for(x));
                        if added > 0 {
                            train_sets[n] = Some(datasets[n].samples.select(pools[n].indices()));
                            let c = matching.center_of(n).expect("active owners are matched");
                            events.push(RunEvent::DataTransfer { round, owner: n, center: c, samples: added });
                        }
                    }
                    ledger.extend(adj.payments);
                    current = adj.solution;
                }
                Err(e) => events.push(RunEvent::AdjustmentSkipped { round, reason: e.to_string() }),
            }
        }
        rounds.push(record);
    }

    Ok(RunHistory {
        rounds,
        events,
        ledger,
        initial: solution.clone(),
        final_solution: current,
        model: global,
        samples_used: pools.iter().map(|p| p.taken()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(w: Vec<f64>) -> ModelState {
        ModelState { w, dims: 1, classes: 1, round: 0 }
    }

    #[test]
    fn weighted_aggregation_uses_sample_shares() {
        let locals = [state(vec![0.0, 0.0]), state(vec![1.0, 1.0])];
        let m = aggregate(&locals, &[1.0, 3.0], Aggregation::Weighted).unwrap();
        assert_eq!(m.w, vec![0.75, 0.75]);
        let m = aggregate(&locals, &[1.0, 3.0], Aggregation::Mean).unwrap();
        assert_eq!(m.w, vec![0.5, 0.5]);
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(aggregate(&[], &[], Aggregation::Mean).is_err());
        let locals = [state(vec![0.0]), state(vec![1.0, 2.0])];
        assert!(aggregate(&locals, &[1.0, 1.0], Aggregation::Mean).is_err());
        let locals = [state(vec![0.0]), state(vec![1.0])];
        assert!(aggregate(&locals, &[0.0, 0.0], Aggregation::Weighted).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(TrainerConfig::default().validate().is_ok());
        let c = TrainerConfig { adjust_round: 11, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainerConfig { local_epochs: 0, ..Default::default() };
        assert!(c.validate().is_err());
        assert_eq!(TrainerConfig::default().samples_for(0.0001), 1);
        assert_eq!(TrainerConfig::default().samples_for(1.5), 750);
    }

    #[test]
    fn analytic_drop_grows_with_quality() {
        let data = Samples { dims: 1, classes: 2, features: vec![0.5], labels: vec![0] };
        let cfg = TrainerConfig { kind: TrainerKind::Analytic, ..Default::default() };
        let global = ModelState::zeros(1, 2);
        let run = |q| {
            let job = Assignment { center: 0, owner: 0, data: &data, data_quality: q };
            client_update(job, &global, &data, &cfg).unwrap().quality()
        };
        assert!(run(0.9) > run(0.5));
        assert!((run(1.0) - (1.0 - (-1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn gradient_divergence_is_reported() {
        let data = Samples { dims: 1, classes: 2, features: vec![1e200], labels: vec![0] };
        let cfg = TrainerConfig { learning_rate: 1e200, ..Default::default() };
        let global = ModelState::zeros(1, 2);
        let job = Assignment { center: 4, owner: 0, data: &data, data_quality: 1.0 };
        let err = client_update(job, &global, &data, &cfg).unwrap_err();
        assert_eq!(err, Error::TrainingDiverged { round: 1, center: 4 });
    }
}

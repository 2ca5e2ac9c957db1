//! Experiment drivers behind each CLI subcommand.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tristack_core::equilibrium::{solve_sne, verify_sne, SneSolution, VerificationReport, DEFAULT_GRID_STEPS};
use tristack_core::matching::{
    build_preferences, gale_shapley, is_stable, match_solution, realized_center_utilities,
    realized_utilities, BlockingPair, Matching,
};
use tristack_core::market::{utility_owner, utility_server};
use tristack_core::training::{
    generate_owner_data, run_federated, validation_set, FederatedInputs, RunHistory, TrainerConfig,
};
use tristack_core::{ComputeCenter, DataOwner, StrategyProfile};

use crate::config::{Draw, ExperimentConfig, Noise, Strategy};
use crate::error::HarnessError;
use crate::output::{SweepResult, SweepRow};

pub type Result<T> = std::result::Result<T, HarnessError>;

const QUALITY_STREAM: u64 = 1;
const SIGMA_STREAM: u64 = 2;
const PAYMENT_STREAM: u64 = 3;
const MISREPORT_STREAM: u64 = 4;

/// Verification tolerance used by `solve`.
pub const VERIFY_TOLERANCE: f64 = 1e-5;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// `n` independent draws from `U(0, 1]`.
pub fn unit_draws(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed, stream);
    (0..n).map(|_| 1.0 - r.random::<f64>()).collect()
}

fn resolve(draw: &Draw, seed: u64, stream: u64, n: usize, what: &str) -> Result<Vec<f64>> {
    match draw {
        Draw::Uniform => Ok(unit_draws(seed, stream, n)),
        Draw::Fixed(v) if v.len() == n => Ok(v.clone()),
        Draw::Fixed(v) => Err(HarnessError::Usage(format!(
            "{} fixed {what} values but the experiment needs {n}",
            v.len()
        ))),
    }
}

/// True qualities and center cost factors for an `n × m` market.
pub fn market_for(cfg: &ExperimentConfig, n: usize, m: usize, seed: u64) -> Result<(Vec<DataOwner>, Vec<ComputeCenter>)> {
    let f = resolve(&cfg.quality, seed, QUALITY_STREAM, n, "quality")?;
    let sigma = resolve(&cfg.sigma, seed, SIGMA_STREAM, m, "sigma")?;
    let owners = f
        .iter()
        .enumerate()
        .map(|(i, &q)| DataOwner::new(i + 1, q, cfg.owner_capacity))
        .collect();
    let centers = sigma
        .iter()
        .enumerate()
        .map(|(i, &s)| ComputeCenter::new(i + 1, s, cfg.center_capacity))
        .collect();
    Ok((owners, centers))
}

pub fn market(cfg: &ExperimentConfig) -> Result<(Vec<DataOwner>, Vec<ComputeCenter>)> {
    market_for(cfg, cfg.owners, cfg.centers, cfg.seed)
}

fn random_payment(seed: u64, n: usize, lo: f64, hi: f64) -> f64 {
    rng(seed, PAYMENT_STREAM + ((n as u64) << 8)).random_range(lo..hi)
}

fn u_s(profile: &StrategyProfile) -> f64 {
    profile.utilities.as_ref().map_or(f64::NAN, |u| u.u_server)
}

fn mean_u_n(profile: &StrategyProfile) -> f64 {
    profile
        .utilities
        .as_ref()
        .map_or(f64::NAN, |u| u.mean_owner_utility())
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: SneSolution,
    /// Profile at the payment chosen by the configured strategy.
    pub profile: StrategyProfile,
    pub verification: VerificationReport,
    pub matching: Matching,
    pub realized_center_utilities: Vec<f64>,
}

impl SolveReport {
    pub fn summary(&self) -> String {
        let s = &self.solution;
        let u = self.profile.utilities.as_ref().expect("evaluated profile");
        let mut out = format!(
            "eta* = {:.6}  paid = {:.6}  U_s = {:.6}  mean U_n = {:.6}\n",
            s.eta(),
            self.profile.eta,
            u.u_server,
            u.mean_owner_utility()
        );
        out += &format!(
            "participants {}/{}  idle centers {:?}  clipped owners {:?}\n",
            s.intermediates.participants.len(),
            s.owners.len(),
            s.idle_centers,
            s.clipped_owners
        );
        out += &format!(
            "verify: max gain {:.3e} (server {:.3e}, owners {:.3e}, centers {:.3e}) -> {}\n",
            self.verification.max_gain(),
            self.verification.server_gain,
            self.verification.max_owner_gain(),
            self.verification.max_center_gain(),
            if self.verification.passed() { "ok" } else { "FAILED" }
        );
        out
    }

    /// One row per party: `party,index,id,quality_or_sigma,quantity,contribution,utility,matched`.
    pub fn to_csv(&self) -> Result<String> {
        use crate::output::{float, table_csv};
        let s = &self.solution;
        let u = self.profile.utilities.as_ref().expect("evaluated profile");
        let mut rows = vec![vec![
            "server".into(),
            "0".into(),
            "0".into(),
            String::new(),
            float(self.profile.eta),
            float(self.profile.total_quality()),
            float(u.u_server),
            String::new(),
        ]];
        for (n, o) in s.owners.iter().enumerate() {
            let c = &self.profile.contributions[n];
            rows.push(vec![
                "owner".into(),
                (n + 1).to_string(),
                o.id.to_string(),
                float(o.reported_quality),
                float(c.quantity),
                float(c.quality),
                float(u.u_owners[n]),
                self.matching.center_of(n).map_or(String::new(), |c| (c + 1).to_string()),
            ]);
        }
        for (m, c) in s.centers.iter().enumerate() {
            rows.push(vec![
                "center".into(),
                (m + 1).to_string(),
                c.id.to_string(),
                float(c.sigma),
                float(self.profile.undertakings[m]),
                String::new(),
                float(u.u_centers[m]),
                self.matching.owner_of(m).map_or(String::new(), |n| (n + 1).to_string()),
            ]);
        }
        table_csv(
            &["party", "index", "id", "quality_or_sigma", "quantity", "contribution", "utility", "matched"],
            &rows,
        )
    }
}

/// Solve, verify and match the configured market.
pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<SolveReport> {
    let (owners, centers) = market(cfg)?;
    let solution = solve_sne(&owners, &centers, &cfg.params)?;
    let verification = verify_sne(&solution, DEFAULT_GRID_STEPS, VERIFY_TOLERANCE);
    let eta = match cfg.strategy {
        Strategy::QdRdfl => solution.eta(),
        Strategy::FixedEta(v) => v,
        Strategy::RandomEta { lo, hi } => random_payment(cfg.seed, cfg.owners, lo, hi),
    };
    let profile = solution.profile_at(eta)?;
    let (matching, _) = match_solution(&solution)?;
    let realized = realized_center_utilities(&solution, &matching);
    Ok(SolveReport {
        solution,
        profile,
        verification,
        matching,
        realized_center_utilities: realized,
    })
}

fn range_or(cfg: &ExperimentConfig, default_hi: f64) -> (f64, f64) {
    (cfg.sweep.lo.unwrap_or(0.0), cfg.sweep.hi.unwrap_or(default_hi))
}

fn points(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    tristack_core::equilibrium::grid(lo, hi, steps).collect()
}

/// U_s as a function of the payment, with owners best-responding at each point.
pub fn cmd_sweep_eta(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let (owners, centers) = market(cfg)?;
    let solution = solve_sne(&owners, &centers, &cfg.params)?;
    let default_hi = if solution.eta() > 0.0 { 2.0 * solution.eta() } else { cfg.params.alpha };
    let (lo, hi) = range_or(cfg, default_hi);
    let rows = points(lo, hi, cfg.sweep.steps)
        .into_iter()
        .map(|eta| {
            let p = solution.profile_at(eta)?;
            Ok(SweepRow {
                value: eta,
                u_s: u_s(&p),
                mean_u_n: mean_u_n(&p),
                detail: vec![p.total_quality()],
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        variable: "eta".into(),
        detail_columns: vec!["total_quality".into()],
        rows,
        seed: cfg.seed,
        config_hash: cfg.source_hash.clone(),
    })
}

/// One owner's utility over its own quantity, payment and everyone else fixed
/// at equilibrium.
pub fn cmd_sweep_owner(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let (owners, centers) = market(cfg)?;
    let solution = solve_sne(&owners, &centers, &cfg.params)?;
    let n = cfg.sweep.owner;
    let eta = solution.eta();
    let base_q = solution.profile.qualities();
    let f: Vec<f64> = solution.owners.iter().map(|o| o.reported_quality).collect();
    let x_star = solution.profile.contributions[n].quantity;
    let default_hi = if x_star > 0.0 {
        2.0 * x_star
    } else {
        base_q.iter().sum::<f64>() / f[n]
    };
    let (lo, hi) = range_or(cfg, default_hi);
    let params = &cfg.params;
    let mut rows = Vec::new();
    for x in points(lo, hi, cfg.sweep.steps) {
        let mut q = base_q.clone();
        q[n] = f[n] * x;
        let total: f64 = q.iter().sum();
        let utilities: Vec<f64> = (0..q.len())
            .map(|i| utility_owner(i, &q, &f, eta, params))
            .collect::<std::result::Result<_, _>>()?;
        rows.push(SweepRow {
            value: x,
            u_s: utility_server(eta, total, params)?,
            mean_u_n: utilities.iter().sum::<f64>() / utilities.len() as f64,
            detail: vec![utilities[n], q[n]],
        });
    }
    Ok(SweepResult {
        variable: "quantity".into(),
        detail_columns: vec!["u_owner".into(), "contribution".into()],
        rows,
        seed: cfg.seed,
        config_hash: cfg.source_hash.clone(),
    })
}

/// Re-solve with the selected owners reporting `f·(1 + r)` (capped at 1) for
/// each ratio `r` on the deviation grid.
pub fn cmd_deviation(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let (owners, centers) = market(cfg)?;
    let dev = &cfg.deviation;
    let mut rows = Vec::new();
    for r in points(dev.lo, dev.hi, dev.steps) {
        let mut reported = owners.clone();
        for &n in &dev.owners {
            reported[n].reported_quality = (owners[n].reported_quality * (1.0 + r)).min(1.0);
        }
        let sol = solve_sne(&reported, &centers, &cfg.params)?;
        let u = sol.utilities();
        let mut detail = Vec::new();
        for &n in &dev.owners {
            detail.push(u.u_owners[n]);
            detail.push(reported[n].reported_quality);
        }
        rows.push(SweepRow {
            value: r,
            u_s: u.u_server,
            mean_u_n: u.mean_owner_utility(),
            detail,
        });
    }
    let detail_columns = dev
        .owners
        .iter()
        .flat_map(|n| [format!("u_owner{}", n + 1), format!("reported_f{}", n + 1)])
        .collect();
    Ok(SweepResult {
        variable: "deviation".into(),
        detail_columns,
        rows,
        seed: cfg.seed,
        config_hash: cfg.source_hash.clone(),
    })
}

pub const COMPARE_COLUMNS: [&str; 7] = [
    "seed",
    "eta_star",
    "u_s_fixed",
    "u_s_random",
    "mean_u_n_fixed",
    "mean_u_n_random",
    "eta_random",
];

fn compare_one(cfg: &ExperimentConfig, seed: u64, n: usize) -> Result<SweepRow> {
    let (owners, centers) = market_for(cfg, n, n, seed)?;
    let sol = solve_sne(&owners, &centers, &cfg.params)?;
    let (lo, hi) = cfg.random_range();
    let eta_random = random_payment(seed, n, lo, hi);
    let fixed = sol.profile_at(cfg.fixed_eta())?;
    let random = sol.profile_at(eta_random)?;
    let qd = &sol.profile;
    Ok(SweepRow {
        value: n as f64,
        u_s: u_s(qd),
        mean_u_n: mean_u_n(qd),
        detail: vec![
            seed as f64,
            sol.eta(),
            u_s(&fixed),
            u_s(&random),
            mean_u_n(&fixed),
            mean_u_n(&random),
            eta_random,
        ],
    })
}

/// Equilibrium payment against the fixed and random payment baselines over
/// market sizes. Rows are ordered by `(seed, N)`.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let jobs: Vec<(u64, usize)> = (0..cfg.compare.runs as u64)
        .flat_map(|i| cfg.compare.sizes.iter().map(move |&n| (cfg.seed.wrapping_add(i), n)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, n)| compare_one(cfg, seed, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        variable: "owners".into(),
        detail_columns: COMPARE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
        seed: cfg.seed,
        config_hash: cfg.source_hash.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub owners: usize,
    pub runs: usize,
    pub u_s_beats_fixed: f64,
    pub u_s_beats_random: f64,
    pub u_n_beats_fixed: f64,
    pub u_n_beats_random: f64,
    pub mean_u_n: f64,
}

fn at_least(a: f64, b: f64) -> bool {
    a >= b - 1e-12 * b.abs().max(1.0)
}

/// Per market size: fraction of runs where the equilibrium payment is at
/// least as good as each baseline.
pub fn summarize_compare(result: &SweepResult) -> Vec<CompareSummary> {
    let mut sizes: Vec<usize> = result.rows.iter().map(|r| r.value as usize).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|n| {
            let rows: Vec<&SweepRow> = result.rows.iter().filter(|r| r.value as usize == n).collect();
            let frac = |pred: &dyn Fn(&SweepRow) -> bool| {
                rows.iter().filter(|r| pred(r)).count() as f64 / rows.len() as f64
            };
            CompareSummary {
                owners: n,
                runs: rows.len(),
                u_s_beats_fixed: frac(&|r| at_least(r.u_s, r.detail[2])),
                u_s_beats_random: frac(&|r| at_least(r.u_s, r.detail[3])),
                u_n_beats_fixed: frac(&|r| at_least(r.mean_u_n, r.detail[4])),
                u_n_beats_random: frac(&|r| at_least(r.mean_u_n, r.detail[5])),
                mean_u_n: rows.iter().map(|r| r.mean_u_n).sum::<f64>() / rows.len() as f64,
            }
        })
        .collect()
}

/// Inputs of one training run: market with reported qualities plus the data
/// generated from the true ones.
struct TrainingSetup {
    solution: SneSolution,
    matching: Matching,
    datasets: Vec<tristack_core::training::OwnerDataset>,
    validation: tristack_core::training::Samples,
    misreporting: Vec<usize>,
}

fn training_setup(cfg: &ExperimentConfig, seed: u64, misreport: Option<(f64, f64)>) -> Result<TrainingSetup> {
    let (truth, centers) = market_for(cfg, cfg.owners, cfg.centers, seed)?;
    let mut reported = truth.clone();
    let mut misreporting = Vec::new();
    if let Some((fraction, ratio)) = misreport {
        let count = (fraction * cfg.owners as f64).round() as usize;
        let mut order: Vec<usize> = (0..cfg.owners).collect();
        order.shuffle(&mut rng(seed, MISREPORT_STREAM));
        misreporting = order[..count].to_vec();
        misreporting.sort_unstable();
        for &n in &misreporting {
            reported[n].reported_quality = (truth[n].reported_quality * (1.0 + ratio)).clamp(1e-9, 1.0);
        }
    }
    let noise: Vec<f64> = match &cfg.data.noise {
        Noise::FromQuality => truth.iter().map(|o| (1.0 - o.reported_quality).max(0.0).sqrt()).collect(),
        Noise::Fixed(v) => v.clone(),
    };
    let d = &cfg.data;
    let datasets = truth
        .iter()
        .zip(&noise)
        .map(|(o, &s)| generate_owner_data(seed, o, s, d.pool, d.dims, d.classes))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let validation = validation_set(seed, d.validation, d.dims, d.classes)?;
    let solution = solve_sne(&reported, &centers, &cfg.params)?;
    let (matching, _) = match_solution(&solution)?;
    Ok(TrainingSetup { solution, matching, datasets, validation, misreporting })
}

fn train(setup: &TrainingSetup, trainer: &TrainerConfig, seed: u64) -> Result<RunHistory> {
    Ok(run_federated(
        FederatedInputs {
            solution: &setup.solution,
            matching: &setup.matching,
            datasets: &setup.datasets,
            validation: &setup.validation,
            seed,
        },
        trainer,
    )?)
}

/// One honest training run of the configured market.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<RunHistory> {
    let setup = training_setup(cfg, cfg.seed, None)?;
    train(&setup, &cfg.trainer, cfg.seed)
}

/// Per-round rows: `round,center,owner,samples,loss_start,loss_end,f_m,global_loss`.
pub fn history_csv(h: &RunHistory) -> Result<String> {
    use crate::output::{float, table_csv};
    let rows: Vec<Vec<String>> = h
        .rounds
        .iter()
        .flat_map(|r| {
            r.centers.iter().map(move |c| {
                vec![
                    r.round.to_string(),
                    (c.center + 1).to_string(),
                    (c.owner + 1).to_string(),
                    c.samples.to_string(),
                    float(c.loss_start),
                    float(c.loss_end),
                    float(c.f_m),
                    float(r.global_loss),
                ]
            })
        })
        .collect();
    table_csv(
        &["round", "center", "owner", "samples", "loss_start", "loss_end", "f_m", "global_loss"],
        &rows,
    )
}

pub fn ledger_csv(h: &RunHistory) -> Result<String> {
    let mut buf = Vec::new();
    h.ledger.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("ledger csv is utf-8"))
}

#[derive(Debug, Clone)]
pub struct AblationPair {
    pub seed: u64,
    /// 0-based owners that over-reported.
    pub misreporting: Vec<usize>,
    pub adjusted: RunHistory,
    pub baseline: RunHistory,
}

impl AblationPair {
    pub fn adjusted_wins(&self) -> bool {
        self.adjusted.final_loss() <= self.baseline.final_loss()
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub pairs: Vec<AblationPair>,
}

impl AblationReport {
    pub fn win_rate(&self) -> f64 {
        self.pairs.iter().filter(|p| p.adjusted_wins()).count() as f64 / self.pairs.len() as f64
    }

    /// `seed,round,loss_adjusted,loss_static`.
    pub fn to_csv(&self) -> Result<String> {
        use crate::output::{float, table_csv};
        let rows: Vec<Vec<String>> = self
            .pairs
            .iter()
            .flat_map(|p| {
                p.adjusted.rounds.iter().zip(&p.baseline.rounds).map(move |(a, b)| {
                    vec![p.seed.to_string(), a.round.to_string(), float(a.global_loss), float(b.global_loss)]
                })
            })
            .collect();
        table_csv(&["seed", "round", "loss_adjusted", "loss_static"], &rows)
    }
}

/// Dynamic adjustment on and off, same seeds, with a share of owners
/// over-reporting their quality.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationReport> {
    let a = &cfg.ablation;
    let seeds: Vec<u64> = (0..a.pairs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let pairs = seeds
        .par_iter()
        .map(|&seed| {
            let setup = training_setup(cfg, seed, Some((a.misreport_fraction, a.misreport_ratio)))?;
            let on = TrainerConfig { dynamic_adjustment: true, ..cfg.trainer.clone() };
            let off = TrainerConfig { dynamic_adjustment: false, ..cfg.trainer.clone() };
            Ok(AblationPair {
                seed,
                misreporting: setup.misreporting.clone(),
                adjusted: train(&setup, &on, seed)?,
                baseline: train(&setup, &off, seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { pairs })
}

#[derive(Debug, Clone)]
pub struct MatchReport {
    pub matching: Matching,
    pub quantities: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub undertakings: Vec<f64>,
    pub realized_utilities: Vec<f64>,
    pub blocking: Vec<BlockingPair>,
}

impl MatchReport {
    /// `owner,center,sigma,undertaking,quantity,realized_u_m`.
    pub fn to_csv(&self) -> Result<String> {
        use crate::output::{float, table_csv};
        let rows: Vec<Vec<String>> = (0..self.quantities.len())
            .map(|n| match self.matching.center_of(n) {
                Some(c) => vec![
                    (n + 1).to_string(),
                    (c + 1).to_string(),
                    float(self.sigmas[c]),
                    float(self.undertakings[c]),
                    float(self.quantities[n]),
                    float(self.realized_utilities[c]),
                ],
                None => vec![
                    (n + 1).to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    float(self.quantities[n]),
                    String::new(),
                ],
            })
            .collect();
        table_csv(&["owner", "center", "sigma", "undertaking", "quantity", "realized_u_m"], &rows)
    }
}

/// Match from explicit `match.*` columns when given, otherwise from the
/// solved market.
pub fn cmd_match(cfg: &ExperimentConfig) -> Result<MatchReport> {
    let m = &cfg.matching;
    let (quantities, sigmas, undertakings, matching) = match (&m.quantity, &m.sigma, &m.undertaking) {
        (Some(x), Some(s), Some(d)) => {
            let prefs = build_preferences(x, s, d)?;
            (x.clone(), s.clone(), d.clone(), gale_shapley(&prefs))
        }
        _ => {
            let (owners, centers) = market(cfg)?;
            let sol = solve_sne(&owners, &centers, &cfg.params)?;
            let (matching, _) = match_solution(&sol)?;
            let sigmas = sol.centers.iter().map(|c| c.sigma).collect();
            (sol.profile.quantities(), sigmas, sol.profile.undertakings.clone(), matching)
        }
    };
    let blocking = {
        let active: Vec<usize> = (0..quantities.len()).filter(|&n| quantities[n] > 0.0).collect();
        let x: Vec<f64> = active.iter().map(|&n| quantities[n]).collect();
        let prefs = build_preferences(&x, &sigmas, &undertakings)?;
        let local = Matching {
            pairs: active.iter().map(|&n| matching.center_of(n)).collect(),
            unmatched_centers: matching.unmatched_centers.clone(),
            matched_count: matching.matched_count,
        };
        is_stable(&local, &prefs)
            .into_iter()
            .map(|b| BlockingPair { owner: active[b.owner], center: b.center })
            .collect()
    };
    let realized_utilities = realized_utilities(&quantities, &sigmas, &matching, &cfg.params);
    Ok(MatchReport {
        matching,
        quantities,
        sigmas,
        undertakings,
        realized_utilities,
        blocking,
    })
}

//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::experiments::{self, Result};
use crate::output::{line_chart, SweepResult};

#[derive(Debug, Parser)]
#[command(name = "tristack", version, about = "Incentive mechanism experiments for federated data markets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for output files. Without it CSV goes to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Svg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the market, verify the equilibrium and match owners to centers.
    Solve,
    /// Owner-to-center matching.
    Match,
    /// Federated training run with dynamic adjustment.
    Simulate,
    /// Server utility over the payment.
    SweepEta,
    /// One owner's utility over its own quantity.
    SweepOwner,
    /// Owner utility under misreported quality.
    Deviate,
    /// Equilibrium payment against fixed and random baselines.
    Compare,
    /// Training with and without dynamic adjustment.
    Ablate,
}

impl Command {
    fn stem(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Match => "match",
            Command::Simulate => "simulate",
            Command::SweepEta => "sweep_eta",
            Command::SweepOwner => "sweep_owner",
            Command::Deviate => "deviation",
            Command::Compare => "compare",
            Command::Ablate => "ablation",
        }
    }
}

/// What a command produced: a human summary and named artifacts.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub summary: String,
    pub files: Vec<(String, String)>,
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Usage("--config is required".into()))?;
    let text = fs::read_to_string(path)?;
    let mut cfg: ExperimentConfig = text.parse()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn sweep_chart(result: &SweepResult, title: &str) -> String {
    let pick = |f: fn(&crate::output::SweepRow) -> f64| result.rows.iter().map(|r| (r.value, f(r))).collect();
    line_chart(
        title,
        &result.variable,
        &[("U_s".into(), pick(|r| r.u_s)), ("mean U_n".into(), pick(|r| r.mean_u_n))],
    )
}

fn emit_sweep(result: &SweepResult, stem: &str, title: &str, format: Format) -> Result<Vec<(String, String)>> {
    Ok(match format {
        Format::Csv => vec![(format!("{stem}.csv"), result.to_csv()?)],
        Format::Svg => vec![(format!("{stem}.svg"), sweep_chart(result, title))],
    })
}

fn csv_only(format: Format, command: Command) -> Result<()> {
    match format {
        Format::Csv => Ok(()),
        Format::Svg => Err(HarnessError::Usage(format!("`{}` has no chart output", command.stem()))),
    }
}

/// Run one command against a parsed config.
pub fn execute(command: Command, cfg: &ExperimentConfig, format: Format) -> Result<Outcome> {
    let stem = command.stem();
    match command {
        Command::Solve => {
            csv_only(format, command)?;
            let r = experiments::cmd_solve(cfg)?;
            Ok(Outcome { summary: r.summary(), files: vec![(format!("{stem}.csv"), r.to_csv()?)] })
        }
        Command::Match => {
            csv_only(format, command)?;
            let r = experiments::cmd_match(cfg)?;
            let summary = format!(
                "{} matched, {} unmatched centers, {} blocking pairs\n",
                r.matching.matched_count,
                r.matching.unmatched_centers.len(),
                r.blocking.len()
            );
            Ok(Outcome { summary, files: vec![(format!("{stem}.csv"), r.to_csv()?)] })
        }
        Command::Simulate => {
            csv_only(format, command)?;
            let h = experiments::cmd_simulate(cfg)?;
            let summary = format!(
                "{} rounds, final loss {:.6}, {} ledger entries totalling {:.6}\n",
                h.rounds.len(),
                h.final_loss(),
                h.ledger.entries.len(),
                h.ledger.total()
            );
            Ok(Outcome {
                summary,
                files: vec![
                    (format!("{stem}.csv"), experiments::history_csv(&h)?),
                    ("ledger.csv".into(), experiments::ledger_csv(&h)?),
                ],
            })
        }
        Command::SweepEta => {
            let r = experiments::cmd_sweep_eta(cfg)?;
            let peak = r.rows.iter().max_by(|a, b| a.u_s.total_cmp(&b.u_s)).map_or(f64::NAN, |r| r.value);
            Ok(Outcome {
                summary: format!("{} points, U_s peaks at eta = {peak:.6}\n", r.rows.len()),
                files: emit_sweep(&r, stem, "Server utility over payment", format)?,
            })
        }
        Command::SweepOwner => {
            let r = experiments::cmd_sweep_owner(cfg)?;
            let peak = r
                .rows
                .iter()
                .max_by(|a, b| a.detail[0].total_cmp(&b.detail[0]))
                .map_or(f64::NAN, |r| r.value);
            Ok(Outcome {
                summary: format!("{} points, owner utility peaks at x = {peak:.6}\n", r.rows.len()),
                files: emit_sweep(&r, stem, "Owner utility over quantity", format)?,
            })
        }
        Command::Deviate => {
            let r = experiments::cmd_deviation(cfg)?;
            Ok(Outcome {
                summary: format!("{} deviation ratios\n", r.rows.len()),
                files: emit_sweep(&r, stem, "Utility under misreported quality", format)?,
            })
        }
        Command::Compare => {
            let r = experiments::cmd_compare(cfg)?;
            let summary: String = experiments::summarize_compare(&r)
                .iter()
                .map(|s| {
                    format!(
                        "N={:>3} runs={} U_s>=fixed {:.3} U_s>=random {:.3} U_n>=fixed {:.3} U_n>=random {:.3}\n",
                        s.owners, s.runs, s.u_s_beats_fixed, s.u_s_beats_random, s.u_n_beats_fixed, s.u_n_beats_random
                    )
                })
                .collect();
            let files = match format {
                Format::Csv => vec![(format!("{stem}.csv"), r.to_csv()?)],
                Format::Svg => vec![(format!("{stem}.svg"), compare_chart(&r))],
            };
            Ok(Outcome { summary, files })
        }
        Command::Ablate => {
            let r = experiments::cmd_ablate(cfg)?;
            let summary = format!(
                "{} pairs, adjusted final loss <= static in {:.1}%\n",
                r.pairs.len(),
                100.0 * r.win_rate()
            );
            let files = match format {
                Format::Csv => vec![(format!("{stem}.csv"), r.to_csv()?)],
                Format::Svg => vec![(format!("{stem}.svg"), ablation_chart(&r))],
            };
            Ok(Outcome { summary, files })
        }
    }
}

fn mean_by_key(points: impl Iterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    let mut acc: std::collections::BTreeMap<u64, (f64, f64, usize)> = Default::default();
    for (k, v) in points {
        let e = acc.entry(k.to_bits()).or_insert((k, 0.0, 0));
        e.1 += v;
        e.2 += 1;
    }
    let mut out: Vec<(f64, f64)> = acc.into_values().map(|(k, s, c)| (k, s / c as f64)).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn compare_chart(r: &SweepResult) -> String {
    let series = |label: &str, f: fn(&crate::output::SweepRow) -> f64| {
        (label.to_string(), mean_by_key(r.rows.iter().map(|row| (row.value, f(row)))))
    };
    line_chart(
        "Mean server utility by market size",
        "owners",
        &[
            series("equilibrium", |r| r.u_s),
            series("fixed", |r| r.detail[2]),
            series("random", |r| r.detail[3]),
        ],
    )
}

fn ablation_chart(r: &experiments::AblationReport) -> String {
    let series = |label: &str, adjusted: bool| {
        let pts = r.pairs.iter().flat_map(|p| {
            let h = if adjusted { &p.adjusted } else { &p.baseline };
            h.rounds.iter().map(|x| (x.round as f64, x.global_loss))
        });
        (label.to_string(), mean_by_key(pts))
    };
    line_chart(
        "Mean validation loss per round",
        "round",
        &[series("adjusted", true), series("static", false)],
    )
}

pub fn write_outcome(outcome: &Outcome, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            for (name, body) in &outcome.files {
                fs::write(dir.join(name), body)?;
            }
            eprint!("{}", outcome.summary);
        }
        None => {
            for (_, body) in &outcome.files {
                print!("{body}");
            }
            eprint!("{}", outcome.summary);
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let outcome = execute(cli.command, &cfg, cli.format)?;
    write_outcome(&outcome, cli.out.as_deref())
}

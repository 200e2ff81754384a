use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use dcutr_sim::analysis::{self, AnalyzeOptions};
use dcutr_sim::campaign;
use dcutr_sim::config::{CampaignConfig, ConfigError};
use dcutr_sim::strategy::{self, BirthdayPlan, Scenario, PORT_SPACE};

#[derive(Parser)]
#[command(name = "dcutr-sim", version, about = "Hole-punching simulator, oracle and analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    /// One side endpoint-dependent, the other endpoint-independent.
    Mixed,
    /// Both sides endpoint-dependent.
    BothEdm,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a campaign and write its results.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Results file, `.json` or `.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Flat key/value report, `.json` or `.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run trials on one thread.
        #[arg(long)]
        serial: bool,
    },
    /// Closed-form birthday-paradox success probability and expected gain.
    Oracle {
        #[arg(long)]
        m: u32,
        #[arg(long)]
        k: u32,
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = PORT_SPACE)]
        space: u32,
        /// EDM prevalence used for the expected gain.
        #[arg(long, default_value_t = 0.11)]
        edm_share: f64,
    },
    /// Analyze a results file.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        min_per_client: u64,
        #[arg(long, default_value_t = 0.05)]
        bin_width: f64,
        /// Weight trend points by their record count.
        #[arg(long)]
        weighted_trend: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Simulate { config, trials, seed, out, report, serial } => {
            let mut cfg = CampaignConfig::load(&config)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if serial {
                cfg.policy.parallel = false;
            }
            cfg.validate()?;
            let output = campaign::execute(&cfg)?;
            campaign::export_results(&output.results, &out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = report {
                campaign::export_report(&output.report, &path).with_context(|| format!("writing {}", path.display()))?;
            }
            let m = &output.report.metrics;
            println!(
                "{} trials, success rate {} over {} filtered results, config {}",
                m.n_results,
                m.success.rate.map_or("n/a".to_owned(), |r| format!("{r:.4}")),
                m.success.n,
                &output.report.config_hash[..12]
            );
        }
        Cmd::Oracle { m, k, scenario, space, edm_share } => {
            let sc = match scenario {
                ScenarioArg::Mixed => Scenario::EdmVsEim,
                ScenarioArg::BothEdm => Scenario::EdmVsEdm,
            };
            let plan = BirthdayPlan::new(m, k, space, sc)?;
            let p = strategy::birthday_probability(&plan)?;
            let (mixed, both) = strategy::edm_pair_shares(edm_share)?;
            let mixed_p = strategy::birthday_probability(&BirthdayPlan { scenario: Scenario::EdmVsEim, ..plan })?;
            let gain = strategy::expected_gain(edm_share, mixed_p)?;
            let out = serde_json::json!({
                "scenario": sc,
                "m_open": m,
                "k_probe": k,
                "port_space": space,
                "probability": p,
                "edm_share": edm_share,
                "mixed_pair_share": mixed,
                "both_edm_pair_share": both,
                "expected_gain": gain,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Cmd::Analyze { input, out, min_per_client, bin_width, weighted_trend } => {
            let file = analysis::ingest(&input).with_context(|| format!("reading {}", input.display()))?;
            let opts = AnalyzeOptions { min_per_client, bin_width, weighted_trend, ..AnalyzeOptions::default() };
            let report = analysis::analyze(&file, &opts)?;
            let f = std::fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(f), &report)?;
            println!(
                "{} records, {} networks, success rate {}",
                report.aggregates.n_results,
                report.networks.networks,
                report.aggregates.success.rate.map_or("n/a".to_owned(), |r| format!("{r:.4}"))
            );
        }
    }
    Ok(())
}

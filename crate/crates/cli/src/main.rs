//! `fedsb`: run federated fine-tuning simulations, sweeps, cost tables and
//! the invariant suite.
//!
//! # Output schema (version 1)
//!
//! `run` writes into the output directory:
//!
//! * `config.toml`: the effective configuration after command-line overrides.
//! * `rounds.csv`: `schema_version, round, global_loss, divergence,
//!   mean_client_loss, max_client_loss, upload, download, epsilon`. Rounds
//!   count from 0; `epsilon` is empty for non-private runs.
//! * `summary.json`: initial and final loss, divergence statistics, privacy parameters,
//!   communication totals and the predicted per-round counts.
//! * `accountant.json`: RDP ledger (per order) of the most exposed client, or
//!   `{"private": .., "epsilon": null}` without noise.
//! * `costs.csv`: `schema_version, arch, method, rank, clients, client,
//!   upload_per_client, download_per_client, setup_per_client, server_receive,
//!   server_send, reported, reported_millions, measured_upload,
//!   measured_download`. Measured columns are totals over the run.
//! * `global_adapter.bin`: final global adapters in the wire layout.
//!
//! `sweep` writes `sweep.csv` (`schema_version, method, rank, seed, final_loss,
//! max_divergence, mean_divergence, epsilon, upload_total, download_total,
//! reported`) plus one `run` directory per member.
//!
//! Nothing is written when validation or the run itself fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedsb::adapters::Method;
use fedsb::commcost::{cost_per_round, millions_2dp, ArchCatalog, CostBreakdown};
use fedsb::config::ExperimentConfig;
use fedsb::fedsim::{run_federation, FederationConfig, PrivacyConfig};
use fedsb::report::{costs_csv, sweep_csv, sweep_member_dir, RunArtifacts};
use fedsb::verify::{run_suite, Fault};

#[derive(Debug, Parser)]
#[command(name = "fedsb", version, about = "Federated fine-tuning simulator with exact aggregation and DP accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one federation from a config file.
    Run(RunArgs),
    /// Run every member of the config's sweep grid.
    Sweep(RunArgs),
    /// Print per-round communication counts for an architecture.
    Cost(CostArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `[output] dir` or `results/<method>-r<rank>-s<seed>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    rank: Option<usize>,
    /// Target epsilon; the noise multiplier is calibrated to meet it.
    #[arg(long, conflicts_with = "sigma")]
    epsilon: Option<f64>,
    /// Noise multiplier.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Per-sample clipping norm.
    #[arg(long)]
    clip: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut FederationConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(clients) = self.clients {
            cfg.clients = clients;
        }
        if let Some(method) = self.method {
            cfg.method = method;
            if method != Method::FedSb {
                cfg.client_ranks = None;
            }
        }
        if let Some(rank) = self.rank {
            cfg.rank = rank;
        }
        let touches_privacy = self.epsilon.is_some() || self.sigma.is_some() || self.delta.is_some() || self.clip.is_some();
        if !touches_privacy {
            return Ok(());
        }
        let mut p = match cfg.privacy.take() {
            Some(p) => p,
            None if self.epsilon.is_some() || self.sigma.is_some() => PrivacyConfig {
                clip_norm: 1.0,
                sigma: None,
                epsilon: None,
                delta: 1e-5,
            },
            None => bail!("--clip and --delta need --sigma or --epsilon (or a [privacy] section)"),
        };
        if let Some(s) = self.sigma {
            p.sigma = Some(s);
            p.epsilon = None;
        }
        if let Some(e) = self.epsilon {
            p.epsilon = Some(e);
            p.sigma = None;
        }
        if let Some(d) = self.delta {
            p.delta = d;
        }
        if let Some(c) = self.clip {
            p.clip_norm = c;
        }
        cfg.privacy = Some(p);
        Ok(())
    }
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Built-in catalog name or path to a catalog file.
    arch: String,
    /// Method, or `all` for every method.
    #[arg(default_value = "all")]
    method: String,
    /// Adapter rank.
    #[arg(default_value_t = 32)]
    rank: u64,
    #[arg(long, default_value_t = 25)]
    clients: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut exp = ExperimentConfig::load(&args.config)?;
    args.overrides.apply(&mut exp.federation)?;
    exp.validate().with_context(|| format!("invalid config {}", args.config.display()))?;
    Ok(exp)
}

fn out_dir(args: &RunArgs, exp: &ExperimentConfig) -> PathBuf {
    args.out_dir
        .clone()
        .or_else(|| exp.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("results").join(sweep_member_dir(&exp.federation)))
}

fn render(exp: &ExperimentConfig, cfg: &FederationConfig) -> Result<(RunArtifacts, fedsb::fedsim::FederationOutcome)> {
    let member = ExperimentConfig {
        federation: cfg.clone(),
        output: exp.output.clone(),
        sweep: None,
    };
    let outcome = run_federation(cfg).with_context(|| format!("run {} failed", sweep_member_dir(cfg)))?;
    let artifacts = RunArtifacts::render(cfg, &member.to_toml()?, &outcome)?;
    Ok((artifacts, outcome))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut exp = load(args)?;
    exp.sweep = None;
    let dir = out_dir(args, &exp);
    let (artifacts, outcome) = render(&exp, &exp.federation)?;
    artifacts.write(&dir)?;
    let eps = outcome.epsilon().map_or("none".to_string(), |e| format!("{e:.4}"));
    println!(
        "{} r={} c={} rounds={}: final loss {:.6e}, max divergence {:.3e}, epsilon {eps}",
        exp.federation.method,
        exp.federation.rank,
        exp.federation.clients,
        exp.federation.rounds,
        outcome.final_loss(),
        outcome.max_divergence(),
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let exp = load(args)?;
    let dir = args
        .out_dir
        .clone()
        .or_else(|| exp.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results/sweep"));
    let mut members = Vec::new();
    let mut runs = Vec::new();
    for cfg in exp.sweep_configs() {
        let (artifacts, outcome) = render(&exp, &cfg)?;
        members.push((sweep_member_dir(&cfg), artifacts));
        runs.push((cfg, outcome));
    }
    let table = sweep_csv(&runs)?;
    for (name, artifacts) in &members {
        artifacts.write(&dir.join(name))?;
    }
    let path = dir.join("sweep.csv");
    std::fs::write(&path, table).with_context(|| format!("cannot write {}", path.display()))?;
    for (cfg, out) in &runs {
        println!(
            "{:<28} final loss {:.6e}  max divergence {:.3e}",
            sweep_member_dir(cfg),
            out.final_loss(),
            out.max_divergence()
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_cost(args: &CostArgs) -> Result<()> {
    let arch = ArchCatalog::resolve(&args.arch)?;
    let methods: Vec<Method> = if args.method.eq_ignore_ascii_case("all") {
        Method::ALL.to_vec()
    } else {
        vec![args.method.parse()?]
    };
    let rows: Vec<CostBreakdown> = methods
        .iter()
        .map(|&m| cost_per_round(&arch, m, args.rank, args.clients))
        .collect::<Result<_, _>>()?;
    println!(
        "{:<11} {:>5} {:>16} {:>16} {:>16} {:>14}",
        "method", "rank", "upload/client", "download/client", "setup/client", "comm (M)"
    );
    for b in &rows {
        println!(
            "{:<11} {:>5} {:>16} {:>16} {:>16} {:>14}",
            b.method.label(),
            b.rank,
            b.upload_per_client,
            b.download_per_client,
            b.setup_per_client,
            millions_2dp(b.reported)
        );
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, costs_csv(&rows)?).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> ExitCode {
    let report = run_suite(args.inject_fault);
    for check in &report.checks {
        println!("{check}");
    }
    if report.passed() {
        println!("all {} invariants hold", report.checks.len());
        ExitCode::SUCCESS
    } else {
        eprintln!("failed invariants: {}", report.failures().join(", "));
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Cost(args) => cmd_cost(args),
        Command::Verify(args) => return cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

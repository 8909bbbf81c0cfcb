use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use lottery_iv::bootstrap::BootstrapConfig;
use lottery_iv::dgp::DgpConfig;
use lottery_iv::report::{run, InputSource, ReportError, RunConfig, Stage};
use lottery_iv::{CovariateMode, Subgroup, TrimRule, Weighting};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Covariates {
    Year,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SubgroupArg {
    All,
    Commuter,
    NonCommuter,
}

/// IPW estimation of lottery-instrumented residence effects.
///
/// Reads lottery and employment extracts (or simulates them), estimates
/// LATE, first stage and ITT with a probit propensity score, and writes
/// report.json, tables.txt, periods.csv and balance.csv.
#[derive(Debug, Parser)]
#[command(name = "lottery-iv", version)]
struct Cli {
    /// Lottery applications CSV.
    #[arg(long, requires = "employment_csv", conflicts_with = "dgp_config")]
    lottery_csv: Option<PathBuf>,

    /// Employment and residence CSV.
    #[arg(long, requires = "lottery_csv")]
    employment_csv: Option<PathBuf>,

    /// DGP config file (TOML), or one of the presets `default`,
    /// `paper-shaped`, `heterogeneity`.
    #[arg(long)]
    dgp_config: Option<String>,

    /// Seed for the simulation and the bootstrap.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, value_enum, default_value = "year")]
    covariates: Covariates,

    /// Which lottery participation anchors the sample.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    participation: u8,

    #[arg(long, value_enum, default_value = "all")]
    subgroup: SubgroupArg,

    /// Normalize IPW weights within instrument groups.
    #[arg(long, value_enum, default_value = "on")]
    normalize: Switch,

    /// Propensity trimming bounds.
    #[arg(long, default_value = "0.05,0.95", value_name = "LO,HI")]
    trim: TrimRule,

    /// Bootstrap replications (0 skips inference).
    #[arg(long, default_value_t = 1999)]
    reps: usize,

    /// Worker threads for the bootstrap.
    #[arg(long)]
    threads: Option<usize>,

    /// Also write the simulated lottery.csv and employment.csv.
    #[arg(long)]
    write_synthetic: bool,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn dgp_config(spec: &str) -> Result<DgpConfig, ReportError> {
    match spec {
        "default" => Ok(DgpConfig::default()),
        "paper-shaped" => Ok(DgpConfig::paper_shaped()),
        "heterogeneity" => Ok(DgpConfig::heterogeneity()),
        path => DgpConfig::load(path).map_err(|e| ReportError::new(Stage::Config, e)),
    }
}

fn run_config(cli: Cli) -> Result<RunConfig, ReportError> {
    let input = match (cli.lottery_csv, cli.employment_csv, cli.dgp_config) {
        (Some(lottery), Some(employment), None) => InputSource::Files {
            lottery,
            employment,
        },
        (None, None, Some(spec)) => InputSource::Dgp {
            config: Box::new(dgp_config(&spec)?),
            seed: cli.seed,
        },
        _ => {
            return Err(ReportError::new(
                Stage::Config,
                "give either --lottery-csv with --employment-csv, or --dgp-config",
            ))
        }
    };
    let mut cfg = RunConfig::new(input, cli.out);
    cfg.participation = usize::from(cli.participation);
    cfg.subgroup = match cli.subgroup {
        SubgroupArg::All => Subgroup::All,
        SubgroupArg::Commuter => Subgroup::Commuter,
        SubgroupArg::NonCommuter => Subgroup::NonCommuter,
    };
    cfg.covariates = match cli.covariates {
        Covariates::Year => CovariateMode::YearDummiesOnly,
        Covariates::Full => CovariateMode::YearPlusDemographics,
    };
    cfg.weighting = match cli.normalize {
        Switch::On => Weighting::Normalized,
        Switch::Off => Weighting::Unnormalized,
    };
    cfg.trim = cli.trim;
    cfg.bootstrap = BootstrapConfig {
        replications: cli.reps,
        seed: cli.seed,
        threads: cli.threads,
        ..BootstrapConfig::default()
    };
    cfg.write_synthetic = cli.write_synthetic;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = run_config(cli).and_then(|cfg| run(&cfg).map(|r| (cfg, r)));
    match result {
        Ok((cfg, report)) => {
            log::info!(
                "{} participants, {} outcome rows; reports in {}",
                report.sample.n_participants,
                report.sample.n_rows,
                cfg.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

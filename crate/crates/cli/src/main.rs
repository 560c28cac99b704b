use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use strict_bounds::history::HmMode;
use strict_bounds::pipeline::{RunManifest, Runner, Stage, StageStatus};
use strict_bounds::{Error, Result};

/// Calibrate simulator parameters against observations with per-cell GP
/// emulators and an inverted chi-square test.
#[derive(Parser, Debug)]
#[command(name = "sbounds", version)]
struct Cli {
    /// Run manifest (JSON).
    #[arg(short, long, global = true, default_value = "manifest.json")]
    manifest: PathBuf,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Significance level of the tests.
    #[arg(long, global = true)]
    level: Option<f64>,

    /// Quantile level of the history-matching statistic (1 = maximum).
    #[arg(long, global = true)]
    q: Option<f64>,

    /// Outlier-filter tolerance gamma.
    #[arg(long, global = true)]
    gamma: Option<f64>,

    /// Outlier-filter threshold on the minimum standardized distance.
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Optimizer restarts per emulator.
    #[arg(long, global = true)]
    restarts: Option<usize>,

    /// Monte Carlo samples for history-matching critical values.
    #[arg(long = "mc-samples", global = true)]
    mc_samples: Option<usize>,

    /// Proceed even if upstream artifacts were made under another config.
    #[arg(long, global = true)]
    force: bool,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an example manifest for a synthetic problem.
    Init {
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        lat: usize,
        #[arg(long, default_value_t = 20)]
        lon: usize,
    },
    /// Generate a synthetic ensemble and observations.
    Synth,
    /// Match the simulator grid to the observation grid.
    Match,
    /// Fit one emulator per cell.
    Train,
    /// Evaluate the emulators at the test parameters.
    Predict,
    /// Exclude outlying cells.
    Filter,
    /// Estimate the discrepancy variance.
    Discrep,
    /// Run the plausibility test for every test parameter.
    Test,
    /// Build the confidence set and its projections.
    Invert,
    /// History-matching comparison test.
    Hm,
    /// Summarize the run.
    Report,
    /// Run every stage in order.
    Run,
}

fn apply_overrides(cli: &Cli, m: &mut RunManifest) -> Result<()> {
    if let Some(w) = cli.workers {
        m.workers = w;
    }
    if let Some(s) = cli.seed {
        m.seed = s;
    }
    if let Some(l) = cli.level {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::InvalidInput(format!("--level {l} outside (0, 1)")));
        }
        m.test.level = l;
        m.hm.level = l;
    }
    if let Some(q) = cli.q {
        m.hm.mode = HmMode::Quantile(q);
    }
    if let Some(g) = cli.gamma {
        m.filter.gamma = Some(g);
    }
    if let Some(t) = cli.threshold {
        m.filter.threshold = Some(t);
    }
    if let Some(r) = cli.restarts {
        m.train.restarts = r;
    }
    if let Some(n) = cli.mc_samples {
        m.hm.mc_samples = n;
    }
    Ok(())
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::Synth => Stage::Synth,
        Command::Match => Stage::Match,
        Command::Train => Stage::Train,
        Command::Predict => Stage::Predict,
        Command::Filter => Stage::Filter,
        Command::Discrep => Stage::Discrep,
        Command::Test => Stage::Test,
        Command::Invert => Stage::Invert,
        Command::Hm => Stage::Hm,
        Command::Report => Stage::Report,
        Command::Init { .. } | Command::Run => return None,
    })
}

fn print_report(m: &RunManifest) -> Result<()> {
    let p = m.stage_dir(Stage::Report).join("summary.txt");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?;
    print!("{text}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Init { dim, lat, lon } = cli.command {
        let mut m = RunManifest::synthetic_example(dim, lat, lon, cli.seed.unwrap_or(0));
        apply_overrides(cli, &mut m)?;
        m.save(&cli.manifest)?;
        println!("wrote {}", cli.manifest.display());
        return Ok(());
    }
    let mut m = RunManifest::load(&cli.manifest)?;
    apply_overrides(cli, &mut m)?;
    let runner = Runner::new(m, cli.force);
    match stage_of(&cli.command) {
        Some(stage) => {
            let status = runner.run_stage(stage)?;
            let word = match status {
                StageStatus::Ran => "done",
                StageStatus::UpToDate => "up to date",
            };
            println!("{}: {word}", stage.name());
            if stage == Stage::Report {
                print_report(&runner.manifest)?;
            }
        }
        None => {
            runner.run_all()?;
            print_report(&runner.manifest)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

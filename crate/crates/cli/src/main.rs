//! `condensate`: run experiments from a TOML config or built-in defaults.
//!
//! Values are taken from the defaults of the subcommand, then the `--config`
//! file, then the command-line flags; later sources win.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use condensate_core::harness::{render_aggregate_csv, render_json, write_outputs, OutputFormat};
use condensate_core::verify::{run_suite, VerifyOptions};
use condensate_core::{run, ExperimentConfig, ExperimentKind, HarnessError};

const EXIT_CONFIG: u8 = 1;
const EXIT_ACCEPTANCE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "condensate", version, about = "Inclusion-process condensation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the particle system and record observables on a grid.
    SimulateIp(Common),
    /// Solve the control ODE.
    SolveOde(Common),
    /// Simulate the multi-loci Wright-Fisher approximation.
    SimulateWf(Common),
    /// Draw Poisson-Dirichlet samples by stick-breaking.
    SamplePd(Common),
    /// Solve the moment hierarchy along the control trajectory.
    Moments(Common),
    /// Run the acceptance suite; exits with status 2 if any criterion fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Skip the second run that checks byte-identical output.
        #[arg(long)]
        skip_rerun: bool,
    },
    /// Mass curves from several initial masses, with closed forms and asymptotes.
    Figure2(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replicas (paths for simulate-wf, samples for sample-pd).
    #[arg(long)]
    replicas: Option<usize>,
    /// Output directory; without it results go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

fn effective_config(kind: ExperimentKind, common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match &common.config {
        Some(path) => {
            let config = ExperimentConfig::load(path)?;
            if config.kind != kind {
                return Err(HarnessError::Config(format!(
                    "{} holds a `{}` experiment, not `{}`",
                    path.display(),
                    config.kind.name(),
                    kind.name()
                )));
            }
            config
        }
        None => ExperimentConfig::template(kind),
    };
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if let Some(r) = common.replicas {
        if kind == ExperimentKind::PdSample {
            config.pd.samples = r;
        } else {
            config.replicas = r;
        }
    }
    if let Some(out) = &common.out {
        config.output = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn fail(err: HarnessError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn experiment(kind: ExperimentKind, common: &Common) -> ExitCode {
    let config = match effective_config(kind, common) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if common.print_config {
        print!("{}", config.to_toml());
        return ExitCode::SUCCESS;
    }
    let result = match run(&config) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    match &config.output {
        Some(dir) => match write_outputs(&result, dir, common.format.into()) {
            Ok(files) => {
                for f in files {
                    eprintln!("wrote {}", f.display());
                }
            }
            Err(e) => return fail(e),
        },
        None => {
            let text = match common.format {
                Format::Csv => render_aggregate_csv(&result),
                Format::Json => render_json(&result),
            };
            if std::io::stdout().write_all(text.as_bytes()).is_err() {
                return ExitCode::from(EXIT_RUNTIME);
            }
        }
    }
    ExitCode::SUCCESS
}

fn verify(common: &Common, skip_rerun: bool) -> ExitCode {
    let config = match effective_config(ExperimentKind::Verify, common) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if common.print_config {
        print!("{}", config.to_toml());
        return ExitCode::SUCCESS;
    }
    let opts = VerifyOptions {
        master_seed: config.master_seed,
        out_dir: config.output.clone(),
        check_reproducibility: !skip_rerun,
    };
    let report = match run_suite(&opts) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    for o in &report.outcomes {
        println!("{}", o.line());
    }
    for d in &report.diagnostics {
        println!("  note: {d}");
    }
    if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ACCEPTANCE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::SimulateIp(c) => experiment(ExperimentKind::IpSim, c),
        Command::SolveOde(c) => experiment(ExperimentKind::Ode, c),
        Command::SimulateWf(c) => experiment(ExperimentKind::Wf, c),
        Command::SamplePd(c) => experiment(ExperimentKind::PdSample, c),
        Command::Moments(c) => experiment(ExperimentKind::Moments, c),
        Command::Figure2(c) => experiment(ExperimentKind::Figure2, c),
        Command::Verify { common, skip_rerun } => verify(common, *skip_rerun),
    }
}

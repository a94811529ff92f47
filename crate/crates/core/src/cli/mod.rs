//! Command-line entry point: `run`, `gradcheck`, `compare` and `sample-dump`.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric
//! failure, 4 verification failure.

pub mod compare;
pub mod config;
pub mod gradcheck;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;

pub use compare::{compare_runs, CompareReport, RunRecord};
pub use config::{load_config, parse_config, RunConfig, Scale};
pub use gradcheck::{gradcheck, GradcheckReport, GRADCHECK_TOLERANCE};
pub use run::{run_experiment, sample_dump, RunOptions, RunOutcome, RunSummary, Timing};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "twoscale-ocp", version, about = "Two-scale PINNs for convection-dominated optimal control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train both networks and write histories, grids and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Reference CSV for the state, or a directory with y.csv and p.csv.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Compare analytic derivatives with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Merge the histories of two runs and report final errors and cost.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the initial collocation set of a configuration.
    SampleDump {
        #[command(flatten)]
        common: Common,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    if common.threads == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    if common.threads > 1 {
        // Fails harmlessly if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Run { common, reference, resume, quiet } => {
            let cfg = load(&common)?;
            let opts = RunOptions { out: common.out.clone(), reference, threads: common.threads, resume, quiet };
            let outcome = run_experiment(&cfg, &opts)?;
            let s = &outcome.summary;
            println!("wrote {}", outcome.dir.display());
            println!("final loss {:.6e}", s.final_loss.get("total").copied().unwrap_or(f64::NAN));
            for (name, v) in [("l1_y", s.l1_y), ("l1_p", s.l1_p), ("l1_u", s.l1_u)] {
                if let Some(v) = v {
                    println!("{name} {v:.6e}");
                }
            }
            println!("{:.3e} s/epoch ({} kernels)", outcome.timing.seconds_per_epoch, outcome.timing.kernels);
            Ok(EXIT_OK)
        }
        Command::Gradcheck { common, corrupt_gradient } => {
            let cfg = load(&common)?;
            let spec = cfg.problem(cfg.eps)?;
            let r = gradcheck(&cfg, &spec, corrupt_gradient)?;
            for (f, e) in &r.loss_gradient {
                println!("loss gradient ({f}): {e:.3e}");
            }
            println!("input gradient: {:.3e}", r.input_gradient);
            println!("input laplacian: {:.3e}", r.input_laplacian);
            println!("max relative error: {:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})", r.max_error());
            Ok(if r.passed() { EXIT_OK } else { EXIT_VERIFY })
        }
        Command::Compare { run_a, run_b, out } => {
            let report = compare_runs(&run_a, &run_b)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            report.write_csv(&dir.join("compare.csv"))?;
            let verdict = report.verdict();
            let path = dir.join("compare.txt");
            std::fs::write(&path, &verdict).map_err(|e| Error::io(&path, e))?;
            print!("{verdict}");
            Ok(EXIT_OK)
        }
        Command::SampleDump { common } => {
            let cfg = load(&common)?;
            let dir = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
            let set = sample_dump(&cfg, &dir)?;
            println!(
                "wrote {} interior and {} boundary points to {}",
                set.interior.len(),
                set.boundary.len(),
                dir.join("collocation.csv").display()
            );
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

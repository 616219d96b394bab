use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fnoflow::Error;
use fnoflow_cli::config::{resolve, Ablation};
use fnoflow_cli::{exit_code, pipeline};

#[derive(Parser)]
#[command(name = "fnoflow", version, about = "Physics-constrained flow matching for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.epochs=5`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Disable FNO guidance during training and sampling.
    #[arg(long, global = true)]
    no_guidance: bool,
    /// Replace every constraint schedule by the constant 1.
    #[arg(long, global = true)]
    flat_schedule: bool,
    /// Zero the base weight of a constraint level (1 to 4); may be repeated.
    #[arg(long, value_name = "LEVEL", global = true)]
    zero_lambda: Vec<usize>,
    /// Plain flow matching: no constraints, no consistency term, no guidance.
    #[arg(long, global = true)]
    baseline: bool,
    /// Do not echo the resolved configuration.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset.
    GenData,
    /// Train a model on the train split.
    Train {
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample one trajectory per test condition.
    Sample,
    /// Score samples against their references.
    Evaluate,
    /// Check the trajectory deviation bound against the analytic oracle.
    VerifyBounds,
    /// Search sample residuals for candidate laws.
    Discover,
}

fn run(cli: Cli) -> Result<(), Error> {
    let c = cli.common;
    let ablation = Ablation {
        no_guidance: c.no_guidance,
        flat_schedule: c.flat_schedule,
        zero_lambda: c.zero_lambda,
        baseline: c.baseline,
    };
    let cfg = resolve(c.config.as_deref(), &c.overrides, &ablation)?;
    if !c.quiet {
        println!("# resolved configuration\n{}", cfg.to_toml()?);
    }
    match cli.command {
        Command::GenData => {
            let ds = pipeline::gen_data(&cfg)?;
            println!("wrote {} trajectories of {} steps to {}", ds.len(), ds.t_len(), cfg.data_dir().display());
        }
        Command::Train { resume } => {
            let out = pipeline::train(&cfg, resume, |r| {
                eprintln!("epoch {:>4}  total {:.6}  cfm {:.6}  ({:.1}s)", r.epoch, r.total, r.cfm, r.wall_secs)
            })?;
            println!("wrote checkpoint {}", out.checkpoint.display());
        }
        Command::Sample => {
            let s = pipeline::sample(&cfg)?;
            println!("wrote {} samples to {}", s.generated.len(), cfg.samples_dir().display());
        }
        Command::Evaluate => {
            let r = pipeline::evaluate_samples(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
        Command::VerifyBounds => {
            let cert = pipeline::verify_bounds(&cfg)?;
            println!(
                "bound holds for {}/{} starts (L = {:.4}, eps_fno = {:.4e})",
                cert.starts_holding, cert.starts, cert.l_hat, cert.eps_fno
            );
        }
        Command::Discover => {
            let rep = pipeline::discover_laws(&cfg)?;
            println!("{} candidate laws", rep.laws.len());
            for l in rep.laws.iter().take(5) {
                println!(
                    "  level {}  holdout R2 {:.3}  {}{}",
                    l.level,
                    l.holdout_r2,
                    l.expression,
                    if l.validated { "" } else { "  (not validated)" }
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use arcplan_cli::commands::{
    phantom_gen, plan_compare, plan_eval, plan_run, plan_sequence, ControlArgs, PhantomGenArgs, PlanCompareArgs,
    PlanEvalArgs, PlanRunArgs, PlanSequenceArgs,
};
use arcplan_cli::report::Margins;
use arcplan_cli::service::{router, AppState};
use arcplan_cli::CliError;
use clap::{Args, Parser, Subcommand};

/// Dose-feedback arc planning on synthetic phantoms.
#[derive(Parser)]
#[command(name = "arcplan", version)]
struct Cli {
    /// Worker threads for the numerical stages (default: all cores)
    #[arg(long, global = true, env = "ARCPLAN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantoms
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Planning, sequencing, evaluation and comparison
    #[command(subcommand)]
    Plan(PlanCommand),
    /// HTTP replan service
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Write a phantom directory (phantom.json, ct.tensor, masks.tensor)
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Texture noise seed (overrides the config)
        #[arg(long)]
        seed: Option<u64>,
        /// Write an augmented variant drawn with this seed
        #[arg(long)]
        augment: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Controls {
    /// Bladder dose suppression fraction
    #[arg(long)]
    s_bladder: Option<f64>,
    /// Rectum dose suppression fraction
    #[arg(long)]
    s_rectum: Option<f64>,
    /// Feedback iterations
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Full pipeline: proposal, feedback iterations, sequencing, delivered dose
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Phantom directory
        #[arg(long)]
        phantom: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        controls: Controls,
    },
    /// Sequence a fluence tensor into a plan document
    Sequence {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fluence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric report of a plan document or dose tensor on a phantom
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        phantom: PathBuf,
        #[arg(long, conflicts_with = "dose", required_unless_present = "dose")]
        plan: Option<PathBuf>,
        #[arg(long)]
        dose: Option<PathBuf>,
        /// Case label written on every report line
        #[arg(long, default_value = "case")]
        case: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write a structure,metric,value CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Paired non-inferiority of a candidate report against a reference report
    Compare {
        candidate: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        margin_hi: f64,
        #[arg(long, default_value_t = 1.5)]
        margin_gy: f64,
        #[arg(long, default_value_t = 0.05)]
        margin_ci: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "ARCPLAN_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory of static UI assets served under `/`
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn serve(args: ServeArgs) -> Result<String, CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Config(format!("tokio runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .map_err(|e| CliError::Config(format!("cannot bind {}: {e}", args.bind)))?;
        eprintln!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
        let app = router(Arc::new(AppState::default()), args.static_dir);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Config(format!("server error: {e}")))?;
        Ok(String::new())
    })
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::Phantom(PhantomCommand::Gen { config, seed, augment, out }) => {
            phantom_gen(&PhantomGenArgs { config, seed, augment, out })
        }
        Command::Plan(PlanCommand::Run { config, phantom, out, controls }) => plan_run(&PlanRunArgs {
            config,
            phantom,
            out,
            controls: ControlArgs { s_bladder: controls.s_bladder, s_rectum: controls.s_rectum, iters: controls.iters },
        }),
        Command::Plan(PlanCommand::Sequence { config, fluence, out }) => {
            plan_sequence(&PlanSequenceArgs { config, fluence, out })
        }
        Command::Plan(PlanCommand::Eval { config, phantom, plan, dose, case, out, csv }) => {
            plan_eval(&PlanEvalArgs { config, phantom, plan, dose, case, out, csv })
        }
        Command::Plan(PlanCommand::Compare { candidate, reference, margin_hi, margin_gy, margin_ci, csv }) => {
            plan_compare(&PlanCompareArgs {
                candidate,
                reference,
                margins: Margins { hi: margin_hi, gy: margin_gy, ci: margin_ci },
                csv,
            })
        }
        Command::Serve(args) => serve(args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}

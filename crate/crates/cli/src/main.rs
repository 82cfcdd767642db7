use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "hympc",
    version,
    about = "Local MPCC solvers, sensitivity analysis and hybrid MPC experiments"
)]
struct Cli {
    /// Directory for CSV/JSON artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
pub struct SolveFlags {
    /// `exact` or `gauss-newton`.
    #[arg(long, default_value = "exact")]
    pub hessian: String,
    /// `auto` (SQPCC, smoothing fallback), `sqpcc` or `scholtes`.
    #[arg(long, default_value = "auto")]
    pub solver: String,
    /// Primal starting point, e.g. `0,1` (missing entries are zero).
    #[arg(long, allow_hyphen_values = true)]
    pub z0: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List the built-in problems.
    List,
    /// Print a built-in problem in the JSON problem format.
    Export { problem: String },
    /// Solve an MPCC at a fixed parameter and report stationarity.
    Solve {
        /// Built-in name or path to a problem JSON file.
        problem: String,
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// Track the solution map over a scalar parameter range with QPCC steps.
    Follow {
        problem: String,
        #[arg(allow_hyphen_values = true)]
        x_start: f64,
        #[arg(allow_hyphen_values = true)]
        x_end: f64,
        dx: f64,
        #[arg(long, default_value_t = 1)]
        inner_iters: usize,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// Compare QPCC, branch QP and full-solve predictions around `x_bar`.
    Predict {
        problem: String,
        #[arg(allow_hyphen_values = true)]
        x_bar: f64,
        #[arg(allow_hyphen_values = true)]
        x_start: f64,
        #[arg(allow_hyphen_values = true)]
        x_end: f64,
        dx: f64,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// Locate a jump of the solution map on the segment from `x_a` to `x_b`.
    Jump {
        problem: String,
        #[arg(allow_hyphen_values = true)]
        x_a: String,
        #[arg(allow_hyphen_values = true)]
        x_b: String,
        /// Tracking steps over the segment.
        #[arg(long, default_value_t = 40)]
        grid: usize,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// One-sided directional derivative of the solution map.
    Deriv {
        problem: String,
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[arg(long, allow_hyphen_values = true)]
        v: String,
        /// Probe length (default 1e-4 max(1, |x|)).
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// Closed-loop friction demo from a scenario file.
    Mpc {
        scenario: PathBuf,
        /// Comma-separated: hyrti, hyasc, hyasc-qp, hyasrti, converged, smoothed.
        #[arg(long, default_value = "hyrti")]
        scheme: String,
        /// Preparation iterations of HyAS-RTI.
        #[arg(long = "N_as", alias = "n-as", default_value_t = 2)]
        n_as: usize,
        /// Smoothing parameter of the smoothed controller.
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        /// Also run the converged controller, log plan errors against it and
        /// write a Pareto summary.
        #[arg(long)]
        oracle: bool,
        /// Independent runs in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out;
    let res = match cli.cmd {
        Command::List => commands::list(),
        Command::Export { problem } => commands::export(&problem),
        Command::Solve { problem, x, flags } => {
            commands::solve(&problem, &x, &flags, out.as_deref())
        }
        Command::Follow {
            problem,
            x_start,
            x_end,
            dx,
            inner_iters,
            flags,
        } => commands::follow(
            &problem,
            x_start,
            x_end,
            dx,
            inner_iters,
            &flags,
            &out_dir(out),
        ),
        Command::Predict {
            problem,
            x_bar,
            x_start,
            x_end,
            dx,
            flags,
        } => commands::predict(&problem, x_bar, x_start, x_end, dx, &flags, &out_dir(out)),
        Command::Jump {
            problem,
            x_a,
            x_b,
            grid,
            flags,
        } => commands::jump(&problem, &x_a, &x_b, grid, &flags, out.as_deref()),
        Command::Deriv {
            problem,
            x,
            v,
            tau,
            flags,
        } => commands::deriv(&problem, &x, &v, tau, &flags, out.as_deref()),
        Command::Mpc {
            scenario,
            scheme,
            n_as,
            tau,
            oracle,
            jobs,
        } => commands::mpc(&scenario, &scheme, n_as, tau, oracle, jobs, &out_dir(out)),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("hympc-out"))
}

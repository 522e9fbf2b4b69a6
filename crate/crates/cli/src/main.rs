use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use soc_verify_core::registry::{self, NAMES};
use soc_verify_core::{
    full_report, integrate_state, ConditionReport, Error, Grid, ProblemDef, ReportOptions, Stage, SufficiencyMode,
    Trajectory,
};

const EXIT_USAGE: u8 = 3;
const EXIT_BLOCKED: u8 = 2;

#[derive(Parser)]
#[command(name = "soc-verify", version, about = "Check optimality conditions for singular control candidates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the selected stages and print a report.
    Check(CheckArgs),
    /// List the built-in problems.
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Simulate,
    Multipliers,
    CheckPointwise,
    CheckNecessary,
    CheckSufficient,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SufMode {
    Subspace,
    Cone,
}

#[derive(clap::Args)]
struct CheckArgs {
    /// Built-in problem name or path to a problem JSON file.
    #[arg(long)]
    problem: String,
    /// Candidate trajectory CSV (`t,x..,u..,v..`).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Grid intervals for the reference trajectory.
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    /// Horizon override for built-in problems.
    #[arg(long = "T")]
    horizon: Option<f64>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Tolerance for dynamics defects and endpoint constraints.
    #[arg(long, default_value_t = 1e-6)]
    feas_tol: f64,
    /// Inequalities with |phi| below this are active.
    #[arg(long, default_value_t = 1e-6)]
    active_tol: f64,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    mode: Mode,
    /// How inequality rows enter the sufficiency check.
    #[arg(long, value_enum, default_value_t = SufMode::Subspace)]
    sufficiency: SufMode,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write CSV series (trajectory, multipliers, witnesses) to this directory.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print the JSON report instead of the text summary.
    #[arg(long)]
    json: bool,
}

enum Failure {
    Usage(String),
    Blocked(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) | Error::Diverged { .. } => Failure::Blocked(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn load(args: &CheckArgs) -> Result<(String, ProblemDef, Trajectory), Failure> {
    if args.grid < 2 {
        return Err(Failure::Usage(format!("--grid must be at least 2, got {}", args.grid)));
    }
    for (name, v) in [("--tol", args.tol), ("--feas-tol", args.feas_tol), ("--active-tol", args.active_tol)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Failure::Usage(format!("{name} must be a positive number, got {v}")));
        }
    }
    let path = Path::new(&args.problem);
    let (name, p, reference) = if NAMES.contains(&args.problem.as_str()) {
        let (p, tr) = registry::registry(&args.problem, args.horizon, args.grid)?;
        (args.problem.clone(), p, tr)
    } else if path.is_file() {
        if args.horizon.is_some() {
            return Err(Failure::Usage("--T only applies to built-in problems".into()));
        }
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let p = ProblemDef::from_json(&text)?;
        let grid = Grid::new(args.grid, p.horizon())?;
        let zeros = Trajectory::zeros(grid, p.n(), p.l(), p.m());
        let tr = integrate_state(&p, &zeros.x[0], &zeros.u, &zeros.v, grid)?;
        (path.display().to_string(), p, tr)
    } else {
        return Err(Failure::Usage(format!(
            "`{}` is neither a built-in problem nor a readable file; built-in: {}",
            args.problem,
            NAMES.join(", ")
        )));
    };
    let traj = match &args.trajectory {
        Some(tp) => {
            let f = File::open(tp).map_err(|e| io_err(tp, e))?;
            let tr = Trajectory::read_csv(f, p.n(), p.l(), p.m())?;
            if (tr.grid.horizon() - p.horizon()).abs() > 1e-9 * p.horizon().max(1.0) {
                return Err(Failure::Usage(format!(
                    "trajectory ends at t = {}, problem horizon is {}",
                    tr.grid.horizon(),
                    p.horizon()
                )));
            }
            tr
        }
        None => reference,
    };
    Ok((name, p, traj))
}

fn write_csvs(dir: &Path, traj: &Trajectory, report: &ConditionReport) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let create = |name: &str| -> Result<BufWriter<File>, Failure> {
        let p = dir.join(name);
        File::create(&p).map(BufWriter::new).map_err(|e| io_err(&p, e))
    };
    traj.write_csv(create("trajectory.csv")?)?;
    for (i, lam) in report.artifacts.multipliers.iter().enumerate() {
        lam.write(
            &traj.grid,
            create(&format!("multiplier_{i}.csv"))?,
            create(&format!("multiplier_{i}.json"))?,
        )?;
    }
    if let Some(d) = &report.artifacts.necessity_witness {
        d.write_csv(&traj.grid, create("necessity_witness.csv")?)?;
    }
    if let Some(d) = &report.artifacts.sufficiency_worst {
        d.write_csv(&traj.grid, create("sufficiency_worst.csv")?)?;
    }
    Ok(())
}

fn check(args: &CheckArgs) -> Result<u8, Failure> {
    let (name, p, traj) = load(args)?;
    let stage = match args.mode {
        Mode::Simulate => Stage::Simulate,
        Mode::Multipliers => Stage::Multipliers,
        Mode::CheckPointwise => Stage::CheckPointwise,
        Mode::CheckNecessary => Stage::CheckNecessary,
        Mode::CheckSufficient => Stage::CheckSufficient,
        Mode::Full => Stage::Full,
    };
    let opts = ReportOptions {
        problem_name: name,
        stage,
        tol: args.tol,
        feas_tol: args.feas_tol,
        active_tol: args.active_tol,
        samples: args.samples,
        seed: args.seed,
        sufficiency_mode: match args.sufficiency {
            SufMode::Subspace => SufficiencyMode::Subspace,
            SufMode::Cone => SufficiencyMode::Cone,
        },
    };
    let report = full_report(&p, &traj, &opts)?;
    let json = report.to_json()?;
    if let Some(out) = &args.out {
        fs::write(out, format!("{json}\n")).map_err(|e| io_err(out, e))?;
    }
    if let Some(dir) = &args.csv {
        write_csvs(dir, &traj, &report)?;
    }
    if args.json {
        println!("{json}");
    } else {
        print!("{}", report.render_text());
    }
    Ok(report.exit_code() as u8)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SOC_VERIFY_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("SOC_VERIFY_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run() -> Result<u8, Failure> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return Ok(code);
        }
    };
    configure_threads()?;
    match cli.command {
        Command::List => {
            for n in NAMES {
                println!("{n}");
            }
            Ok(0)
        }
        Command::Check(args) => check(&args),
    }
}

fn main() -> ExitCode {
    match std::panic::catch_unwind(run) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(Failure::Usage(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Ok(Err(Failure::Blocked(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_BLOCKED)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(EXIT_BLOCKED)
        }
    }
}

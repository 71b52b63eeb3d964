use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cellfit::forward::Control;
use cellfit::ingest::make_initial_control;
use cellfit::io::{analyze_run, observation_name, snapshot_name, write_cost_history, write_field, write_report, write_run_outputs, RunConfig};
use cellfit::optimize::run_tracking_with;
use cellfit::verify::{fd_gradient_oracle, gradcheck_problem, random_control, write_reports_csv};
use cellfit::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "cellfit", version, about = "Fit a phase-field model to cell shape snapshots by optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the initial and observed fields of a configured problem.
    Synth {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the optimal-control fit and write its reports.
    Track {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Log every n-th iteration.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Recompute area and centroid series from a run directory.
    Analyze {
        run_dir: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare the adjoint gradient with central finite differences.
    Gradcheck {
        /// Cells per axis.
        #[arg(long, default_value_t = 8)]
        cells: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        directions: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Check at a random control instead of zero.
        #[arg(long)]
        random_control: bool,
        /// Write the oracle report as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn exit_for(e: &Error) -> ExitCode {
    if e.is_solver_failure() {
        ExitCode::from(EXIT_SOLVER)
    } else {
        ExitCode::from(EXIT_CONFIG)
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    exit_for(&e)
}

fn load(config: &Path, output: Option<PathBuf>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(dir) = output {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn synth(config: &Path, output: Option<PathBuf>) -> Result<(), Error> {
    let cfg = load(config, output)?;
    let problem = cfg.problem()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let p = &problem.params;
    write_field(&dir.join(snapshot_name(0)), &problem.mesh, &problem.phi0, p.epsilon, 0.0)?;
    for o in &problem.observations {
        write_field(&dir.join(observation_name(o.step)), &problem.mesh, &o.field, p.epsilon, p.time(o.step))?;
    }
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    println!("wrote {} fields to {}", 1 + problem.observations.len(), dir.display());
    Ok(())
}

fn track(config: &Path, output: Option<PathBuf>, log_every: usize) -> ExitCode {
    let cfg = match load(config, output) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let problem = match cfg.problem() {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let opt = cfg.optimization();
    let initial: Control = match make_initial_control(&problem, cfg.initial_control, opt.cg, opt.multiplier) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    log::info!(
        "{} vertices, {} steps, constraint {}",
        problem.mesh.num_vertices(),
        problem.params.steps,
        if problem.constrained { "on" } else { "off" }
    );
    let every = log_every.max(1);
    let result = run_tracking_with(&problem, &opt, initial, |r| {
        if r.iteration % every == 0 {
            log::info!(
                "iter {:5}  J {:.6e}  fidelity {:.6e}  update {:.3e}  ({:.1}s)",
                r.iteration,
                r.cost,
                r.fidelity,
                r.update_norm,
                r.wall_seconds
            );
        }
    });
    let dir = &cfg.output_dir;
    match result {
        Ok(out) => {
            if let Err(e) = write_run_outputs(dir, &cfg, &problem, &out.control, &out.trajectory, &out.report) {
                return fail(e);
            }
            let last = out.report.last().expect("at least one iteration");
            println!(
                "{} iterations, J = {:.6e}, termination: {}",
                out.report.records.len(),
                last.cost,
                out.report.termination.expect("set on success")
            );
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {failure}");
            let partial = std::fs::create_dir_all(dir)
                .map_err(Error::from)
                .and_then(|_| write_cost_history(&dir.join("cost_history.csv"), &failure.report))
                .and_then(|_| write_report(&dir.join("report.txt"), &problem, &failure.report));
            if let Err(e) = partial {
                eprintln!("error: could not write partial report: {e}");
            }
            exit_for(&failure.error)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    cells: usize,
    steps: usize,
    directions: usize,
    tolerance: f64,
    seed: u64,
    random: bool,
    report: Option<PathBuf>,
) -> ExitCode {
    let run = || -> Result<_, Error> {
        let problem = gradcheck_problem(cells, steps)?;
        let control = if random {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            random_control(&problem.mesh, problem.params.steps, 1.0, &mut rng)
        } else {
            Control::zeros(&problem.mesh, problem.params.steps)
        };
        fd_gradient_oracle(&problem, &control, directions, &[1e-4, 1e-5], tolerance, seed)
    };
    let check = match run() {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    for (h, err) in &check.per_step {
        println!("h = {h:e}: max relative error {err:.3e}");
    }
    println!("max relative error {:.3e} (tolerance {:e})", check.report.max_rel_error, tolerance);
    if let Some(path) = report {
        if let Err(e) = write_reports_csv(&path, std::slice::from_ref(&check.report)) {
            return fail(e);
        }
    }
    if check.report.passed {
        ExitCode::SUCCESS
    } else {
        println!("gradient check FAILED");
        ExitCode::from(EXIT_GRADCHECK)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Synth { config, output } => match synth(&config, output) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::Track {
            config,
            output,
            log_every,
        } => track(&config, output, log_every),
        Command::Analyze { run_dir, output } => {
            let out = output.unwrap_or_else(|| run_dir.clone());
            match analyze_run(&run_dir, &out) {
                Ok(stats) => {
                    println!("analyzed {} snapshots into {}", stats.len(), out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Gradcheck {
            cells,
            steps,
            directions,
            tolerance,
            seed,
            random_control,
            report,
        } => gradcheck(cells, steps, directions, tolerance, seed, random_control, report),
    }
}

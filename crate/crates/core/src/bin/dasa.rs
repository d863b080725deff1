use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dasa::delay::{delay_stats, generate_schedule, DelayModel};
use dasa::experiment::{run_experiment, ExperimentSpec};
use dasa::sim::calibrate_step_sizes;
use dasa::td::ProblemSnapshot;
use dasa::verify::{self, Suite};
use dasa::{Error, ExecMode, Result};

#[derive(Parser)]
#[command(name = "dasa", version, about = "Delay-adaptive distributed stochastic approximation")]
struct Cli {
    /// Master seed; overrides the seeds in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (directory for `run`, file for the other commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write traces plus a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a verification suite.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
        /// Rerun cases from a failure dump instead of generating new ones.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Print problem constants and calibrated step sizes as JSON.
    Stepsize {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        c1: f64,
        #[arg(long)]
        tau_max: Option<usize>,
    },
    /// Materialise a delay schedule as CSV.
    ScheduleGen {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        tau_max: usize,
        /// Straggler probability.
        #[arg(long, default_value_t = 0.1)]
        probability: f64,
        #[arg(long)]
        agents: usize,
        #[arg(long)]
        horizon: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Lemma1,
    Assumptions,
    Mixing,
    Oracle,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Lemma1 => Suite::Lemma1,
            SuiteArg::Assumptions => Suite::Assumptions,
            SuiteArg::Mixing => Suite::Mixing,
            SuiteArg::Oracle => Suite::Oracle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Constant,
    Uniform,
    Straggler,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn exec_mode(jobs: Option<usize>) -> Result<ExecMode> {
    match jobs {
        Some(0) => Err(Error::Config {
            key: "--jobs".into(),
            message: "must be at least 1".into(),
        }),
        Some(1) => Ok(ExecMode::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            // A second initialisation in the same process is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(ExecMode::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(ExecMode::Sequential),
        None => Ok(ExecMode::default()),
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    let mode = exec_mode(cli.jobs)?;
    match &cli.command {
        Command::Run { config } => cmd_run(config, cli.seed, cli.out.as_deref(), mode),
        Command::Verify { suite, replay } => {
            cmd_verify((*suite).into(), replay.as_deref(), cli.seed, cli.out.as_deref(), mode)
        }
        Command::Stepsize {
            snapshot,
            config,
            c1,
            tau_max,
        } => cmd_stepsize(snapshot.as_deref(), config.as_deref(), *c1, *tau_max, cli.out.as_deref()),
        Command::ScheduleGen {
            kind,
            tau_max,
            probability,
            agents,
            horizon,
        } => {
            let model = match kind {
                KindArg::Constant => DelayModel::Constant { delay: *tau_max },
                KindArg::Uniform => DelayModel::Uniform { tau_max: *tau_max },
                KindArg::Straggler => DelayModel::Straggler {
                    probability: *probability,
                    tau_max: *tau_max,
                },
            };
            cmd_schedule_gen(&model, *agents, *horizon, cli.seed.unwrap_or(0), cli.out.as_deref())
        }
    }
}

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<&Path>, mode: ExecMode) -> Result<u8> {
    let mut spec = ExperimentSpec::load(config).map_err(|e| match e {
        Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => Error::Config {
            key: "--config".into(),
            message: format!("{} not found", path.display()),
        },
        other => other,
    })?;
    if let Some(s) = seed {
        spec.seeds.master = Some(s);
        spec.seeds.chain = None;
        spec.seeds.delay = None;
    }
    if let Some(dir) = out {
        spec.output_dir = dir.to_path_buf();
    }
    let result = run_experiment(&spec, mode)?;
    for p in &result.points {
        let s = &p.trace().summary;
        println!(
            "{:<28} alpha {:.4e}  final δ² {:.4e} ± {:.2e}  updates {} / {} iterations",
            p.point.id, p.config.alpha, p.run.final_mean, p.run.final_stderr, s.update_count, s.iterations
        );
    }
    let written = result.write(&spec.output_dir)?;
    println!("wrote {} files to {}", written.len(), spec.output_dir.display());
    Ok(0)
}

fn cmd_verify(
    suite: Suite,
    replay: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    mode: ExecMode,
) -> Result<u8> {
    let report = match replay {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            verify::SuiteReport {
                suite,
                seed: seed.unwrap_or(0),
                outcomes: verify::replay_json(&text)?,
            }
        }
        None => verify::run_suite(suite, seed.unwrap_or(0), mode)?,
    };
    for o in report.failures() {
        println!("FAIL {}", o.detail);
    }
    let failed = report.failures().count();
    println!(
        "{} {}: {}/{} cases passed",
        if failed == 0 { "PASS" } else { "FAIL" },
        suite,
        report.outcomes.len() - failed,
        report.outcomes.len()
    );
    if failed == 0 {
        return Ok(0);
    }
    let dump = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("verify-{suite}-failures.json")));
    write_file(&dump, &report.failures_json())?;
    println!("failing cases written to {}", dump.display());
    Ok(dasa::error::EXIT_INVARIANT as u8)
}

fn cmd_stepsize(
    snapshot: Option<&Path>,
    config: Option<&Path>,
    c1: f64,
    tau_max: Option<usize>,
    out: Option<&Path>,
) -> Result<u8> {
    let (problem, default_tau) = match (snapshot, config) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            (ProblemSnapshot::from_json(&text)?.restore()?, None)
        }
        (None, Some(path)) => {
            let spec = ExperimentSpec::load(path)?;
            (spec.problem.build()?, spec.delay.max_delay())
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let tau_max = tau_max.or(default_tau).unwrap_or(0);
    let report = calibrate_step_sizes(&problem, c1, tau_max).map_err(|e| match e {
        Error::InvalidInput(message) => Error::Config {
            key: "--c1".into(),
            message,
        },
        other => other,
    })?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    match out {
        Some(path) => write_file(path, &json)?,
        None => print!("{json}"),
    }
    Ok(0)
}

fn cmd_schedule_gen(
    model: &DelayModel,
    agents: usize,
    horizon: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<u8> {
    let schedule = generate_schedule(model, agents, horizon, seed)?;
    match out {
        Some(path) => {
            schedule.save(path)?;
            let stats = delay_stats(&schedule);
            eprintln!(
                "{}: {agents} agents × {horizon} iterations, tau_avg {:.3}, tau_max {}",
                model.label(),
                stats.tau_avg,
                stats.tau_max_observed
            );
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(schedule.to_csv_string().as_bytes());
        }
    }
    Ok(0)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

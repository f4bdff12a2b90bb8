use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use procua::commands::{self, EvalOptions, GenTasksOptions, TrainOptions};
use procua::pipeline::Method;
use procua::synthweb::DEFAULT_STUCK_RATE;
use procua::Error;

/// Step-level RL for computer-use agents on a synthetic web environment.
#[derive(Parser)]
#[command(name = "procua", version)]
struct Cli {
    /// Worker threads for rollouts and grading (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a validated task-suite file.
    GenTasks(GenTasksArgs),
    /// Run an experiment and write its manifest, metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily on a task suite.
    Eval(EvalArgs),
    /// Join finished runs into plot-ready tables.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenTasksArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 20)]
    pages: usize,
    #[arg(long, default_value_t = 3)]
    branching: usize,
    #[arg(long, default_value_t = DEFAULT_STUCK_RATE)]
    stuck_rate: f64,
    /// Task id prefix.
    #[arg(long, default_value = "task")]
    prefix: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set learning_rate=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    method: Option<Method>,
    /// Output directory.
    #[arg(long, required_unless_present = "print_default_config")]
    out: Option<PathBuf>,
    /// Also store each iteration's raw trajectories.
    #[arg(long)]
    save_trajectories: bool,
    /// Print the default config and exit.
    #[arg(long)]
    print_default_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task-suite file from gen-tasks.
    #[arg(long, conflicts_with = "config")]
    suite: Option<PathBuf>,
    /// Use the eval suite described by this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u32>,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run manifests (or run directories) to join.
    #[arg(required = true, num_args = 2..)]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 3,
        Error::Io { .. } => 4,
        Error::InvalidParams(_) => 5,
        Error::SuiteMismatch(_) => 6,
        _ => 1,
    }
}

fn run(cli: Cli) -> procua::Result<()> {
    match cli.command {
        Command::GenTasks(a) => {
            let s = commands::cmd_gen_tasks(&GenTasksOptions {
                seed: a.seed,
                count: a.count,
                pages: a.pages,
                branching: a.branching,
                stuck_rate: a.stuck_rate,
                prefix: a.prefix,
                out: a.out.clone(),
            })?;
            let kinds: Vec<String> = s.by_kind.iter().map(|(k, n)| format!("{k}={n}")).collect();
            println!(
                "wrote {} tasks ({}) with {} golden steps to {} [digest {}]",
                s.tasks,
                kinds.join(", "),
                s.golden_steps,
                a.out.display(),
                s.digest
            );
        }
        Command::Train(a) => {
            if a.print_default_config {
                print!("{}", commands::default_config_text());
                return Ok(());
            }
            let out = a.out.expect("clap enforces --out");
            let m = commands::cmd_train(&TrainOptions {
                config: a.config,
                overrides: a.overrides,
                method: a.method,
                workers: cli.workers,
                out: out.clone(),
                save_trajectories: a.save_trajectories,
            })?;
            println!("iteration\tfinished\tsuccesses\tdeployable\tmean_reward\teval");
            for r in &m.reports {
                let reward = r.mean_step_reward.map_or("-".to_string(), |x| format!("{x:.3}"));
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{:.3}",
                    r.iteration, r.finished, r.successes, r.deployable_steps, reward, r.eval_success_rate
                );
            }
            println!(
                "{}: eval success {:.3} -> {:.3} in {:.1}s; manifest {}",
                m.method,
                m.base_success_rate,
                m.final_success_rate,
                m.wall_clock.total_secs,
                out.join(commands::MANIFEST_FILE).display()
            );
        }
        Command::Eval(a) => {
            let r = commands::cmd_eval(&EvalOptions {
                checkpoint: a.checkpoint,
                suite: a.suite,
                config: a.config,
                max_steps: a.max_steps,
                workers: cli.workers.unwrap_or(0),
                out: a.out,
            })?;
            println!(
                "policy v{}: success {:.3} on {} tasks (max {} steps, suite {})",
                r.policy_version, r.success_rate, r.tasks, r.max_steps, r.suite_digest
            );
        }
        Command::Compare(a) => {
            let paths: Vec<PathBuf> = a
                .manifests
                .into_iter()
                .map(|p| if p.is_dir() { p.join(commands::MANIFEST_FILE) } else { p })
                .collect();
            let c = commands::cmd_compare(&paths, &a.out)?;
            print!("{}", std::fs::read_to_string(a.out.join(&c.success)).unwrap_or_default());
            println!(
                "wrote {}, {} and {} to {}",
                c.success,
                c.deployable,
                c.reward_ma,
                a.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cglens_cli::{
    apply_seed, cmd_analyze, cmd_importance, cmd_report, cmd_synth, cmd_train, AnalyzeOptions, CliError, ImportanceOptions, SynthOptions,
    Task, TrainOptions, EXIT_OK, EXIT_VALIDATION, STAGE_MINUTES_CSV, THROUGHPUT_CSV, QOE_FRACTIONS_CSV,
};
use cglens_core::config::Config;
use cglens_core::par::with_workers;
use cglens_core::Exec;

#[derive(Debug, Parser)]
#[command(name = "cglens", version, about = "Game title, player activity and effective QoE from cloud-gaming captures")]
struct Cli {
    /// Config file (TOML). Falls back to $CG_LENS_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding title.json, stage.json and pattern.json.
    #[arg(long, global = true, default_value = "models")]
    models_dir: PathBuf,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for corpus generation, splits and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core, 1 = sequential).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Analyze captures and write per-session JSON reports plus per-slot CSV.
    Analyze {
        #[arg(required = true)]
        captures: Vec<PathBuf>,
        /// QoE samples (slot,frame_rate,throughput_bps,latency_ms,loss_rate) for a single capture.
        #[arg(long)]
        qoe: Option<PathBuf>,
    },
    /// Train models on a corpus directory and print held-out accuracy.
    Train {
        corpus: PathBuf,
        /// title, stage, pattern or all.
        #[arg(long, default_value = "all", value_parser = parse_task)]
        task: Task,
    },
    /// Generate a labeled synthetic corpus.
    Synth {
        /// Profile file (TOML); the shipped profiles when absent.
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Only these profile ids (repeatable).
        #[arg(long = "profile")]
        only: Vec<String>,
        /// Sessions per profile.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Session duration in seconds.
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
        /// Upper end of a duration range; fixed duration when absent.
        #[arg(long)]
        max_duration: Option<f64>,
        /// Augmented copies per session.
        #[arg(long, default_value_t = 0)]
        augmented: usize,
    },
    /// Aggregate session reports into stage-minute, throughput and QoE tables.
    Report { reports: PathBuf },
    /// Permutation importance of a trained model on held-out corpus sessions.
    Importance {
        corpus: PathBuf,
        #[arg(long, default_value = "pattern", value_parser = parse_task)]
        task: Task,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 20_000)]
        max_rows: usize,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::resolve(cli.config.as_deref())?;
    apply_seed(&mut cfg, cli.seed);
    let exec = if cli.workers == 1 { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Analyze { captures, qoe } => {
            let opts = AnalyzeOptions {
                captures,
                qoe,
                models_dir: cli.models_dir,
                out: Some(cli.out.unwrap_or_else(|| "reports".into())),
            };
            for r in cmd_analyze(&opts, &cfg, exec)? {
                let decided = r.pattern.decided_at.map(|t| format!(" at {t:.0} s")).unwrap_or_default();
                println!(
                    "{}\ttitle {} ({:.2})\tpattern {} ({:.2}{decided})\tQoE {} -> {}",
                    r.session_id,
                    r.title.title.name(),
                    r.title.confidence,
                    r.pattern.pattern.as_str(),
                    r.pattern.confidence,
                    r.objective_qoe.map_or("-", |l| l.as_str()),
                    r.effective_qoe.map_or("-", |l| l.as_str()),
                );
            }
        }
        Command::Train { corpus, task } => {
            let opts = TrainOptions {
                corpus,
                task,
                models_dir: cli.models_dir,
            };
            print!("{}", cmd_train(&opts, &cfg, exec)?.render());
        }
        Command::Synth {
            profiles,
            only,
            count,
            duration,
            max_duration,
            augmented,
        } => {
            let out = cli.out.unwrap_or_else(|| "corpus".into());
            let opts = SynthOptions {
                out: out.clone(),
                profiles,
                only,
                count,
                duration_s: [duration, max_duration.unwrap_or(duration)],
                augmented,
                seed: cli.seed.unwrap_or(1),
            };
            let rows = cmd_synth(&opts, &cfg, exec)?;
            println!("wrote {} sessions to {}", rows.len(), out.display());
        }
        Command::Report { reports } => {
            let out = cli.out.unwrap_or_else(|| reports.clone());
            let agg = cmd_report(&reports, &out)?;
            println!(
                "{} titles; wrote {STAGE_MINUTES_CSV}, {THROUGHPUT_CSV}, {QOE_FRACTIONS_CSV} to {}",
                agg.stage_minutes.len(),
                out.display()
            );
        }
        Command::Importance {
            corpus,
            task,
            repeats,
            max_rows,
        } => {
            let opts = ImportanceOptions {
                corpus,
                task,
                models_dir: cli.models_dir,
                repeats,
                max_rows,
                out: cli.out,
            };
            for (rank, i) in cmd_importance(&opts, &cfg, exec)?.iter().enumerate() {
                println!("{:>3}  {:<28} {:>9.5}", rank + 1, i.attribute, i.importance);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let workers = cli.workers;
    match with_workers(workers, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

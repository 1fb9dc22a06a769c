use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use targetnet::pipeline::{self, Overrides, PipelineConfig, ResolvedConfig};

/// Learns a task-customized student from multi-task teachers on unlabeled data.
#[derive(Parser, Debug)]
#[command(name = "targetnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-label dataset.
    GenData(Common),
    /// Train teacher checkpoints on the labeled split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Train only this teacher.
        #[arg(long)]
        teacher: Option<usize>,
    },
    /// Block-wise amalgamation into a student with per-block filters.
    Amalgamate(Common),
    /// Choose branch points and regroup the student.
    Branchout(Common),
    /// Fine-tune the regrouped model on teacher soft targets.
    Finetune(Common),
    /// Per-label AP, mAP, top-k grid and per-block curves.
    Eval(Common),
    /// Every stage in order.
    Run(Common),
    /// Print the built-in default config.
    DefaultConfig,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON pipeline config; the built-in default when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Task selection as `n:i,...`, `i` indexing teacher `n`'s tasks.
    #[arg(long)]
    tasks: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ResolvedConfig> {
        let config = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => PipelineConfig::desk_default(),
        };
        let overrides = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            tasks: self.tasks.clone(),
        };
        Ok(config.resolve(&overrides)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let dir = pipeline::cmd_gen_data(&c.resolve()?)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Pretrain { common, teacher } => {
            let rc = common.resolve()?;
            for p in pipeline::cmd_pretrain(&rc, teacher)? {
                println!("teacher written to {}", p.display());
            }
        }
        Command::Amalgamate(c) => {
            let table = pipeline::cmd_amalgamate(&c.resolve()?)?;
            for (t, row) in table.task_ids.iter().zip(&table.heldout) {
                let row: Vec<String> = row
                    .iter()
                    .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()))
                    .collect();
                println!("task {t}: {}", row.join(" "));
            }
        }
        Command::Branchout(c) => {
            let plan = pipeline::cmd_branchout(&c.resolve()?)?;
            for (t, s) in plan.task_ids.iter().zip(&plan.points) {
                println!("task {t}: branch after block {s}");
            }
        }
        Command::Finetune(c) => {
            let report = pipeline::cmd_finetune(&c.resolve()?)?;
            for (i, t) in report.task_ids.iter().enumerate() {
                println!("task {t}: held-out loss {:.4} -> {:.4}", report.before[i], report.after[i]);
            }
        }
        Command::Eval(c) => print_summary(&pipeline::cmd_eval(&c.resolve()?)?),
        Command::Run(c) => print_summary(&pipeline::run_all(&c.resolve()?)?),
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::desk_default().to_json()?);
        }
    }
    Ok(())
}

fn print_summary(s: &pipeline::EvalSummary) {
    println!("task  teacher_ap  regrouped_ap  student_ap");
    for i in 0..s.task_ids.len() {
        println!(
            "{:>4}  {:>10.4}  {:>12.4}  {:>10.4}",
            s.task_ids[i], s.teacher_ap[i], s.regrouped_ap[i], s.student_ap[i]
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

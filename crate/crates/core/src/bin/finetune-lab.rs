use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use finetune_lab::harness::{report, Config, Lab, RunFailure};
use finetune_lab::model::{Model, Snapshot};
use finetune_lab::telemetry::emit::{
    write_deltas_file, write_json_file, write_steps_file, write_text_file,
};
use finetune_lab::Error;

#[derive(Parser)]
#[command(name = "finetune-lab", version, about = "Fine-tuning stability experiments on a tiny transformer")]
struct Cli {
    /// JSON config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides runs.base_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of runs executed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-token pretraining; writes pretrained.json.
    Pretrain,
    /// A single fine-tuning run.
    Finetune {
        #[arg(long)]
        approach: String,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        run_index: usize,
        /// Snapshot from `pretrain` to use instead of pretraining again.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// GU, GU-restart and full fine-tuning trajectories.
    Gu {
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Every approach on every task over all seeds.
    Benchmark {
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Component-wise clipping at each threshold on the sweep task.
    Sweep {
        /// Comma-separated thresholds; the config grid when omitted.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Numerical(Vec<String>),
    Other(String),
}

impl Failure {
    fn from_error(e: Error, run_id: &str) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            e if e.is_numerical() => Failure::Numerical(vec![format!("{run_id}: {e}")]),
            e => Failure::Other(e.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.runs.base_seed = s;
    }
    if cli.parallel == 0 {
        return Err(Failure::Config("--parallel must be at least 1".into()));
    }
    Ok(cfg)
}

fn lab(cfg: Config, pretrained: Option<&Path>) -> Result<Lab, Failure> {
    match pretrained {
        Some(p) => {
            let snap = Snapshot::load(p).map_err(|e| Failure::Config(e.to_string()))?;
            Lab::with_pretrained(cfg, snap).map_err(|e| Failure::from_error(e, "pretrain"))
        }
        None => Lab::new(cfg).map_err(|e| Failure::from_error(e, "pretrain")),
    }
}

fn check_failures(failures: &[RunFailure]) -> Result<(), Failure> {
    let numerical: Vec<String> = failures
        .iter()
        .filter(|f| f.numerical)
        .map(|f| format!("{}: {}", f.run_id, f.error))
        .collect();
    if !numerical.is_empty() {
        return Err(Failure::Numerical(numerical));
    }
    match failures.first() {
        Some(f) => Err(Failure::Other(format!("{} runs failed, first {}: {}", failures.len(), f.run_id, f.error))),
        None => Ok(()),
    }
}

fn io(e: Error) -> Failure {
    Failure::Other(e.to_string())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Pretrain => {
            let mut model = Model::new(cfg.model.clone()).map_err(|e| Failure::Config(e.to_string()))?;
            let p = finetune_lab::model::pretrain(&mut model, &cfg.pretrain)
                .map_err(|e| Failure::from_error(e, "pretrain"))?;
            p.snapshot.save(&out.join("pretrained.json")).map_err(io)?;
            let summary = serde_json::json!({
                "initial_loss": p.initial_loss,
                "final_loss": p.final_loss,
                "losses": p.losses,
            });
            write_json_file(&out.join("pretrain.json"), &summary).map_err(io)?;
            println!("pretrain loss {:.4} -> {:.4}", p.initial_loss, p.final_loss);
        }
        Command::Finetune {
            approach,
            task,
            run_index,
            pretrained,
        } => {
            let approach = cfg.approach(approach).map_err(|e| Failure::Config(e.to_string()))?.clone();
            let task = cfg.task(task).map_err(|e| Failure::Config(e.to_string()))?.clone();
            let lab = lab(cfg, pretrained.as_deref())?;
            let data = lab.dataset(&task).map_err(|e| Failure::Config(e.to_string()))?;
            let id = finetune_lab::harness::run_id(&approach.name, &task.name, *run_index);
            let o = lab
                .finetune(&approach, &task, &data, *run_index, None)
                .map_err(|e| Failure::from_error(e, &id))?;
            write_json_file(&out.join("runs.json"), &[&o.result]).map_err(io)?;
            write_steps_file(&out.join("steps.csv"), &o.telemetry.steps).map_err(io)?;
            write_deltas_file(&out.join("deltas.csv"), &o.telemetry.deltas).map_err(io)?;
            let r = &o.result;
            let text = format!(
                "{id}: {} {:.4} (majority baseline {:.4}){}\n",
                r.metric,
                r.value,
                r.majority_baseline_value,
                if r.failed { ", failed" } else { "" }
            );
            write_text_file(&out.join("report.txt"), &text).map_err(io)?;
            print!("{text}");
        }
        Command::Gu { pretrained } => {
            let lab = lab(cfg, pretrained.as_deref())?;
            let rep = lab
                .run_gu_experiment(cli.parallel)
                .map_err(|e| Failure::from_error(e, "gu"))?;
            report::write_gu(out, &rep).map_err(io)?;
            print!("{}", report::render_gu(&rep));
            check_failures(&rep.failures)?;
        }
        Command::Benchmark { pretrained } => {
            let lab = lab(cfg, pretrained.as_deref())?;
            let rep = lab
                .run_benchmark(cli.parallel)
                .map_err(|e| Failure::from_error(e, "benchmark"))?;
            report::write_benchmark(out, &rep).map_err(io)?;
            print!("{}", report::render_benchmark(&rep));
            check_failures(&rep.failures)?;
        }
        Command::Sweep {
            thresholds,
            pretrained,
        } => {
            let grid = thresholds.clone().unwrap_or_else(|| cfg.sweep.thresholds.clone());
            let lab = lab(cfg, pretrained.as_deref())?;
            let rep = lab
                .run_threshold_sweep(&grid, cli.parallel)
                .map_err(|e| Failure::from_error(e, "sweep"))?;
            report::write_sweep(out, &rep).map_err(io)?;
            print!("{}", report::render_sweep(&rep));
            check_failures(&rep.bench.failures)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(runs)) => {
            for r in runs {
                eprintln!("numerical failure in run {r}");
            }
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fmadapt::experiment::{
    finetune_corpus, heldout_requests, run_evaluate, run_finetune, run_generate, run_pretrain, run_sweep, summary_f1,
    write_jsonl, MetricRecord, RunConfig, Seeds, SweepAxis,
};
use fmadapt::tasks::{write_dataset, TaskKind};
use fmadapt::Result;

#[derive(Parser)]
#[command(name = "fmadapt", version, about = "Flow-matching backbone with condition adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces every seed in the config with ones derived from this value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            c.seeds = Seeds::from_master(s);
        }
        c.output_dir = Some(self.out.display().to_string());
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the backbone and duration model without annotations.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Inject adapters into a pre-trained run and fine-tune them.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-training run directory.
        #[arg(long)]
        base: PathBuf,
        /// Overrides the schedule's data fraction.
        #[arg(long)]
        data_fraction: Option<f64>,
        /// Accept a base checkpoint whose fingerprint differs.
        #[arg(long)]
        allow_fingerprint_mismatch: bool,
    },
    /// Generate features for a request file.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Run directory holding the checkpoints.
        #[arg(long)]
        run: PathBuf,
        /// Request file, one JSON object per line.
        #[arg(long)]
        requests: PathBuf,
        #[arg(long)]
        allow_fingerprint_mismatch: bool,
    },
    /// Score generated features against their requests.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `generate`.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        requests: PathBuf,
    },
    /// Fine-tune, generate and evaluate once per value of one setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        allow_fingerprint_mismatch: bool,
    },
    /// Write the fine-tuning corpus and its held-out request file.
    Corpus {
        #[command(flatten)]
        common: Common,
        /// Number of utterances; defaults to the schedule's corpus size. The
        /// held-out split is also written as a request file.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Print a default configuration.
    DefaultConfig {
        #[arg(long, value_enum, default_value = "emphasis")]
        task: TaskArg,
        /// Include a desk-scale adapter section.
        #[arg(long)]
        adapter: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TaskArg {
    Pause,
    Emphasis,
    Burst,
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain { common } => {
            let c = common.load()?;
            print_json(&run_pretrain(&c, &common.out)?)?;
            Ok(true)
        }
        Command::Finetune {
            common,
            base,
            data_fraction,
            allow_fingerprint_mismatch,
        } => {
            let mut c = common.load()?;
            if let Some(f) = data_fraction {
                c.schedule.data_fraction = f;
            }
            print_json(&run_finetune(&c, &base, &common.out, allow_fingerprint_mismatch)?)?;
            Ok(true)
        }
        Command::Generate {
            common,
            run,
            requests,
            allow_fingerprint_mismatch,
        } => {
            let c = common.load()?;
            let s = run_generate(&c, &run, &requests, &common.out, allow_fingerprint_mismatch)?;
            print_json(&s)?;
            Ok(s.rejected == 0)
        }
        Command::Evaluate {
            common,
            generated,
            requests,
        } => {
            let c = common.load()?;
            let records = run_evaluate(&generated, &requests, &c.task, &common.out)?;
            if let Some(summary) = records.iter().find(|r| matches!(r, MetricRecord::Summary { .. })) {
                print_json(summary)?;
            }
            let missing = records.iter().any(|r| matches!(r, MetricRecord::Missing { .. }));
            Ok(summary_f1(&records).is_some() && !missing)
        }
        Command::Sweep {
            common,
            base,
            axis,
            values,
            allow_fingerprint_mismatch,
        } => {
            let c = common.load()?;
            let rows = run_sweep(&c, &base, axis, &values, &common.out, allow_fingerprint_mismatch)?;
            for r in &rows {
                print_json(r)?;
            }
            Ok(rows.iter().all(|r| r.error.is_none()))
        }
        Command::Corpus { common, count } => {
            let mut c = common.load()?;
            if let Some(n) = count {
                c.schedule.corpus_size = n;
            }
            let corpus = finetune_corpus(&c)?;
            write_dataset(&common.out, &corpus)?;
            let requests = Path::new(&common.out).join("heldout_requests.jsonl");
            write_jsonl(&requests, &heldout_requests(&corpus, c.seeds.train))?;
            eprintln!(
                "wrote {} train + {} held-out utterances and their requests to {}",
                corpus.train.len(),
                corpus.heldout.len(),
                Path::new(&common.out).display()
            );
            Ok(true)
        }
        Command::DefaultConfig { task, adapter } => {
            let kind = match task {
                TaskArg::Pause => TaskKind::Pause,
                TaskArg::Emphasis => TaskKind::Emphasis,
                TaskArg::Burst => TaskKind::Burst,
            };
            let mut c = RunConfig::desk(kind);
            if adapter {
                c.adapter = Some(fmadapt::adapters::AdapterSpec::desk());
            }
            print!("{}", c.to_toml()?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

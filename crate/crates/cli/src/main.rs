use std::io::{stderr, stdout, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use relmem_cli::commands::{
    cmd_dump_attention, cmd_eval, cmd_gen, cmd_gradcheck, cmd_sweep, cmd_train, parse_gate_style,
    parse_model, parse_task,
};

#[derive(Parser)]
#[command(
    name = "relmem",
    about = "Train, evaluate, and analyze slot-based relational memory models on sequence toy tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, checkpoint.json, and
    /// resolved-config.json into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracy of a checkpoint on freshly generated batches.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        /// Must match the checkpoint's task when given.
        #[arg(long)]
        task: Option<String>,
    },
    /// Generate a JSONL dataset of task instances.
    Gen {
        #[arg(long)]
        task: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        seq_len: usize,
        #[arg(long, default_value_t = 10)]
        vocab: usize,
        #[arg(long, default_value_t = 5)]
        length: usize,
    },
    /// Run one stored episode through a relational checkpoint and write
    /// the attention matrices as JSON.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients against finite differences on a
    /// small model; exits zero only when the error is inside --tol.
    Gradcheck {
        #[arg(long, default_value = "rmc")]
        model: String,
        #[arg(long, default_value = "unit")]
        gate_style: String,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Run a cartesian grid of training configs, one subdirectory each.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train { config, out } => {
            cmd_train(&config, &out)?;
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            batches,
            task,
        } => {
            cmd_eval(&checkpoint, batches, task.as_deref(), &mut stdout())?;
            Ok(true)
        }
        Command::Gen {
            task,
            count,
            seed,
            out,
            dim,
            seq_len,
            vocab,
            length,
        } => {
            let task = parse_task(&task)?;
            let dims = relmem::trainer::TaskParams {
                dim,
                seq_len,
                vocab_size: vocab,
                length,
            };
            cmd_gen(task, count, seed, &dims, &out)?;
            Ok(true)
        }
        Command::DumpAttention {
            checkpoint,
            episode,
            out,
        } => {
            cmd_dump_attention(&checkpoint, &episode, &out)?;
            Ok(true)
        }
        Command::Gradcheck {
            model,
            gate_style,
            blocks,
            eps,
            tol,
        } => {
            let model = parse_model(&model)?;
            let gate_style = parse_gate_style(&gate_style)?;
            cmd_gradcheck(model, gate_style, blocks, eps, tol, &mut stdout())
        }
        Command::Sweep { config, out } => {
            cmd_sweep(&config, &out, &mut stdout())?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            let _ = writeln!(stderr(), "error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

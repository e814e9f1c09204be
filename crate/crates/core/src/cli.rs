//! Command-line front end. [`run`] parses arguments, writes to the given
//! streams and returns the process exit code.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::dilation::render_ascii;
use crate::error::Error;
use crate::experiment::{
    evaluate_summary, output_dir, run as run_experiment, write_dataset, write_outputs,
    write_snapshots, ExperimentConfig, Summary,
};
use crate::gradcheck::{run_suite, standard_cases, GradCase, Scope, SEEDS, TOLERANCE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gendilate",
    version,
    about = "Learned dilation masks for convolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskName {
    Lag,
    Pattern2d,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: Scope,
    },
    /// Write a synthetic dataset with its ground-truth metadata.
    GenData {
        /// Experiment config whose task section is used.
        #[arg(long, conflicts_with = "task")]
        config: Option<PathBuf>,
        /// Built-in task with default parameters.
        #[arg(long, value_enum)]
        task: Option<TaskName>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute test accuracy of a trained model.
    Eval {
        #[arg(long)]
        summary: PathBuf,
    },
    /// Print one learned mask.
    DumpMask {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = err.write_all(text.as_bytes());
            } else {
                let _ = out.write_all(text.as_bytes());
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Gradcheck { scope } => {
            return cmd_gradcheck_with(&standard_cases(), scope, out);
        }
        Command::GenData {
            config,
            task,
            out: dir,
            seed,
        } => cmd_gen_data(config.as_deref(), task, &dir, seed, out),
        Command::Train {
            config,
            out: dir,
            seed,
        } => cmd_train(&config, dir.as_deref(), seed, out),
        Command::Eval { summary } => cmd_eval(&summary, out),
        Command::DumpMask {
            summary,
            layer,
            channel,
        } => cmd_dump_mask(&summary, layer, channel, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::NonFinite { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

/// Runs `cases` under `scope`, printing one line per case.
pub fn cmd_gradcheck_with(cases: &[GradCase], scope: Scope, out: &mut dyn Write) -> i32 {
    let report = run_suite(cases, scope, SEEDS);
    for o in &report.outcomes {
        let status = if o.max_error < TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        let _ = writeln!(
            out,
            "{status:4} {:32} max_rel_err={:.3e} (seed {})",
            o.name, o.max_error, o.worst_seed
        );
    }
    for f in &report.failures {
        let _ = writeln!(out, "failure: {} seed {}: {}", f.name, f.seed, f.detail);
    }
    let _ = writeln!(
        out,
        "{} cases, {} failures, tolerance {:e}",
        report.outcomes.len(),
        report.failures.len(),
        TOLERANCE
    );
    if report.outcomes.is_empty() || !report.passed() {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    }
}

fn cmd_gen_data(
    config: Option<&Path>,
    task: Option<TaskName>,
    dir: &Path,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<i32, Error> {
    let cfg = match (config, task) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(TaskName::Lag)) => ExperimentConfig::lag_default(0),
        (None, Some(TaskName::Pattern2d)) => ExperimentConfig::pattern_default(0),
        (None, None) => return Err(Error::config("", "one of --config or --task is required")),
    };
    let seed = seed.unwrap_or(cfg.seed());
    write_dataset(dir, &cfg.task, seed)?;
    writeln!(out, "wrote dataset to {}", dir.display())?;
    Ok(EXIT_OK)
}

fn cmd_train(
    config: &Path,
    dir: Option<&Path>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<i32, Error> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let dir = output_dir(&cfg, dir);
    let outcome = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, last_good }) => {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("metrics.csv"), last_good.metrics_csv())?;
            write_snapshots(&dir, &last_good)?;
            return Err(Error::Diverged { epoch, last_good });
        }
        Err(e) => return Err(e),
    };
    for n in &outcome.summary.notices {
        writeln!(out, "notice: {n}")?;
    }
    write_outputs(&dir, &outcome)?;
    let f = &outcome.summary.final_record;
    writeln!(
        out,
        "epochs={} loss={:.6} val_accuracy={:.4} feasible={}",
        outcome.summary.epochs, f.loss_total, f.val_accuracy, outcome.summary.feasible
    )?;
    for m in &outcome.summary.masks {
        if let (Some(p), Some(r), Some(k)) = (m.precision, m.recall, m.top_k_recall) {
            writeln!(
                out,
                "layer {} channel {}: precision={p:.3} recall={r:.3} top_k_recall={k:.3}",
                m.layer, m.channel
            )?;
        }
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(EXIT_OK)
}

fn cmd_eval(path: &Path, out: &mut dyn Write) -> Result<i32, Error> {
    let summary = Summary::load(path)?;
    let acc = evaluate_summary(&summary)?;
    let stored = summary.final_record.val_accuracy;
    writeln!(out, "test_accuracy={acc} stored={stored}")?;
    if acc == stored {
        Ok(EXIT_OK)
    } else {
        writeln!(out, "mismatch between recomputed and stored accuracy")?;
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_dump_mask(
    path: &Path,
    layer: usize,
    channel: usize,
    out: &mut dyn Write,
) -> Result<i32, Error> {
    let summary = Summary::load(path)?;
    let params = summary
        .model
        .layers
        .get(layer)
        .and_then(|l| l.masks.get(channel))
        .ok_or_else(|| Error::invalid(format!("no mask at layer {layer} channel {channel}")))?;
    let dump = params.dump(channel, summary.config.train.threshold)?;
    out.write_all(dump.as_bytes())?;
    let bin = params.binarize(summary.config.train.threshold)?;
    writeln!(out)?;
    out.write_all(render_ascii(&bin.pattern).as_bytes())?;
    Ok(EXIT_OK)
}

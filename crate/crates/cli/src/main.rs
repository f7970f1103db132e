//! Experiment runner for the contrastive mixture laboratory.
//!
//! Subcommands: `train` (run the engine to its budget), `eval` (kNN or linear
//! probe on a checkpoint), `sweep` (one axis, one run per value, summary CSV),
//! `inspect` (checkpoint metadata). Exit codes are a stable contract:
//! 0 success, 2 configuration problems, 3 numeric failure (non-finite loss),
//! 4 checkpoint/dataset format violations.

mod datasets;

// The training loop allocates fresh graph buffers every step; the default
// allocator returns them to the OS each time and the kernel round-trips
// dominate wall time. A caching allocator keeps the pages resident.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unmix_core::engine::{
    load_checkpoint, read_checkpoint_meta, run_training, METRICS_HEADER,
};
use unmix_core::error::{Error, Result};
use unmix_core::evalsuite::{extract_features, knn_accuracy, linear_probe, ProbeCfg};
use unmix_core::tensor::checkpoint::read_file;
use unmix_core::RunConfig;

use datasets::load_run_data;

#[derive(Parser)]
#[command(
    name = "unmix",
    about = "Desk-scale contrastive learning with in-batch image mixtures"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train to the configured budget; writes metrics.csv, checkpoint.umx,
    /// and config.resolved into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable key=value settings applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Resume from a checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint: knn5, knn200, or a linear probe.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "knn200")]
        protocol: String,
        /// Override the dataset root stored in the checkpoint's config.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// One run per value of a single config key, plus a summary CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Independent child processes to run at a time.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print a checkpoint's metadata.
    Inspect { checkpoint: PathBuf },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 3,
        Error::Format(_) | Error::BadRecord { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train {
            config,
            overrides,
            resume,
        } => cmd_train(&config, &overrides, resume.as_deref()),
        Cmd::Eval {
            checkpoint,
            protocol,
            data_dir,
        } => cmd_eval(&checkpoint, &protocol, data_dir.as_deref()),
        Cmd::Sweep {
            config,
            axis,
            values,
            parallel,
            overrides,
        } => cmd_sweep(&config, &axis, &values, parallel, &overrides),
        Cmd::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(config: &Path, overrides: &[String], resume: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(config, overrides)?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.resolved"), cfg.resolved())?;
    let data = load_run_data(&cfg)?;
    let summary = run_training(
        &cfg,
        &data.train,
        Some((&data.eval_index, &data.eval_query)),
        &out_dir,
        resume,
    )?;
    let knn = summary
        .final_knn
        .map(|v| format!(", final knn {v:.4}"))
        .unwrap_or_default();
    let total = summary
        .last
        .map(|r| format!(", last loss {:.6}", r.total))
        .unwrap_or_default();
    println!(
        "trained {} steps / {} epochs{total}{knn}",
        summary.steps, summary.epochs
    );
    println!("metrics: {}", summary.metrics_path.display());
    println!("checkpoint: {}", summary.checkpoint_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, protocol: &str, data_dir: Option<&Path>) -> Result<ExitCode> {
    let records = read_file(checkpoint)?;
    let meta = read_checkpoint_meta(&records)?;
    let mut state = load_checkpoint(checkpoint)?;
    let mut cfg = meta.config.clone();
    if let Some(d) = data_dir {
        cfg.data_dir = d.display().to_string();
    }
    let data = load_run_data(&cfg)?;
    let norm = cfg.normalization()?;
    let bs = cfg.batch_size.max(1);
    let enc = &mut state.pair.online;
    let index = extract_features(enc, &data.eval_index, &norm, bs)?;
    let query = extract_features(enc, &data.eval_query, &norm, bs)?;
    let acc = match protocol {
        "knn5" => knn_accuracy(&index, &query, 5.min(index.features.n), cfg.eval_knn_tau, true)?,
        "knn200" => knn_accuracy(
            &index,
            &query,
            200.min(index.features.n),
            cfg.eval_knn_tau,
            true,
        )?,
        "probe" => linear_probe(
            &index,
            &query,
            &ProbeCfg {
                seed: meta.seed,
                ..ProbeCfg::default()
            },
        )?,
        other => {
            return Err(Error::Config(format!(
                "unknown protocol '{other}' (knn5|knn200|probe)"
            )))
        }
    };
    println!("{protocol} accuracy: {acc:.4}");
    append_eval_row(checkpoint, meta.step, meta.epoch, protocol, acc)?;
    Ok(ExitCode::SUCCESS)
}

/// Eval rows reuse the metrics schema: loss columns blank, protocol in the
/// mode column, accuracy in knn_acc.
fn append_eval_row(
    checkpoint: &Path,
    step: usize,
    epoch: usize,
    protocol: &str,
    acc: f32,
) -> Result<()> {
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let path = dir.join("metrics.csv");
    let mut f = if path.exists() {
        std::fs::OpenOptions::new().append(true).open(&path)?
    } else {
        let mut f = std::fs::File::create(&path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    writeln!(f, "{step},{epoch},,,,,{protocol},,{acc:.6},")?;
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<ExitCode> {
    let records = read_file(checkpoint)?;
    let meta = read_checkpoint_meta(&records)?;
    let floats: usize = records.iter().map(|r| r.data.len()).sum();
    println!("checkpoint: {}", checkpoint.display());
    println!("step: {}", meta.step);
    println!("epoch: {}", meta.epoch);
    println!("seed: {}", meta.seed);
    println!("config_hash: {}", meta.config_hash);
    println!("records: {} ({} f32 values)", records.len(), floats);
    println!(
        "loss.base: {}  loss.mode: {}  mix.enabled: {}",
        meta.config.loss_base, meta.config.loss_mode, meta.config.mix_enabled
    );
    println!(
        "encoder.stages: {}  embedding_dim: {}",
        meta.config.encoder_stages, meta.config.encoder_embedding_dim
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(
    config: &Path,
    axis: &str,
    values: &[String],
    parallel: usize,
    overrides: &[String],
) -> Result<ExitCode> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base = load_config(config, overrides)?;
    let out_base = PathBuf::from(&base.output_dir);
    std::fs::create_dir_all(&out_base)?;

    // Materialize one config file per run in its own sibling directory.
    let mut runs: Vec<(String, PathBuf)> = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        cfg.set(axis, v, "sweep")?;
        let dir = out_base.join(format!("{axis}={v}"));
        std::fs::create_dir_all(&dir)?;
        cfg.output_dir = dir.display().to_string();
        cfg.validate()?;
        let conf_path = dir.join("config.conf");
        std::fs::write(&conf_path, cfg.resolved())?;
        runs.push((v.clone(), dir));
    }

    // Independent child processes, `parallel` at a time, no shared state.
    let exe = std::env::current_exe()?;
    for chunk in runs.chunks(parallel.max(1)) {
        let mut children = Vec::new();
        for (v, dir) in chunk {
            let child = std::process::Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(dir.join("config.conf"))
                .stdout(std::process::Stdio::null())
                .spawn()?;
            children.push((v.clone(), child));
        }
        for (v, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                eprintln!("error: sweep run {axis}={v} failed with {status}");
                let code = status.code().unwrap_or(2).clamp(0, 255) as u8;
                return Ok(ExitCode::from(code));
            }
        }
    }

    let summary_path = out_base.join("sweep_summary.csv");
    let mut f = std::fs::File::create(&summary_path)?;
    writeln!(f, "value,final_knn")?;
    for (v, dir) in &runs {
        let knn = last_knn(&dir.join("metrics.csv")).unwrap_or_default();
        writeln!(f, "{v},{knn}")?;
    }
    println!("sweep summary: {}", summary_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Last non-blank knn_acc column of a metrics CSV.
fn last_knn(metrics: &Path) -> Option<String> {
    let text = std::fs::read_to_string(metrics).ok()?;
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let col = l.split(',').nth(8)?;
            (!col.is_empty()).then(|| col.to_string())
        })
        .last()
}

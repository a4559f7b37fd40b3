use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use jointdiff_core::conditioning::ConditionToken;
use jointdiff_core::experiment::{
    self, cell_dir, collect_sweep, execute_cell, make_requests, pending_cells, prepare_sweep, ExperimentConfig,
};
use jointdiff_core::metrics::{write_metric_csv, ToyFeatureExtractor};
use jointdiff_core::sampler::{ChannelNoise, SamplerConfig};
use jointdiff_core::{data, Error, Result};

/// Joint image and lesion-mask diffusion: data, training, sampling and evaluation.
#[derive(Parser)]
#[command(name = "jointdiff", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic slice archive from the `[data.toy]` section.
    GenerateToy {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Convert a CSV slice table with raw f32 payloads into an archive.
    Ingest {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = jointdiff_core::conditioning::DEFAULT_Z_BINS)]
        z_bins: usize,
    },
    /// Train one model into a run directory.
    Train {
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from `last.ckpt` in the run directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sample conditioned slices from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat condition token `z_bin + pathology·n_z`. Repeatable.
        #[arg(long = "token")]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        n_per_token: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SamplerConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = SamplerConfig::default().eta)]
        eta: f64,
        #[arg(long, default_value_t = SamplerConfig::default().batch_size)]
        batch_size: usize,
        /// Use one noise field for both channels, matching training corruption.
        #[arg(long)]
        shared_noise: bool,
    },
    /// Compare a generated archive against a real one.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        real: PathBuf,
        /// Metric CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Precomputed real-image features for KID.
        #[arg(long, requires = "gen_features")]
        real_features: Option<PathBuf>,
        #[arg(long, requires = "real_features")]
        gen_features: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the target × Lp × replica grid and write the report.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rebuild the report from a per-replica table.
    Report {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = jointdiff_core::stats::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Run one sweep cell (used by parallel sweeps).
    #[command(hide = true)]
    SweepCell {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
}

enum Outcome {
    Done,
    PartialSweep,
}

fn run(cmd: Cmd) -> Result<Outcome> {
    match cmd {
        Cmd::GenerateToy { out, cfg } => {
            let cfg = cfg.load()?;
            let n = experiment::generate_toy(&cfg.data.toy, &out)?;
            log::info!("wrote {n} slices to {}", out.display());
        }
        Cmd::Ingest { table, out, z_bins } => {
            let n = data::ingest(&table, &out, z_bins)?;
            log::info!("ingested {n} slices into {}", out.display());
        }
        Cmd::Train { run_dir, resume, cfg } => {
            let cfg = cfg.load()?;
            let o = experiment::run_train(&cfg, &run_dir, resume)?;
            log::info!(
                "trained {} epochs, best epoch {} (val {:.6}){}",
                o.epochs_run,
                o.best_epoch,
                o.best_val_loss,
                if o.stopped_early { ", stopped early" } else { "" }
            );
        }
        Cmd::Sample { checkpoint, out, tokens, n_per_token, seed, steps, eta, batch_size, shared_noise } => {
            if tokens.is_empty() {
                return Err(Error::Usage("at least one --token is required; unconditional sampling is not supported".into()));
            }
            if n_per_token < 1 {
                return Err(Error::Usage("--n-per-token must be >= 1".into()));
            }
            let ck = jointdiff_core::checkpoint::Checkpoint::load(&checkpoint)?;
            let n_z = ck.header.unet.z_bins;
            let mut toks = Vec::with_capacity(tokens.len() * n_per_token);
            for &t in &tokens {
                let tok = ConditionToken::decode(t, n_z)?;
                toks.extend(std::iter::repeat_n(tok, n_per_token));
            }
            let noise = if shared_noise { ChannelNoise::Shared } else { ChannelNoise::Independent };
            let cfg = SamplerConfig { steps, eta, seed, batch_size, noise };
            let recs = experiment::run_sample(&checkpoint, &make_requests(&toks, seed), &cfg, Some(&out))?;
            log::info!("wrote {} samples to {}", recs.len(), out.display());
        }
        Cmd::Evaluate { gen, real, out, real_features, gen_features, cfg } => {
            let cfg = cfg.load()?;
            let g = data::read_archive(&gen)?;
            let r = data::read_archive(&real)?;
            let mut rows = experiment::run_evaluate(&g, &r, &cfg.metrics, &ToyFeatureExtractor::default())?;
            if let (Some(rf), Some(gf)) = (real_features, gen_features) {
                experiment::kid_from_feature_files(&mut rows, &rf, &gf, &cfg.metrics)?;
            }
            write_metric_csv(&out, &rows)?;
            for row in &rows {
                println!("{:<28} {:.6}", row.metric, row.value);
            }
        }
        Cmd::Sweep { out, cfg } => {
            let cfg = cfg.load()?;
            let o = if cfg.sweep.workers > 1 {
                prepare_sweep(&cfg, &out)?;
                run_cells_in_workers(&cfg, &out)?;
                collect_sweep(&cfg, &out)?
            } else {
                experiment::run_sweep(&cfg, &out)?
            };
            print!("{}", experiment::render_report(&o.report));
            if !o.is_complete() {
                for (c, why) in &o.failed {
                    log::error!("cell {} incomplete: {}", c.dir_name(), why.trim());
                }
                return Ok(Outcome::PartialSweep);
            }
        }
        Cmd::Report { table, out, alpha } => {
            let r = experiment::regenerate_report(&table, &out, alpha)?;
            print!("{}", experiment::render_report(&r));
            if !r.missing.is_empty() {
                return Ok(Outcome::PartialSweep);
            }
        }
        Cmd::SweepCell { config, dir } => {
            let cfg = ExperimentConfig::load(Some(&config), &[])?;
            execute_cell(&cfg, &dir)?;
        }
    }
    Ok(Outcome::Done)
}

/// Runs pending cells as child processes, at most `workers` at a time.
/// Failures stay in each cell's directory for the collection step.
fn run_cells_in_workers(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current_exe", e))?;
    let mut queue = pending_cells(cfg, root).into_iter();
    let mut running: Vec<(String, Child)> = Vec::new();
    loop {
        while running.len() < cfg.sweep.workers {
            let Some(c) = queue.next() else { break };
            let dir = cell_dir(root, &c);
            let child = Command::new(&exe)
                .arg("sweep-cell")
                .arg("--config")
                .arg(dir.join(experiment::CONFIG_SNAPSHOT))
                .arg("--dir")
                .arg(&dir)
                .spawn()
                .map_err(|e| Error::io(&exe, e))?;
            running.push((c.dir_name(), child));
        }
        if running.is_empty() {
            return Ok(());
        }
        let (name, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| Error::io(&exe, e))?;
        if !status.success() {
            log::error!("cell {name} exited with {status}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::PartialSweep) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

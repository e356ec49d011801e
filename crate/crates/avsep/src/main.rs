//! Command-line entry point: dataset simulation, training, evaluation,
//! single-mixture extraction, and the gradient self-check.
//!
//! Every failure prints one `error: ...` line to stderr and exits non-zero.
//! The default seed comes from `AVSEP_SEED` when set; `--seed` overrides it.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avsep::io::checkpoint::{load_checkpoint, save_checkpoint};
use avsep::io::config::read_run_config;
use avsep::io::manifest::{
    load_dataset, manifest_path, read_visual, save_sample, write_manifest,
};
use avsep::io::tables::{write_history, write_results};
use avsep::io::wav;
use avsep::metrics::MetricsRow;
use avsep::model::ExtractorModel;
use avsep::train::{evaluate, fit, TrainSample, Visibility};

#[derive(Parser)]
#[command(
    name = "avsep",
    version,
    about = "Desk-scale audio-visual target speaker extraction"
)]
struct Cli {
    /// Random seed; overrides the AVSEP_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a sparse-overlap mixture dataset with visual streams and a
    /// manifest.
    Simulate {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to generate.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Speakers per mixture (target first).
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        /// Fraction of samples where at least two speakers overlap.
        #[arg(long, default_value_t = 0.3)]
        overlap: f64,
        /// Clip length in seconds.
        #[arg(long, default_value_t = 2.0)]
        len_s: f64,
    },
    /// Train a model from a config file and a dataset manifest.
    Train {
        /// Run configuration ([model]/[train]/[data] sections).
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest written by `simulate`.
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint path to write (a `.cfg` sidecar appears next to it).
        #[arg(long)]
        out: PathBuf,
        /// Optional training-history table path.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Optional checkpoint to finetune from instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Wall-clock budget in seconds; overrides the config value.
        #[arg(long)]
        time_budget_s: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset under visibility modes.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
        /// Dataset manifest of held-out samples.
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated visibility modes (1-spk, 2-spk, 3-spk).
        #[arg(long, value_delimiter = ',', default_value = "1-spk,2-spk")]
        visibility: Vec<String>,
        /// Optional per-sample results table path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract per-speaker waveforms from one mixture WAV.
    Extract {
        /// Checkpoint to run.
        #[arg(long)]
        model: PathBuf,
        /// Mixture WAV (16 kHz mono PCM).
        #[arg(long)]
        mix: PathBuf,
        /// Visual stream file; repeat once per speaker, target first. A
        /// single stream bypasses the attention path.
        #[arg(long = "visual", required = true)]
        visuals: Vec<PathBuf>,
        /// Output directory for the per-speaker WAVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite and report each check.
    Gradcheck,
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            std::process::ExitCode::FAILURE
        }
    }
}

/// `--seed` wins, then `AVSEP_SEED`, then the caller's fallback.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("AVSEP_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| format!("AVSEP_SEED={v:?} is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}

/// Prefixes an error with the file it concerns.
fn at<T>(path: &Path, r: avsep::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Simulate {
            out,
            count,
            speakers,
            overlap,
            len_s,
        } => simulate(cli.seed, out, count, speakers, overlap, len_s),
        Command::Train {
            config,
            manifest,
            out,
            history,
            init,
            time_budget_s,
        } => train(cli.seed, config, manifest, out, history, init, time_budget_s),
        Command::Eval {
            model,
            manifest,
            visibility,
            out,
        } => eval(model, manifest, visibility, out),
        Command::Extract {
            model,
            mix,
            visuals,
            out,
        } => extract(model, mix, visuals, out),
        Command::Gradcheck => gradcheck(cli.seed),
    }
}

fn simulate(
    seed_flag: Option<u64>,
    out: PathBuf,
    count: usize,
    speakers: usize,
    overlap: f64,
    len_s: f64,
) -> Result<(), String> {
    if count == 0 {
        return Err("--count must be at least 1".into());
    }
    let total_len = (len_s * wav::SAMPLE_RATE as f64).round() as usize;
    let seed = resolve_seed(seed_flag, 0)?;
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for id in 0..count {
        let sample_seed: u64 = rng.gen();
        let sample = TrainSample::synth_sparse(total_len, speakers, overlap, sample_seed)
            .map_err(|e| format!("sample {id}: {e}"))?;
        records.push(at(&out, save_sample(&out, id, &sample, sample_seed))?);
    }
    let mpath = manifest_path(&out);
    at(&mpath, write_manifest(&mpath, &records))?;
    println!(
        "simulated {count} samples ({speakers} speakers, overlap {overlap}, {len_s} s) -> {}",
        mpath.display()
    );
    Ok(())
}

fn train(
    seed_flag: Option<u64>,
    config: PathBuf,
    manifest: PathBuf,
    out: PathBuf,
    history_path: Option<PathBuf>,
    init: Option<PathBuf>,
    time_budget_s: Option<f64>,
) -> Result<(), String> {
    let mut cfg = at(&config, read_run_config(&config))?;
    cfg.train.seed = resolve_seed(seed_flag, cfg.train.seed)?;
    if time_budget_s.is_some() {
        cfg.train.time_budget_s = time_budget_s;
    }

    let set = at(&manifest, load_dataset(&manifest))?;
    if set.len() < 2 {
        return Err(format!(
            "dataset has {} samples; need at least 2 to hold out validation",
            set.len()
        ));
    }
    let n_val = ((set.len() as f64 * cfg.data.val_fraction).round() as usize)
        .clamp(1, set.len() - 1);
    let (train_set, val_set) = set.split_at(set.len() - n_val);

    let model = match &init {
        Some(path) => at(path, load_checkpoint::<f32>(path))?,
        None => {
            at(&config, ExtractorModel::<f32>::init(cfg.model.clone(), cfg.train.seed))?
        }
    };
    println!(
        "training on {} samples ({} validation), {} parameters, seed {}",
        train_set.len(),
        val_set.len(),
        model.n_params(),
        cfg.train.seed
    );

    let history = fit(&model, train_set, val_set, &cfg.train).map_err(|e| e.to_string())?;
    for row in &history {
        println!(
            "epoch={} train_loss={:.4} val_loss={:.4} lr={:.3e} multiplier={}",
            row.epoch, row.train_loss, row.val_loss, row.lr, row.multiplier
        );
    }

    at(&out, save_checkpoint(&out, &model))?;
    if let Some(hp) = &history_path {
        at(hp, write_history(hp, &history))?;
    }
    let best = history
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    println!(
        "saved checkpoint to {} after {} epochs (best val_loss {:.4})",
        out.display(),
        history.len(),
        best
    );
    Ok(())
}

fn eval(
    model_path: PathBuf,
    manifest: PathBuf,
    visibility: Vec<String>,
    out: Option<PathBuf>,
) -> Result<(), String> {
    let modes = visibility
        .iter()
        .map(|s| Visibility::parse(s).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, String>>()?;
    if modes.is_empty() {
        return Err("at least one --visibility mode is required".into());
    }
    let model = at(&model_path, load_checkpoint::<f32>(&model_path))?;
    let set = at(&manifest, load_dataset(&manifest))?;

    let mut all_rows: Vec<MetricsRow> = Vec::new();
    for &mode in &modes {
        let rows = evaluate(&model, &set, mode).map_err(|e| e.to_string())?;
        let n = rows.len() as f64;
        let mean_si = rows.iter().map(|r| r.si_snri_db).sum::<f64>() / n;
        let mean_snr = rows.iter().map(|r| r.snri_db).sum::<f64>() / n;
        println!(
            "visibility={} n={} mean_si_snri_db={:.4} mean_snri_db={:.4}",
            mode.label(),
            rows.len(),
            mean_si,
            mean_snr
        );
        all_rows.extend(rows);
    }
    if let Some(path) = &out {
        at(path, write_results(path, &all_rows))?;
        println!("wrote {} result rows to {}", all_rows.len(), path.display());
    }
    Ok(())
}

fn extract(
    model_path: PathBuf,
    mix: PathBuf,
    visuals: Vec<PathBuf>,
    out: PathBuf,
) -> Result<(), String> {
    let model = at(&model_path, load_checkpoint::<f32>(&model_path))?;
    let (wave, sample_rate) =
        wav::read_wav(&mix).map_err(|e| format!("{}: {e}", mix.display()))?;
    let streams = visuals
        .iter()
        .map(|p| at(p, read_visual(p)))
        .collect::<Result<Vec<_>, String>>()?;
    let bypass = streams.len() == 1;
    let estimates = model
        .extract(&wave, &streams, bypass)
        .map_err(|e| e.to_string())?;

    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    for (i, est) in estimates.iter().enumerate() {
        let path = out.join(format!("speaker{i}.wav"));
        wav::write_wav(&path, est, sample_rate).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    println!(
        "extracted {} speaker(s) from {} -> {}",
        estimates.len(),
        mix.display(),
        out.display()
    );
    Ok(())
}

fn gradcheck(seed_flag: Option<u64>) -> Result<(), String> {
    let seed = resolve_seed(seed_flag, 0)?;
    let reports = avsep::gradsuite::run_suite(seed).map_err(|e| e.to_string())?;
    let mut failures = 0usize;
    for report in &reports {
        println!("{report}");
        if !report.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(format!("{failures} of {} gradient checks failed", reports.len()));
    }
    println!("gradient suite: all {} checks passed", reports.len());
    Ok(())
}

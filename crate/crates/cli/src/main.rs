//! Command-line interface: dataset synthesis, training, fine-tuning,
//! separation of WAV files, evaluation, and inference-depth sweeps.
//!
//! Exit codes: 0 success, 1 usage error (flags, config files, inputs),
//! 2 runtime error (training divergence, shape mismatches, I/O during a
//! run).

mod model_name;
mod wav;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use scalesep_core::datagen::{DatasetSpec, GenParams, ManifestEntry};
use scalesep_core::trainer::default_finetune_epochs;
use scalesep_core::{
    build_dataset, emit_sweep_svg, eval, evaluate, finetune, forward, load_checkpoint,
    manifest_from_str, manifest_to_string, sweep, train, LossConfig, Manifest, ModelConfig,
    ReportFormat, Split, TrainConfig,
};

use model_name::ModelName;
use wav::{read_wav, write_wav, WavEncoding};

/// Top-level config file: key tree mirrors the model, loss, and train
/// config fields verbatim; unknown keys are errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    #[serde(default)]
    loss: LossConfig,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Parser)]
#[command(
    name = "scalesep",
    version,
    about = "Source separation with runtime-adjustable refinement depth"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic mixture dataset and write its manifest.
    Dataset(DatasetArgs),
    /// Train a model from a config file and a manifest.
    Train(TrainArgs),
    /// Warm-start a checkpoint at new depths and fine-tune it.
    Finetune(FinetuneArgs),
    /// Separate a mixture WAV into per-speaker WAVs.
    Separate(SeparateArgs),
    /// Evaluate a checkpoint on a manifest split.
    Evaluate(EvaluateArgs),
    /// Evaluate across a range of inference depths and emit a report.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Manifest output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    /// Clip duration in seconds.
    #[arg(long, default_value_t = 0.5)]
    duration: f64,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    /// Per-source gain offset range in dB, as `lo:hi`.
    #[arg(long, default_value = "0:3")]
    snr_range: String,
    /// Noise floor SNR in dB; omit for clean mixtures.
    #[arg(long)]
    noise_snr: Option<f64>,
    /// Offset added to the per-split seed bases.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Persist every example as WAV files under this directory.
    #[arg(long)]
    audio_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Model name like `sep1x2-re1x3-l1+3`: overrides the config's stack
    /// layout, training depths, and loss label.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Base checkpoint directory.
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// New reconstructor depth.
    #[arg(long)]
    n_re: usize,
    /// New separator depth (defaults to the base depth).
    #[arg(long)]
    n_sep: Option<usize>,
    /// Fine-tune epoch budget (defaults to 20% of the base budget).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SeparateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Separator passes (defaults to the training depth).
    #[arg(long)]
    n_sep: Option<usize>,
    /// Reconstructor passes (defaults to the training depth).
    #[arg(long)]
    n_re: Option<usize>,
    /// Output directory (defaults to the input's directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Output encoding: float or pcm16.
    #[arg(long, default_value = "float")]
    encoding: String,
    /// Input mixture (mono, 8 kHz).
    input: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Model name like `sep1x2-re1x3(6)`; must match the checkpoint's
    /// layout, and its parenthesized value selects the inference depth.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    n_sep: Option<usize>,
    #[arg(long)]
    n_re: Option<usize>,
    /// Report format: csv or text.
    #[arg(long, default_value = "text")]
    format: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    n_sep: Option<usize>,
    /// Inference depths: a single value or an inclusive range `a:b`.
    #[arg(long)]
    n_re: String,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also render the scaling curve as an SVG.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    rtf_repeats: usize,
}

/// Usage problems exit 1; failures during an otherwise valid run exit 2.
enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait IntoCli<T> {
    fn usage(self) -> Result<T, CliError>;
    fn runtime(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> IntoCli<T> for Result<T, E> {
    fn usage(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successes.
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let result = match cli.cmd {
        Cmd::Dataset(a) => cmd_dataset(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Separate(a) => cmd_separate(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn parse_range(text: &str) -> anyhow::Result<(f64, f64)> {
    let (a, b) = text
        .split_once(':')
        .with_context(|| format!("expected 'lo:hi', got '{text}'"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn parse_depth_list(text: &str) -> anyhow::Result<Vec<usize>> {
    let list: Vec<usize> = match text.split_once(':') {
        Some((a, b)) => {
            let a: usize = a.trim().parse().context("bad depth range start")?;
            let b: usize = b.trim().parse().context("bad depth range end")?;
            if a > b {
                bail!("depth range start {a} exceeds end {b}");
            }
            (a..=b).collect()
        }
        None => vec![text.trim().parse().context("bad depth")?],
    };
    if list.iter().any(|&d| d < 1) {
        bail!("depths must be >= 1");
    }
    Ok(list)
}

fn parse_split(text: &str) -> anyhow::Result<Split> {
    match text {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split '{other}'"),
    }
}

fn load_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    Ok(manifest_from_str(&text)?)
}

fn load_run_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    cfg.model.validate()?;
    cfg.loss.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn cmd_dataset(a: DatasetArgs) -> Result<(), CliError> {
    let snr_range = parse_range(&a.snr_range).usage()?;
    let gen = GenParams {
        speakers: a.speakers,
        duration: a.duration,
        snr_range,
        noise_snr_db: a.noise_snr,
        sample_rate: 8000,
    };
    let mut spec = DatasetSpec::new(a.train, a.val, a.test, gen);
    for b in spec.seed_bases.iter_mut() {
        *b += a.seed;
    }
    let mut manifest = build_dataset(&spec).usage()?;
    if let Some(dir) = &a.audio_dir {
        std::fs::create_dir_all(dir).runtime()?;
        let entries: Vec<ManifestEntry> = manifest.entries.clone();
        for (idx, entry) in entries.into_iter().enumerate() {
            let ex = manifest.example(&entry).runtime()?;
            let stem = format!("{}_{}", entry.split.name(), entry.seed);
            write_wav(
                &dir.join(format!("{stem}.mix.wav")),
                &ex.mixture,
                WavEncoding::Float32,
            )
            .runtime()?;
            for (j, s) in ex.sources.iter().enumerate() {
                write_wav(
                    &dir.join(format!("{stem}.spk{}.wav", j + 1)),
                    s,
                    WavEncoding::Float32,
                )
                .runtime()?;
            }
            manifest.entries[idx].path =
                Some(dir.join(&stem).to_string_lossy().into_owned());
        }
    }
    std::fs::write(&a.out, manifest_to_string(&manifest)).runtime()?;
    println!(
        "wrote manifest with {} entries to {}",
        manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(&a.config).usage()?;
    if let Some(name) = &a.name {
        let parsed = model_name::parse_model_name(name).usage()?;
        cfg.model.m_sep = parsed.m_sep;
        cfg.model.n_sep = parsed.n_sep;
        cfg.model.m_re = parsed.m_re;
        cfg.model.n_re = parsed.n_re;
        if let Some(label) = &parsed.loss_label {
            cfg.loss = LossConfig::from_label(label).usage()?;
        }
        cfg.model.validate().usage()?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let manifest = load_manifest(&a.manifest).usage()?;
    let run = train(&cfg.model, &cfg.loss, &cfg.train, &manifest, Some(&a.out)).runtime()?;
    let best = run.best_checkpoint();
    println!(
        "trained {} epochs (stopped_early={}), best val loss {:.4} at epoch {}",
        run.checkpoints.len(),
        run.stopped_early,
        best.val_loss,
        best.epoch
    );
    println!(
        "averaged model saved under {}",
        a.out.join("averaged").display()
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<(), CliError> {
    let base = load_checkpoint(&a.from).usage()?;
    let manifest = load_manifest(&a.manifest).usage()?;
    let depths = (a.n_sep.unwrap_or(base.depths.0), a.n_re);
    let mut train_cfg = base.train.clone();
    train_cfg.max_epochs = a
        .epochs
        .unwrap_or_else(|| default_finetune_epochs(base.train.max_epochs));
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    let loss_cfg = base.loss.clone();
    let run = finetune(&base, depths, &loss_cfg, &train_cfg, &manifest, Some(&a.out)).runtime()?;
    println!(
        "fine-tuned to depths ({}, {}) for {} epochs, best val loss {:.4}",
        depths.0,
        depths.1,
        run.checkpoints.len(),
        run.best_checkpoint().val_loss
    );
    Ok(())
}

fn cmd_separate(a: SeparateArgs) -> Result<(), CliError> {
    let encoding: WavEncoding = a.encoding.parse().usage()?;
    let ckpt = load_checkpoint(&a.ckpt).usage()?;
    let input = read_wav(&a.input).usage()?;
    let n_sep = a.n_sep.unwrap_or(ckpt.depths.0);
    let n_re = a.n_re.unwrap_or(ckpt.depths.1);
    let out = forward(&ckpt.params, &input, n_sep, n_re, false).runtime()?;
    let dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| a.input.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir).runtime()?;
    let stem = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    for (j, wavef) in out.waves.iter().enumerate() {
        let path = dir.join(format!("{stem}.spk{}.wav", j + 1));
        write_wav(&path, wavef, encoding).runtime()?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt).usage()?;
    let manifest = load_manifest(&a.manifest).usage()?;
    let split = parse_split(&a.split).usage()?;
    let format: ReportFormat = a.format.parse().usage()?;
    let mut default_n_re = ckpt.depths.1;
    if let Some(name) = &a.name {
        let parsed = model_name::parse_model_name(name).usage()?;
        let cfg = &ckpt.params.config;
        if (parsed.m_sep, parsed.n_sep, parsed.m_re, parsed.n_re)
            != (cfg.m_sep, cfg.n_sep, cfg.m_re, cfg.n_re)
        {
            return Err(CliError::Usage(anyhow::anyhow!(
                "name '{name}' does not match checkpoint layout sep{}x{}-re{}x{}",
                cfg.m_sep,
                cfg.n_sep,
                cfg.m_re,
                cfg.n_re
            )));
        }
        default_n_re = parsed.effective_inference_n_re();
    }
    let n_sep = a.n_sep.unwrap_or(ckpt.depths.0);
    let n_re = a.n_re.unwrap_or(default_n_re);
    let ev = evaluate(&ckpt.params, &manifest, split, n_sep, n_re).runtime()?;
    let rendered = match format {
        ReportFormat::Csv => {
            let mut s = String::from("seed,si_snri_db,sdri_db\n");
            for r in &ev.per_utterance {
                s.push_str(&format!(
                    "{},{:.6},{:.6}\n",
                    r.seed, r.si_snri_db, r.sdri_db
                ));
            }
            s
        }
        ReportFormat::Text => format!(
            "split {} ({} utterances) at depths ({n_sep}, {n_re})\n\
             mean SI-SNRi   {:>8.3} dB\n\
             median SI-SNRi {:>8.3} dB\n\
             mean SDRi      {:>8.3} dB\n",
            split.name(),
            ev.utterance_count,
            ev.mean_si_snri_db,
            ev.median_si_snri_db,
            ev.mean_sdri_db
        ),
    };
    match &a.out {
        Some(p) => std::fs::write(p, rendered).runtime()?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt).usage()?;
    let manifest = load_manifest(&a.manifest).usage()?;
    let split = parse_split(&a.split).usage()?;
    let format: ReportFormat = a.format.parse().usage()?;
    let depths = parse_depth_list(&a.n_re).usage()?;
    let n_sep = a.n_sep.unwrap_or(ckpt.depths.0);
    let label = ModelName {
        m_sep: ckpt.params.config.m_sep,
        n_sep: ckpt.params.config.n_sep,
        m_re: ckpt.params.config.m_re,
        n_re: ckpt.params.config.n_re,
        inference_n_re: None,
        loss_label: Some(ckpt.loss_label.clone()),
    }
    .format();
    let report = sweep(
        &ckpt.params,
        &manifest,
        split,
        n_sep,
        &depths,
        a.rtf_repeats,
        &label,
    )
    .runtime()?;
    let rendered = eval::render_report(&report, format);
    match &a.out {
        Some(p) => std::fs::write(p, rendered).runtime()?,
        None => print!("{rendered}"),
    }
    if let Some(plot) = &a.plot {
        emit_sweep_svg(std::slice::from_ref(&report), plot).runtime()?;
        println!("plot written to {}", plot.display());
    }
    Ok(())
}

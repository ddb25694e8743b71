//! Command-line front end: train, encode, decode, analyze and eval.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use monoq::analysis::{
    index_distribution, mel_distance_eval, write_distribution_csv, write_mel_eval_csv,
};
use monoq::bitstream;
use monoq::dsp;
use monoq::training::{load_codec, DataSource, DatasetManifest, TrainSetup, Trainer};

#[derive(Parser)]
#[command(name = "monoq", version, about = "Single-quantizer neural audio codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec from a config file and a dataset manifest.
    Train(TrainArgs),
    /// Encode a wav file into a token stream.
    Encode(EncodeArgs),
    /// Decode a token stream back into a wav file.
    Decode(DecodeArgs),
    /// Codebook-utilization analysis over a manifest.
    Analyze(AnalyzeArgs),
    /// Mel-distance evaluation between paired reference/degraded dirs.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training setup, TOML or YAML by extension.
    #[arg(long)]
    config: PathBuf,
    /// Tab-separated manifest: path, duration, split.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint and metrics.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Steps to run this session (defaults to the schedule's total).
    #[arg(long)]
    steps: Option<u64>,
    /// Save an intermediate checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Manifest split used for training.
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct EncodeArgs {
    /// Input wav file (mono, 16-bit PCM or 32-bit float).
    input: PathBuf,
    /// Output token-stream path.
    #[arg(short, long)]
    output: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Print the real-time factor (total time / audio duration).
    #[arg(long)]
    rtf: bool,
}

#[derive(Args)]
struct DecodeArgs {
    /// Input token-stream file.
    input: PathBuf,
    /// Output wav path.
    #[arg(short, long)]
    output: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Print the real-time factor (total time / audio duration).
    #[arg(long)]
    rtf: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest describing the corpus to encode.
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV of the index distribution.
    #[arg(short, long)]
    output: PathBuf,
    /// Restrict to one manifest split (defaults to every entry).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of reference wav files.
    #[arg(long)]
    r#ref: PathBuf,
    /// Directory of degraded wav files paired by name.
    #[arg(long)]
    deg: PathBuf,
    /// Output CSV (per-file rows plus mean/std).
    #[arg(short, long)]
    output: PathBuf,
    /// Sample rate used for comparison.
    #[arg(long, default_value_t = 24000)]
    sample_rate: u32,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::Encode(args) => encode(args),
        Command::Decode(args) => decode(args),
        Command::Analyze(args) => analyze(args),
        Command::Eval(args) => eval(args),
    }
}

fn load_setup(path: &Path) -> Result<TrainSetup> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let setup: TrainSetup = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).context("parsing TOML config")?,
        Some("yaml") | Some("yml") => serde_yaml::from_str(&text).context("parsing YAML config")?,
        other => bail!("unsupported config extension {other:?}; use .toml or .yaml"),
    };
    Ok(setup)
}

fn train(args: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    std::fs::create_dir_all(&args.out)?;

    let mut trainer = match &args.resume {
        Some(ckpt) => {
            eprintln!("resuming from {}", ckpt.display());
            Trainer::load_checkpoint(ckpt)?
        }
        None => Trainer::new(load_setup(&args.config)?)?,
    };
    let sample_rate = trainer.setup.model.sample_rate;
    let source = match DataSource::from_manifest(&manifest, &args.split, sample_rate) {
        Ok(s) => s,
        Err(_) => {
            eprintln!(
                "manifest has no {:?} entries; training on all {} entries",
                args.split,
                manifest.entries.len()
            );
            let clips = manifest
                .entries
                .iter()
                .map(|e| dsp::read_wav(&e.path, sample_rate))
                .collect::<monoq::Result<Vec<_>>>()?;
            DataSource::from_clips(clips)?
        }
    };

    trainer.stream_metrics_to(args.out.join("metrics.csv"))?;
    let total = trainer.setup.train.total_steps;
    let remaining = total.saturating_sub(trainer.step());
    let todo = args.steps.unwrap_or(remaining).min(remaining);
    eprintln!(
        "training {todo} steps (at step {}, schedule total {total}, {} clips)",
        trainer.step(),
        source.len()
    );

    trainer.ensure_codebook_init(&source)?;
    let chunk = args.checkpoint_every.unwrap_or(todo.max(1));
    let mut done = 0;
    while done < todo {
        let n = chunk.min(todo - done);
        let reports = trainer.train_steps(n, &source)?;
        if let Some((step, report)) = reports.last() {
            eprintln!(
                "step {step}: total {:.4}, codebook utilization {:.3}",
                report.total(),
                trainer.utilization()
            );
        }
        done += n;
        trainer.save_checkpoint(args.out.join("latest.ckpt"))?;
    }
    let final_path = args.out.join("final.ckpt");
    trainer.save_checkpoint(&final_path)?;
    eprintln!("saved {}", final_path.display());
    Ok(())
}

fn encode(args: EncodeArgs) -> Result<()> {
    let (codec, _) = load_codec(&args.ckpt)?;
    let start = Instant::now();
    let audio = dsp::read_wav(&args.input, codec.config.sample_rate)?;
    let stream = bitstream::encode_audio(&audio, &codec)?;
    bitstream::write_tokens(&stream, &args.output)?;
    let elapsed = start.elapsed();
    eprintln!(
        "{} -> {} tokens ({} tokens/s, {:.3} kbps)",
        args.input.display(),
        stream.num_frames(),
        stream.token_rate(),
        stream.bitrate_kbps()?,
    );
    if args.rtf {
        println!("RTF: {:.6}", elapsed.as_secs_f64() / audio.duration_seconds());
    }
    Ok(())
}

fn decode(args: DecodeArgs) -> Result<()> {
    let (codec, _) = load_codec(&args.ckpt)?;
    let start = Instant::now();
    let stream = bitstream::read_tokens(&args.input)?;
    let audio = bitstream::decode_stream(&stream, &codec)?;
    dsp::write_wav(&args.output, &audio)?;
    let elapsed = start.elapsed();
    eprintln!(
        "{} -> {} samples @ {} Hz",
        args.input.display(),
        audio.len(),
        audio.sample_rate
    );
    if args.rtf {
        println!("RTF: {:.6}", elapsed.as_secs_f64() / audio.duration_seconds());
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let (codec, _) = load_codec(&args.ckpt)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let source = match &args.split {
        Some(split) => DataSource::from_manifest(&manifest, split, codec.config.sample_rate)?,
        None => {
            let clips = manifest
                .entries
                .iter()
                .map(|e| dsp::read_wav(&e.path, codec.config.sample_rate))
                .collect::<monoq::Result<Vec<_>>>()?;
            DataSource::from_clips(clips)?
        }
    };
    let report = index_distribution(&codec, &source, args.split.as_deref().unwrap_or("all"))?;
    let file = std::fs::File::create(&args.output)?;
    write_distribution_csv(&report, file)?;
    println!(
        "frames {} utilization {:.4} entropy {:.3} bits (log2 V = {:.3})",
        report.total_frames,
        report.utilization,
        report.entropy_bits,
        (codec.config.vq.codebook_size as f64).log2()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let spectral = dsp::SpectralConfig::hann(1024, 256);
    let mel = dsp::MelConfig::for_loss(args.sample_rate);
    let report = mel_distance_eval(&args.r#ref, &args.deg, args.sample_rate, &spectral, &mel)?;
    for name in &report.unpaired {
        eprintln!("warning: unpaired file skipped: {name}");
    }
    let file = std::fs::File::create(&args.output)?;
    write_mel_eval_csv(&report, file)?;
    println!("pairs {} mean {:.6} std {:.6}", report.rows.len(), report.mean, report.std);
    Ok(())
}

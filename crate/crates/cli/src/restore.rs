use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::Serialize;
use tfrestore_core::nn::load_checkpoint;
use tfrestore_core::restormer::{output_len, Mode, Model};
use tfrestore_core::sfi_stft::{Waveform, HOP_MS};
use tfrestore_core::wav::{read_wav, write_wav, WavFormat};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Pcm16,
    Pcm24,
    Float32,
}

impl From<FormatArg> for WavFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Pcm16 => WavFormat::Pcm16,
            FormatArg::Pcm24 => WavFormat::Pcm24,
            FormatArg::Float32 => WavFormat::Float32,
        }
    }
}

/// Restore one file at a chosen output rate.
#[derive(Debug, Args)]
pub struct RestoreArgs {
    /// Degraded input WAV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Restored output WAV.
    #[arg(long)]
    out: PathBuf,
    /// Output sample rate in Hz.
    #[arg(long)]
    rate: u32,
    /// Generator checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Config file whose [train.model] section must match the checkpoint;
    /// without it the config stored in the checkpoint is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run frame by frame and report per-frame wall time and real-time factor.
    #[arg(long)]
    streaming: bool,
    #[arg(long, value_enum, default_value = "float32")]
    format: FormatArg,
}

/// Run a streaming model frame by frame, as a live session would.
#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rate: u32,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV with one row of timing per input frame.
    #[arg(long)]
    timings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "float32")]
    format: FormatArg,
}

fn load_model(ckpt: &Path, config: Option<&Path>) -> Result<Model> {
    let cfg = match config {
        Some(p) => Some(RunConfig::load(p)?.train.model),
        None => None,
    };
    let c = load_checkpoint(ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
    Model::from_checkpoint(&c, cfg).map_err(|e| CliError::from(e).context(&ckpt.display().to_string()))
}

fn check_finite(w: &Waveform) -> Result<()> {
    if w.samples.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numeric("restored signal contains non-finite samples".into()))
    }
}

#[derive(Debug, Serialize)]
struct FrameTiming {
    frame: usize,
    emitted: usize,
    wall_ms: f64,
}

/// Frame-by-frame restoration with the wall time of every pushed chunk.
fn stream_through(model: &Model, x: &Waveform, f_d: u32) -> Result<(Waveform, Vec<FrameTiming>)> {
    let mut session = model.stream_session(x.sample_rate, f_d)?;
    let hop = session.hop();
    let mut padded = x.samples.clone();
    padded.resize(x.len().div_ceil(hop) * hop, 0.0);
    let mut out = Vec::new();
    let mut timings = Vec::new();
    for (frame, chunk) in padded.chunks(hop).enumerate() {
        let t0 = Instant::now();
        let emitted = session.stream_step(chunk)?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let n = emitted.as_ref().map_or(0, |f| f.samples.len());
        if let Some(f) = emitted {
            out.extend(f.samples);
        }
        timings.push(FrameTiming { frame, emitted: n, wall_ms });
    }
    for f in session.flush()? {
        out.extend(f.samples);
    }
    out.truncate(output_len(x.len(), x.sample_rate, f_d));
    Ok((Waveform::new(out, f_d), timings))
}

fn report_timing(timings: &[FrameTiming], duration_s: f64, latency_ms: f64) {
    let total: f64 = timings.iter().map(|t| t.wall_ms).sum();
    let max = timings.iter().map(|t| t.wall_ms).fold(0.0, f64::max);
    let mean = total / timings.len().max(1) as f64;
    println!(
        "frames {}  per-frame mean {mean:.3} ms  max {max:.3} ms  (hop {HOP_MS} ms)",
        timings.len()
    );
    println!("RTF {:.4}  algorithmic latency {latency_ms} ms", total / 1e3 / duration_s.max(f64::MIN_POSITIVE));
}

pub fn run(args: RestoreArgs) -> Result<()> {
    let model = load_model(&args.ckpt, args.config.as_deref())?;
    let x = read_wav(&args.input)?;
    let y = if args.streaming {
        if model.cfg.mode != Mode::Streaming {
            return Err(CliError::Usage("--streaming needs a checkpoint of a streaming model".into()));
        }
        let latency = model.stream_session(x.sample_rate, args.rate)?.latency_ms();
        let (y, timings) = stream_through(&model, &x, args.rate)?;
        report_timing(&timings, x.duration_secs(), latency);
        y
    } else {
        let t0 = Instant::now();
        let y = model.restore(&x, args.rate)?;
        println!("RTF {:.4}", t0.elapsed().as_secs_f64() / x.duration_secs().max(f64::MIN_POSITIVE));
        y
    };
    check_finite(&y)?;
    write_wav(&args.out, &y, args.format.into())?;
    println!("wrote {} ({} samples at {} Hz)", args.out.display(), y.len(), y.sample_rate);
    Ok(())
}

pub fn run_stream(args: StreamArgs) -> Result<()> {
    let model = load_model(&args.ckpt, args.config.as_deref())?;
    if model.cfg.mode != Mode::Streaming {
        return Err(CliError::Usage("stream needs a checkpoint of a streaming model".into()));
    }
    let x = read_wav(&args.input)?;
    let latency = model.stream_session(x.sample_rate, args.rate)?.latency_ms();
    let (y, timings) = stream_through(&model, &x, args.rate)?;
    report_timing(&timings, x.duration_secs(), latency);
    if let Some(path) = &args.timings {
        let mut w = csv::Writer::from_path(path)?;
        for t in &timings {
            w.serialize(t)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    check_finite(&y)?;
    write_wav(&args.out, &y, args.format.into())?;
    println!("wrote {} ({} samples at {} Hz)", args.out.display(), y.len(), y.sample_rate);
    Ok(())
}

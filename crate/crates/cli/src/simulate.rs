use std::path::PathBuf;

use clap::Args;
use tfrestore_core::degrade::{load_assets, load_wav_dir, simulate_corpus, write_manifest, Split};
use tfrestore_core::wav::read_wav;

use crate::config::{require_dir, RunConfig};
use crate::error::{CliError, Result};

/// Degrade a directory of clean speech into input/target pairs and a manifest.
#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory of clean WAV files (one sample rate).
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    /// Directory of room impulse responses.
    #[arg(long)]
    rir_dir: Option<PathBuf>,
    /// Directory of noise recordings.
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    /// Output directory; receives input/, target/ and manifest.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Config file; its [degrade] section sets the recipe distribution.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of pairs to write; clean files are reused in order when it exceeds them.
    #[arg(long)]
    count: Option<usize>,
    /// Which split to record in the manifest.
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

pub fn run(args: SimulateArgs, seed: u64, jobs: usize) -> Result<()> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let clean_dir = args
        .clean_dir
        .or(cfg.data.clean_dir)
        .ok_or_else(|| CliError::Usage("--clean-dir is required (or [data] clean_dir)".into()))?;
    let rir_dir = args.rir_dir.or(cfg.data.rir_dir);
    let noise_dir = args.noise_dir.or(cfg.data.noise_dir);
    require_dir(&clean_dir, "clean")?;
    for (dir, what) in [(&rir_dir, "RIR"), (&noise_dir, "noise")] {
        if let Some(d) = dir {
            require_dir(d, what)?;
        }
    }
    cfg.degrade.validate()?;

    let files = load_wav_dir(&clean_dir)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no WAV files in {}", clean_dir.display())));
    }
    let rate = clean_rate(&files)?;
    let assets = load_assets(rir_dir.as_deref(), noise_dir.as_deref(), rate)?;
    let clean = expand(&files, args.count.unwrap_or(files.len()));
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    };
    let records = simulate_corpus(&clean, &assets, &cfg.degrade, seed, &args.out_dir, split, jobs)
        .map_err(|e| CliError::from(e).context("simulation"))?;
    let manifest = args.out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    println!("wrote {} pairs to {}", records.len(), manifest.display());
    Ok(())
}

/// The common sample rate of all clean files.
fn clean_rate(files: &[(String, PathBuf)]) -> Result<u32> {
    let mut rate = None;
    for (_, p) in files {
        let r = read_wav(p)?.sample_rate;
        match rate {
            None => rate = Some(r),
            Some(q) if q != r => {
                return Err(CliError::Data(format!(
                    "clean files have mixed rates ({q} Hz and {r} Hz at {}); resample them first",
                    p.display()
                )))
            }
            _ => {}
        }
    }
    Ok(rate.expect("nonempty file list"))
}

/// `count` entries cycling over `files`; repeats get a `_<k>` suffix.
fn expand(files: &[(String, PathBuf)], count: usize) -> Vec<(String, PathBuf)> {
    (0..count)
        .map(|i| {
            let (id, p) = &files[i % files.len()];
            let k = i / files.len();
            let id = if k == 0 { id.clone() } else { format!("{id}_{k}") };
            (id, p.clone())
        })
        .collect()
}

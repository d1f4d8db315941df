use std::path::PathBuf;

use clap::Args;
use tfrestore_core::adversary::DiscriminatorBank;
use tfrestore_core::degrade::{load_assets, load_wav_dir};
use tfrestore_core::nn::load_checkpoint;
use tfrestore_core::restormer::Model;
use tfrestore_core::trainer::{MemorySource, PairSource, SimulatedSource, Trainer, DISC_SEED_OFFSET};
use tfrestore_core::wav::read_wav;

use crate::config::{require_dir, RunConfig};
use crate::error::{CliError, Result};

/// Train the generator (and discriminators in the adversarial stage).
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file with [train], [degrade] and [data] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; receives log.csv and checkpoints/.
    #[arg(long)]
    out_dir: PathBuf,
    /// Training manifest of pre-simulated pairs.
    #[arg(long, conflicts_with = "clean_dir")]
    manifest: Option<PathBuf>,
    /// Clean WAV directory, degraded on the fly.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    #[arg(long)]
    rir_dir: Option<PathBuf>,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    /// Checkpoint directory to resume from (generator, discriminator and optimizer state).
    #[arg(long, conflicts_with = "init_generator")]
    resume: Option<PathBuf>,
    /// Generator checkpoint to start from, e.g. a pretrained model for the adversarial stage.
    #[arg(long)]
    init_generator: Option<PathBuf>,
    /// Override the number of steps from the config.
    #[arg(long)]
    steps: Option<u64>,
}

pub fn run(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.train.steps = n;
    }
    cfg.train.validate()?;

    let mut trainer = match (&args.resume, &args.init_generator) {
        (Some(dir), _) => Trainer::load(dir, args.config.is_some().then(|| cfg.train.clone()))
            .map_err(|e| CliError::from(e).context("resume"))?,
        (None, Some(path)) => {
            let model = Model::from_checkpoint(&load_checkpoint(path)?, Some(cfg.train.model.clone()))
                .map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
            let disc = DiscriminatorBank::build(cfg.train.disc.clone(), cfg.train.seed.wrapping_add(DISC_SEED_OFFSET))?;
            Trainer::from_parts(cfg.train.clone(), model, disc)?
        }
        (None, None) => Trainer::new(cfg.train.clone())?,
    };

    let manifest = args.manifest.or(cfg.data.manifest.clone());
    let clean_dir = args.clean_dir.or(cfg.data.clean_dir.clone());
    let mut source: Box<dyn PairSource> = match (manifest, clean_dir) {
        (Some(m), _) => Box::new(MemorySource::from_manifest(&m)?),
        (None, Some(dir)) => {
            require_dir(&dir, "clean")?;
            let rir_dir = args.rir_dir.or(cfg.data.rir_dir.clone());
            let noise_dir = args.noise_dir.or(cfg.data.noise_dir.clone());
            for (d, what) in [(&rir_dir, "RIR"), (&noise_dir, "noise")] {
                if let Some(d) = d {
                    require_dir(d, what)?;
                }
            }
            let mut clean = Vec::new();
            for (id, p) in load_wav_dir(&dir)? {
                clean.push((id, read_wav(&p)?));
            }
            let rate = clean.first().map(|(_, w)| w.sample_rate).ok_or_else(|| {
                CliError::Data(format!("no WAV files in {}", dir.display()))
            })?;
            if let Some((id, w)) = clean.iter().find(|(_, w)| w.sample_rate != rate) {
                return Err(CliError::Data(format!(
                    "clean files have mixed rates ({rate} Hz and {} Hz for `{id}`)",
                    w.sample_rate
                )));
            }
            let assets = load_assets(rir_dir.as_deref(), noise_dir.as_deref(), rate)?;
            Box::new(SimulatedSource { clean, assets, cfg: cfg.degrade.clone() })
        }
        (None, None) if trainer.step >= trainer.cfg.steps => Box::new(MemorySource::default()),
        (None, None) => return Err(CliError::Usage("training data needs --manifest or --clean-dir".into())),
    };

    let summary = trainer.run(source.as_mut(), &args.out_dir)?;
    if let Some(last) = summary.reports.last() {
        println!(
            "step {} stage {:?} loss {:.6} lr {:.3e}",
            last.step, last.stage, last.loss.total, last.lr
        );
    }
    let last_ckpt = summary.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default();
    println!("finished at step {}; last checkpoint {last_ckpt}", summary.final_step);
    Ok(())
}

//! Corpus-level simulation and the JSON Lines manifest that links each clean
//! utterance to its degraded input, target and recipe.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{simulate, stream_rng, DegradeAssets, DegradeConfig, DegradeError, DegradeRecipe};
use crate::sfi_stft::{resample, Waveform};
use crate::wav::{read_wav, write_wav, WavFormat};

/// Streams at and above this offset derive per-utterance seeds.
const UTTERANCE_STREAM_BASE: u64 = 1 << 32;

/// Which side of the train/eval boundary a manifest belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub clean_path: PathBuf,
    /// Relative paths resolve against the manifest's directory.
    pub input_path: PathBuf,
    pub target_path: PathBuf,
    pub f_e: u32,
    pub f_d: u32,
    pub recipe: DegradeRecipe,
}

impl ManifestRecord {
    pub fn resolve(&self, base: &Path) -> (PathBuf, PathBuf) {
        (base.join(&self.input_path), base.join(&self.target_path))
    }
}

/// Seed of utterance `index` in a corpus simulated with `seed`.
pub fn utterance_seed(seed: u64, index: usize) -> u64 {
    stream_rng(seed, UTTERANCE_STREAM_BASE + index as u64).next_u64()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DegradeError> {
    let io = |e: std::io::Error| DegradeError::Manifest(format!("{}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DegradeError::Manifest(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DegradeError> {
    let io = |e: std::io::Error| DegradeError::Manifest(format!("{}: {e}", path.display()));
    let f = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| DegradeError::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Every `.wav` file in `dir`, sorted by name, with the file stem as id.
pub fn load_wav_dir(dir: &Path) -> Result<Vec<(String, PathBuf)>, DegradeError> {
    let entries = fs::read_dir(dir).map_err(|e| DegradeError::Manifest(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads RIR and noise recordings, resampled to `rate`.
pub fn load_assets(rir_dir: Option<&Path>, noise_dir: Option<&Path>, rate: u32) -> Result<DegradeAssets, DegradeError> {
    let load = |dir: Option<&Path>| -> Result<Vec<Waveform>, DegradeError> {
        let Some(dir) = dir else { return Ok(Vec::new()) };
        load_wav_dir(dir)?.into_iter().map(|(_, p)| Ok(resample(&read_wav(&p)?, rate))).collect()
    };
    Ok(DegradeAssets { rirs: load(rir_dir)?, noises: load(noise_dir)? })
}

/// Degrades every clean file into `out_dir/input` and `out_dir/target` and
/// returns the manifest records in input order. Work is split over `jobs`
/// threads; the result does not depend on `jobs`.
pub fn simulate_corpus(
    clean: &[(String, PathBuf)],
    assets: &DegradeAssets,
    cfg: &DegradeConfig,
    seed: u64,
    out_dir: &Path,
    split: Split,
    jobs: usize,
) -> Result<Vec<ManifestRecord>, DegradeError> {
    cfg.validate()?;
    for sub in ["input", "target"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| DegradeError::Manifest(format!("{}: {e}", out_dir.display())))?;
    }
    let jobs = jobs.clamp(1, clean.len().max(1));
    let one = |i: usize| -> Result<ManifestRecord, DegradeError> {
        let (id, path) = &clean[i];
        let w = read_wav(path)?;
        let pair = simulate(&w, assets, cfg, utterance_seed(seed, i))?;
        let input_path = PathBuf::from("input").join(format!("{id}.wav"));
        let target_path = PathBuf::from("target").join(format!("{id}.wav"));
        write_wav(out_dir.join(&input_path), &pair.input, WavFormat::Float32)?;
        write_wav(out_dir.join(&target_path), &pair.target, WavFormat::Float32)?;
        Ok(ManifestRecord {
            id: id.clone(),
            split,
            clean_path: path.clone(),
            input_path,
            target_path,
            f_e: pair.input.sample_rate,
            f_d: pair.target.sample_rate,
            recipe: pair.recipe,
        })
    };
    let mut slots: Vec<Option<Result<ManifestRecord, DegradeError>>> = (0..clean.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let one = &one;
                s.spawn(move || (w..clean.len()).step_by(jobs).map(|i| (i, one(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("simulation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

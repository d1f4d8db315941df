//! Paired training examples and where they come from.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};
use crate::degrade::{read_manifest, simulate, DegradeAssets, DegradeConfig, Split};
use crate::sfi_stft::{resample, StftParams, Waveform};
use crate::wav::read_wav;

/// A degraded input and its clean target, possibly at different rates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub id: String,
    pub input: Waveform,
    pub target: Waveform,
}

/// Supplies training pairs with a requested target rate.
pub trait PairSource {
    /// Draws one pair whose target is at `f_d`, or `None` if no item can be
    /// served at that rate.
    fn draw(&mut self, f_d: u32, rng: &mut ChaCha8Rng) -> Result<Option<TrainPair>>;
}

/// Pairs held in memory. A pair serves any `f_d` between its input rate and
/// its target rate; the target is resampled down when needed.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub pairs: Vec<TrainPair>,
}

impl MemorySource {
    pub fn new(pairs: Vec<TrainPair>) -> Self {
        Self { pairs }
    }

    /// Loads every record of a training manifest. Evaluation manifests are refused.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::new();
        for r in read_manifest(path)? {
            if r.split != Split::Train {
                return Err(TrainError::EvalManifest(format!("{}: record `{}` is not a training pair", path.display(), r.id)));
            }
            let (i, t) = r.resolve(base);
            pairs.push(TrainPair { id: r.id, input: read_wav(i)?, target: read_wav(t)? });
        }
        Ok(Self { pairs })
    }
}

impl PairSource for MemorySource {
    fn draw(&mut self, f_d: u32, rng: &mut ChaCha8Rng) -> Result<Option<TrainPair>> {
        let eligible: Vec<&TrainPair> =
            self.pairs.iter().filter(|p| p.input.sample_rate <= f_d && f_d <= p.target.sample_rate).collect();
        let Some(p) = eligible.choose(rng) else { return Ok(None) };
        Ok(Some(TrainPair { id: p.id.clone(), input: p.input.clone(), target: resample(&p.target, f_d) }))
    }
}

/// Degrades clean utterances on the fly with a fresh recipe per draw.
#[derive(Debug, Clone)]
pub struct SimulatedSource {
    pub clean: Vec<(String, Waveform)>,
    pub assets: DegradeAssets,
    pub cfg: DegradeConfig,
}

impl PairSource for SimulatedSource {
    fn draw(&mut self, f_d: u32, rng: &mut ChaCha8Rng) -> Result<Option<TrainPair>> {
        // input rates above f_d are dropped and the rest renormalized
        let rates: Vec<(u32, f64)> = self.cfg.downsample_rates.iter().copied().filter(|(r, _)| *r <= f_d).collect();
        let mass: f64 = rates.iter().map(|(_, p)| p).sum();
        let eligible: Vec<&(String, Waveform)> = self.clean.iter().filter(|(_, w)| w.sample_rate >= f_d).collect();
        if rates.is_empty() || mass <= 0.0 {
            return Ok(None);
        }
        let Some((id, clean)) = eligible.choose(rng) else { return Ok(None) };
        let mut cfg = self.cfg.clone();
        cfg.downsample_rates = rates.into_iter().map(|(r, p)| (r, p / mass)).collect();
        cfg.target_rates = vec![f_d];
        let pair = simulate(clean, &self.assets, &cfg, rng.next_u64())?;
        Ok(Some(TrainPair { id: id.clone(), input: pair.input, target: pair.target }))
    }
}

/// Cuts a random aligned excerpt of whole analysis frames, at most
/// `segment_seconds` long. Returns `None` for pairs shorter than one hop.
pub fn crop_pair(pair: &TrainPair, segment_seconds: f64, rng: &mut ChaCha8Rng) -> Result<Option<TrainPair>> {
    let p_e = StftParams::for_rate(pair.input.sample_rate)?;
    let p_d = StftParams::for_rate(pair.target.sample_rate)?;
    let available = pair.input.len() / p_e.hop;
    if available == 0 {
        return Ok(None);
    }
    let wanted = ((segment_seconds * pair.input.sample_rate as f64) as usize / p_e.hop).max(1);
    let frames = wanted.min(available);
    let start = if available > frames { rng.gen_range(0..=available - frames) } else { 0 };
    let input = pair.input.samples[start * p_e.hop..(start + frames) * p_e.hop].to_vec();
    let mut target = vec![0.0; frames * p_d.hop];
    let from = (start * p_d.hop).min(pair.target.len());
    let to = ((start + frames) * p_d.hop).min(pair.target.len());
    target[..to - from].copy_from_slice(&pair.target.samples[from..to]);
    Ok(Some(TrainPair {
        id: pair.id.clone(),
        input: Waveform::new(input, pair.input.sample_rate),
        target: Waveform::new(target, pair.target.sample_rate),
    }))
}

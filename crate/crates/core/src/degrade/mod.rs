//! Paired training data: a clean utterance goes through physical distortions
//! (reverberation, noise, occlusion filtering, leveling) and digital ones
//! (clipping and effects, codec, spectral masks) before downsampling.
//!
//! Sampling a [`DegradeRecipe`] is separate from applying it, so any pair can
//! be regenerated bit-exactly from its recipe and the same assets.

mod codec;
mod config;
mod manifest;
mod stages;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use codec::{codec_stage, codec_surrogate, CodecChoice, CodecRealization};
pub use config::{
    BpfStage, CodecBackend, CodecStage, ColoredNoiseStage, DegradeConfig, IntStage, MaskStage, NoiseStage, OggEncoder,
    ScalarStage, SurrogateMap,
};
pub use manifest::{
    load_assets, load_wav_dir, read_manifest, simulate_corpus, utterance_seed, write_manifest, ManifestRecord, Split,
};
pub use stages::{
    apply_rir, bitcrush, clip, colored_noise, crystalizer, fft_convolve, filter_same, firwin2, flanger, flanger_delay,
    loop_noise, lowpass, mix_noise, noise_gain, occlusion_bpf, spec_mask, zero_phase_kernel, DIRECT_PATH_MS,
};

use crate::sfi_stft::{resample, scale_to_dbfs, SfiError, StftParams, Waveform};

#[derive(Debug, thiserror::Error)]
pub enum DegradeError {
    #[error("room impulse response is empty or silent")]
    EmptyRir,
    #[error("noise is empty or silent")]
    SilentNoise,
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("invalid band: {0}")]
    InvalidBand(String),
    #[error("external codec failed: {0}")]
    ExternalToolFailed(String),
    #[error("invalid degradation config: {0}")]
    InvalidConfig(String),
    #[error("recipe does not match the assets: {0}")]
    AssetMismatch(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Wav(#[from] crate::wav::WavError),
    #[error(transparent)]
    Stft(#[from] SfiError),
}

/// Room responses and noise recordings the simulator draws from.
#[derive(Debug, Clone, Default)]
pub struct DegradeAssets {
    pub rirs: Vec<Waveform>,
    pub noises: Vec<Waveform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RirDraw {
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleNoiseDraw {
    pub index: usize,
    pub offset: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredNoiseDraw {
    pub beta: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpfDraw {
    pub f1_hz: f64,
    pub f2_hz: f64,
    pub cut_gain: f64,
    pub beta: f64,
    /// Tap count at the design rate.
    pub taps: usize,
    /// Tap count used at the signal rate.
    pub taps_applied: usize,
    /// `cut_gain^beta`, the single-pass stopband gain.
    pub nominal_stopband_gain: f64,
    /// Stopband gain after forward-backward filtering.
    pub effective_stopband_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecDraw {
    pub choice: CodecChoice,
    /// Filled in when the stage runs.
    pub realization: Option<CodecRealization>,
}

/// Every random decision for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeRecipe {
    pub seed: u64,
    pub source_rate: u32,
    pub input_rate: u32,
    pub target_rate: u32,
    pub rir: Option<RirDraw>,
    pub sample_noise: Option<SampleNoiseDraw>,
    pub colored_noise: Option<ColoredNoiseDraw>,
    pub bpf: Option<BpfDraw>,
    pub level_dbfs: f64,
    pub clip_level_db: Option<f64>,
    pub crystalizer_intensity: Option<f64>,
    pub flanger_depth_ms: Option<f64>,
    pub crusher_bits: Option<u32>,
    pub codec: Option<CodecDraw>,
    /// `(start_bin, width)` at the source rate's analysis grid.
    pub freq_masks: Vec<(usize, usize)>,
    /// `(start_frame, width)`.
    pub time_masks: Vec<(usize, usize)>,
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn coin<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.gen::<f64>() < p
}

/// PRNG for one `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const RECIPE_STREAM: u64 = 0;
const COLORED_NOISE_STREAM: u64 = 1;

/// Draws every stage decision for an utterance of `len` samples at `source_rate`.
pub fn sample_recipe(
    cfg: &DegradeConfig,
    assets: &DegradeAssets,
    len: usize,
    source_rate: u32,
    seed: u64,
) -> Result<DegradeRecipe, DegradeError> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, RECIPE_STREAM);
    let rng = &mut rng;

    let rir = if coin(rng, cfg.rir_prob) && !assets.rirs.is_empty() {
        Some(RirDraw { index: rng.gen_range(0..assets.rirs.len()) })
    } else {
        None
    };
    let sample_noise = if coin(rng, cfg.sample_noise.prob) && !assets.noises.is_empty() {
        let index = rng.gen_range(0..assets.noises.len());
        let offset = rng.gen_range(0..assets.noises[index].len().max(1));
        Some(SampleNoiseDraw { index, offset, snr_db: uniform(rng, cfg.sample_noise.snr_db_range) })
    } else {
        None
    };
    let colored_noise = coin(rng, cfg.colored_noise.prob).then(|| ColoredNoiseDraw {
        beta: uniform(rng, cfg.colored_noise.beta_range),
        snr_db: uniform(rng, cfg.colored_noise.snr_db_range),
    });
    let bpf = coin(rng, cfg.bpf.prob).then(|| {
        let b = &cfg.bpf;
        let f1 = uniform(rng, b.f1_hz_range);
        let f2 = f1 + uniform(rng, b.f2_offset_range);
        let cut_gain = uniform(rng, b.cut_gain_range);
        let beta = uniform(rng, b.beta_range);
        let odd: Vec<usize> = (b.taps_range[0]..=b.taps_range[1]).filter(|t| t % 2 == 1).collect();
        let taps = if odd.is_empty() { b.taps_range[0] | 1 } else { odd[rng.gen_range(0..odd.len())] };
        let scaled = (taps as f64 * source_rate as f64 / b.design_rate as f64).round() as usize;
        let nominal = cut_gain.powf(beta);
        BpfDraw {
            f1_hz: f1,
            f2_hz: f2,
            cut_gain,
            beta,
            taps,
            taps_applied: scaled | 1,
            nominal_stopband_gain: nominal,
            effective_stopband_gain: nominal * nominal,
        }
    });
    let level_dbfs = uniform(rng, cfg.level_dbfs_range);
    let clip_level_db = coin(rng, cfg.clip.prob).then(|| uniform(rng, cfg.clip.range));
    let crystalizer_intensity = coin(rng, cfg.crystalizer.prob).then(|| uniform(rng, cfg.crystalizer.range));
    let flanger_depth_ms = coin(rng, cfg.flanger.prob).then(|| uniform(rng, cfg.flanger.range));
    let crusher_bits = coin(rng, cfg.crusher.prob).then(|| rng.gen_range(cfg.crusher.range[0]..=cfg.crusher.range[1]));
    let codec = coin(rng, cfg.codec.prob).then(|| {
        let choice = if cfg.codec.ogg_encoders.is_empty() || coin(rng, cfg.codec.mp3_share) {
            CodecChoice::Mp3 { kbps: uniform(rng, cfg.codec.mp3_kbps_range) }
        } else {
            CodecChoice::Ogg { encoder: cfg.codec.ogg_encoders[rng.gen_range(0..cfg.codec.ogg_encoders.len())] }
        };
        CodecDraw { choice, realization: None }
    });

    let params = StftParams::for_rate(source_rate)?;
    let n_bins = params.n_bins;
    let n_frames = params.n_frames(len.max(1));
    let mut draw_masks = |stage: &MaskStage, extent: usize| -> Vec<(usize, usize)> {
        if !coin(rng, stage.prob) {
            return Vec::new();
        }
        let count = rng.gen_range(stage.count_range[0]..=stage.count_range[1]);
        (0..count)
            .map(|_| {
                let width = (rng.gen_range(stage.width_range[0]..=stage.width_range[1]) as usize).min(extent);
                let start = rng.gen_range(0..=extent - width);
                (start, width)
            })
            .collect()
    };
    let freq_masks = draw_masks(&cfg.freq_mask, n_bins);
    let time_masks = draw_masks(&cfg.time_mask, n_frames);

    let r: f64 = rng.gen();
    let mut acc = 0.0;
    let mut input_rate = cfg.downsample_rates.last().expect("validated").0;
    for &(rate, p) in &cfg.downsample_rates {
        acc += p;
        if r < acc {
            input_rate = rate;
            break;
        }
    }
    let targets: Vec<u32> = cfg.target_rates.iter().copied().filter(|&t| t <= source_rate).collect();
    let target_rate = if targets.is_empty() { source_rate } else { targets[rng.gen_range(0..targets.len())] };

    Ok(DegradeRecipe {
        seed,
        source_rate,
        input_rate,
        target_rate,
        rir,
        sample_noise,
        colored_noise,
        bpf,
        level_dbfs,
        clip_level_db,
        crystalizer_intensity,
        flanger_depth_ms,
        crusher_bits,
        codec,
        freq_masks,
        time_masks,
    })
}

/// Output of [`apply_recipe`] and [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct DegradedPair {
    pub input: Waveform,
    pub target: Waveform,
    pub recipe: DegradeRecipe,
}

/// Runs the stages a recipe selected, in pipeline order.
pub fn apply_recipe(
    clean: &Waveform,
    assets: &DegradeAssets,
    cfg: &DegradeConfig,
    recipe: &DegradeRecipe,
) -> Result<DegradedPair, DegradeError> {
    if clean.sample_rate != recipe.source_rate {
        return Err(DegradeError::RateMismatch(clean.sample_rate, recipe.source_rate));
    }
    let mut recipe = recipe.clone();
    let rate = clean.sample_rate;

    // physical distortions
    let (mut x, mut target) = match &recipe.rir {
        Some(d) => {
            let rir = assets.rirs.get(d.index).ok_or_else(|| DegradeError::AssetMismatch(format!("no RIR #{}", d.index)))?;
            apply_rir(clean, rir)?
        }
        None => (clean.clone(), clean.clone()),
    };
    // each noise source is scaled against the reverberant speech alone
    let reference = x.samples.clone();
    if let Some(d) = &recipe.sample_noise {
        let noise = assets.noises.get(d.index).ok_or_else(|| DegradeError::AssetMismatch(format!("no noise #{}", d.index)))?;
        if noise.sample_rate != rate {
            return Err(DegradeError::RateMismatch(noise.sample_rate, rate));
        }
        let n = loop_noise(&noise.samples, x.len(), d.offset)?;
        let g = noise_gain(&reference, &n, d.snr_db)?;
        x.samples.iter_mut().zip(&n).for_each(|(s, v)| *s += g * v);
    }
    if let Some(d) = &recipe.colored_noise {
        let mut rng = stream_rng(recipe.seed, COLORED_NOISE_STREAM);
        let n = colored_noise(x.len(), d.beta, rate, &mut rng);
        let g = noise_gain(&reference, &n.samples, d.snr_db)?;
        x.samples.iter_mut().zip(&n.samples).for_each(|(s, v)| *s += g * v);
    }
    if let Some(d) = &recipe.bpf {
        x = occlusion_bpf(&x, d.f1_hz, d.f2_hz, d.cut_gain, d.beta, d.taps_applied)?;
    }
    if x.samples.iter().any(|&v| v != 0.0) {
        let (leveled, gain) = scale_to_dbfs(&x, recipe.level_dbfs)?;
        x = leveled;
        target.samples.iter_mut().for_each(|v| *v *= gain);
    }

    // digital distortions
    if let Some(level) = recipe.clip_level_db {
        x = clip(&x, level);
    }
    if let Some(i) = recipe.crystalizer_intensity {
        x = crystalizer(&x, i);
    }
    if let Some(d) = recipe.flanger_depth_ms {
        x = flanger(&x, d);
    }
    if let Some(b) = recipe.crusher_bits {
        x = bitcrush(&x, b as f64);
    }
    if let Some(c) = recipe.codec.as_mut() {
        let (y, how) = codec_stage(&x, &c.choice, &cfg.codec)?;
        x = y;
        c.realization = Some(how);
    }
    if !recipe.freq_masks.is_empty() || !recipe.time_masks.is_empty() {
        x = spec_mask(&x, &recipe.freq_masks, &recipe.time_masks, &StftParams::for_rate(rate)?)?;
    }

    let input = resample(&x, recipe.input_rate);
    let target = resample(&target, recipe.target_rate);
    Ok(DegradedPair { input, target, recipe })
}

/// Samples a recipe and applies it.
pub fn simulate(clean: &Waveform, assets: &DegradeAssets, cfg: &DegradeConfig, seed: u64) -> Result<DegradedPair, DegradeError> {
    let recipe = sample_recipe(cfg, assets, clean.len(), clean.sample_rate, seed)?;
    apply_recipe(clean, assets, cfg, &recipe)
}

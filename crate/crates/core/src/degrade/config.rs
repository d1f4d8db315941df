use serde::{Deserialize, Serialize};

use super::DegradeError;

/// Inclusive `[low, high]` range.
pub type Range = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStage {
    pub prob: f64,
    pub snr_db_range: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredNoiseStage {
    pub prob: f64,
    pub snr_db_range: Range,
    pub beta_range: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpfStage {
    pub prob: f64,
    pub f1_hz_range: Range,
    pub f2_offset_range: Range,
    /// Open interval in the table; sampled as a closed one.
    pub cut_gain_range: Range,
    pub beta_range: Range,
    /// Odd tap counts in this range, at `design_rate`.
    pub taps_range: [usize; 2],
    /// Rate the tap range refers to; longer filters are used at higher rates.
    pub design_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarStage {
    pub prob: f64,
    pub range: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntStage {
    pub prob: f64,
    pub range: [u32; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OggEncoder {
    Vorbis,
    Opus,
}

/// How the codec stage is realized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CodecBackend {
    /// Bit-depth reduction plus lowpass, mapped from the nominal bit rate.
    Surrogate,
    /// Shell commands with `{in}`, `{out}`, `{kbps}`, `{encoder}` and `{rate}`
    /// placeholders. `encode` writes the compressed file, `decode` turns it back into WAV.
    External {
        mp3_encode: String,
        mp3_decode: String,
        ogg_encode: String,
        ogg_decode: String,
        #[serde(default)]
        fallback_to_surrogate: bool,
    },
}

/// Linear quality map from nominal bit rate to surrogate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateMap {
    /// `(kbps, bits, cutoff_hz)` at the low end.
    pub low: [f64; 3],
    /// `(kbps, bits, cutoff_hz)` at the high end.
    pub high: [f64; 3],
    /// Nominal bit rate standing in for each OGG encoder.
    pub vorbis_kbps: f64,
    pub opus_kbps: f64,
}

impl Default for SurrogateMap {
    fn default() -> Self {
        Self { low: [4.0, 4.0, 2500.0], high: [16.0, 8.0, 7000.0], vorbis_kbps: 16.0, opus_kbps: 12.0 }
    }
}

impl SurrogateMap {
    /// `(bits, cutoff_hz)` for a nominal bit rate, clamped to the mapped interval.
    pub fn params(&self, kbps: f64) -> (f64, f64) {
        let t = ((kbps - self.low[0]) / (self.high[0] - self.low[0])).clamp(0.0, 1.0);
        (self.low[1] + t * (self.high[1] - self.low[1]), self.low[2] + t * (self.high[2] - self.low[2]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecStage {
    pub prob: f64,
    /// Probability of MP3 given that a codec is applied; OGG otherwise.
    pub mp3_share: f64,
    pub mp3_kbps_range: Range,
    pub ogg_encoders: Vec<OggEncoder>,
    pub backend: CodecBackend,
    pub surrogate: SurrogateMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStage {
    pub prob: f64,
    pub width_range: [u32; 2],
    pub count_range: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeConfig {
    pub rir_prob: f64,
    pub sample_noise: NoiseStage,
    pub colored_noise: ColoredNoiseStage,
    pub bpf: BpfStage,
    pub level_dbfs_range: Range,
    pub clip: ScalarStage,
    pub crystalizer: ScalarStage,
    pub flanger: ScalarStage,
    pub crusher: IntStage,
    pub codec: CodecStage,
    /// Widths in frequency bins.
    pub freq_mask: MaskStage,
    /// Widths in frames.
    pub time_mask: MaskStage,
    /// `(rate, probability)` for the degraded input.
    pub downsample_rates: Vec<(u32, f64)>,
    /// Output rates drawn uniformly for the target.
    pub target_rates: Vec<u32>,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl DegradeConfig {
    /// Pretraining recipe.
    pub fn training() -> Self {
        Self {
            rir_prob: 0.5,
            sample_noise: NoiseStage { prob: 1.0, snr_db_range: [0.0, 20.0] },
            colored_noise: ColoredNoiseStage { prob: 1.0, snr_db_range: [0.0, 20.0], beta_range: [0.75, 1.5] },
            bpf: BpfStage {
                prob: 0.5,
                f1_hz_range: [500.0, 1500.0],
                f2_offset_range: [200.0, 500.0],
                cut_gain_range: [0.1, 0.3],
                beta_range: [0.25, 1.0],
                taps_range: [31, 61],
                design_rate: 16000,
            },
            level_dbfs_range: [-35.0, -15.0],
            clip: ScalarStage { prob: 0.5, range: [-15.0, 0.0] },
            crystalizer: ScalarStage { prob: 0.15, range: [1.0, 4.0] },
            flanger: ScalarStage { prob: 0.05, range: [1.0, 5.0] },
            crusher: IntStage { prob: 0.10, range: [1, 9] },
            codec: CodecStage {
                prob: 0.30,
                mp3_share: 0.5,
                mp3_kbps_range: [4.0, 16.0],
                ogg_encoders: vec![OggEncoder::Vorbis, OggEncoder::Opus],
                backend: CodecBackend::Surrogate,
                surrogate: SurrogateMap::default(),
            },
            freq_mask: MaskStage { prob: 1.0, width_range: [0, 10], count_range: [0, 3] },
            time_mask: MaskStage { prob: 1.0, width_range: [0, 10], count_range: [0, 2] },
            downsample_rates: vec![(8000, 0.25), (16000, 0.75)],
            target_rates: vec![16000, 24000, 44100, 48000],
        }
    }

    /// Adversarial stage: fewer spectral masks.
    pub fn adversarial() -> Self {
        let mut c = Self::training();
        c.freq_mask.count_range = [0, 1];
        c.time_mask.count_range = [0, 1];
        c
    }

    /// Held-out noisy-distorted evaluation recipe.
    pub fn evaluation() -> Self {
        let mut c = Self::training();
        c.sample_noise.snr_db_range = [5.0, 20.0];
        c.colored_noise.snr_db_range = [5.0, 20.0];
        c.bpf.prob = 0.2;
        c.bpf.f1_hz_range = [2000.0, 4000.0];
        c.bpf.beta_range = [0.25, 0.75];
        c.clip = ScalarStage { prob: 0.2, range: [-10.0, 0.0] };
        c.crystalizer = ScalarStage { prob: 0.1, range: [1.0, 2.0] };
        c.flanger = ScalarStage { prob: 0.05, range: [1.0, 3.0] };
        c.crusher = IntStage { prob: 0.1, range: [1, 5] };
        c.codec.prob = 0.25;
        c.codec.mp3_kbps_range = [16.0, 64.0];
        c.freq_mask = MaskStage { prob: 1.0, width_range: [0, 5], count_range: [0, 1] };
        c.time_mask = MaskStage { prob: 1.0, width_range: [0, 5], count_range: [0, 1] };
        c
    }

    /// Every stage disabled; input and target both at `rate`.
    pub fn passthrough(rate: u32) -> Self {
        let mut c = Self::training();
        c.rir_prob = 0.0;
        c.sample_noise.prob = 0.0;
        c.colored_noise.prob = 0.0;
        c.bpf.prob = 0.0;
        c.clip.prob = 0.0;
        c.crystalizer.prob = 0.0;
        c.flanger.prob = 0.0;
        c.crusher.prob = 0.0;
        c.codec.prob = 0.0;
        c.freq_mask.prob = 0.0;
        c.time_mask.prob = 0.0;
        c.downsample_rates = vec![(rate, 1.0)];
        c.target_rates = vec![rate];
        c
    }

    pub fn validate(&self) -> Result<(), DegradeError> {
        let bad = |m: String| Err(DegradeError::InvalidConfig(m));
        let probs = [
            ("rir_prob", self.rir_prob),
            ("sample_noise.prob", self.sample_noise.prob),
            ("colored_noise.prob", self.colored_noise.prob),
            ("bpf.prob", self.bpf.prob),
            ("clip.prob", self.clip.prob),
            ("crystalizer.prob", self.crystalizer.prob),
            ("flanger.prob", self.flanger.prob),
            ("crusher.prob", self.crusher.prob),
            ("codec.prob", self.codec.prob),
            ("codec.mp3_share", self.codec.mp3_share),
            ("freq_mask.prob", self.freq_mask.prob),
            ("time_mask.prob", self.time_mask.prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        let ranges = [
            ("sample_noise.snr_db_range", self.sample_noise.snr_db_range),
            ("colored_noise.snr_db_range", self.colored_noise.snr_db_range),
            ("colored_noise.beta_range", self.colored_noise.beta_range),
            ("bpf.f1_hz_range", self.bpf.f1_hz_range),
            ("bpf.f2_offset_range", self.bpf.f2_offset_range),
            ("bpf.cut_gain_range", self.bpf.cut_gain_range),
            ("bpf.beta_range", self.bpf.beta_range),
            ("level_dbfs_range", self.level_dbfs_range),
            ("clip.range", self.clip.range),
            ("crystalizer.range", self.crystalizer.range),
            ("flanger.range", self.flanger.range),
            ("codec.mp3_kbps_range", self.codec.mp3_kbps_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return bad(format!("{name} has low {lo} above high {hi}"));
            }
        }
        let int_ranges = [
            ("bpf.taps_range", [self.bpf.taps_range[0] as u32, self.bpf.taps_range[1] as u32]),
            ("crusher.range", self.crusher.range),
            ("freq_mask.width_range", self.freq_mask.width_range),
            ("freq_mask.count_range", self.freq_mask.count_range),
            ("time_mask.width_range", self.time_mask.width_range),
            ("time_mask.count_range", self.time_mask.count_range),
        ];
        for (name, [lo, hi]) in int_ranges {
            if lo > hi {
                return bad(format!("{name} has low {lo} above high {hi}"));
            }
        }
        if self.downsample_rates.is_empty() || self.downsample_rates.iter().any(|&(r, p)| r == 0 || !(0.0..=1.0).contains(&p)) {
            return bad("downsample_rates must be non-empty (rate, probability) pairs".into());
        }
        let total: f64 = self.downsample_rates.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("downsample probabilities sum to {total}"));
        }
        if self.target_rates.is_empty() {
            return bad("target_rates is empty".into());
        }
        if self.codec.prob > 0.0 && self.codec.mp3_share < 1.0 && self.codec.ogg_encoders.is_empty() {
            return bad("codec.ogg_encoders is empty".into());
        }
        Ok(())
    }
}

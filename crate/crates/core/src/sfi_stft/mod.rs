//! Sampling-frequency-independent STFT analysis and synthesis.
//!
//! Every rate uses the same physical framing (40 ms window, 20 ms hop), so the
//! number of bins above DC scales linearly with the sample rate and a model
//! trained on one rate sees the same frame duration at every other rate.

mod dft;
mod resample;
mod stft;

use thiserror::Error;

pub use dft::RealDft;
pub use resample::{resample, Resampler};
pub use stft::{istft, istft_adjoint, stft, stft_adjoint, stft_with, PadMode, StreamingAnalysis, StreamingSynthesis};

/// Rates at which the 40 ms / 20 ms framing is exactly integral.
pub const SUPPORTED_RATES: [u32; 7] = [8000, 16000, 22050, 24000, 32000, 44100, 48000];

pub const WINDOW_MS: f64 = 40.0;
pub const HOP_MS: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SfiError {
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),
    #[error("no integral bin count satisfies {f_e} Hz : {f_d} Hz with {bins} input bins")]
    NonIntegralRatio { f_e: u32, f_d: u32, bins: usize },
    #[error("empty signal")]
    EmptySignal,
    #[error("signal is silent")]
    SilentSignal,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
}

pub type Result<T> = std::result::Result<T, SfiError>;

/// A mono sample buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Framing parameters for one sample rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftParams {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub hop: usize,
    pub n_bins: usize,
}

impl StftParams {
    /// The 40 ms / 20 ms framing used by the restoration model.
    pub fn for_rate(sample_rate: u32) -> Result<Self> {
        // hop = sr / 50 and n_fft = 2 * hop must both be whole samples
        if sample_rate == 0 || sample_rate % 50 != 0 {
            return Err(SfiError::UnsupportedRate(sample_rate));
        }
        let hop = (sample_rate / 50) as usize;
        let n_fft = 2 * hop;
        Ok(Self {
            sample_rate,
            window_ms: WINDOW_MS,
            hop_ms: HOP_MS,
            n_fft,
            hop,
            n_bins: n_fft / 2 + 1,
        })
    }

    /// Framing with explicit sizes in samples; used by the discriminator and metrics.
    pub fn with_sizes(sample_rate: u32, n_fft: usize, hop: usize) -> Result<Self> {
        if sample_rate == 0 || n_fft < 2 || hop == 0 {
            return Err(SfiError::ShapeMismatch(format!(
                "invalid framing n_fft={n_fft} hop={hop} at {sample_rate} Hz"
            )));
        }
        let sr = sample_rate as f64;
        Ok(Self {
            sample_rate,
            window_ms: n_fft as f64 * 1000.0 / sr,
            hop_ms: hop as f64 * 1000.0 / sr,
            n_fft,
            hop,
            n_bins: n_fft / 2 + 1,
        })
    }

    /// Framing with durations in milliseconds, rounded to whole samples.
    pub fn with_durations(sample_rate: u32, window_ms: f64, hop_ms: f64) -> Result<Self> {
        let sr = sample_rate as f64;
        let n_fft = (window_ms * sr / 1000.0).round() as usize;
        let hop = (hop_ms * sr / 1000.0).round().max(1.0) as usize;
        Self::with_sizes(sample_rate, n_fft, hop)
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

pub fn is_supported_rate(sample_rate: u32) -> bool {
    SUPPORTED_RATES.contains(&sample_rate)
}

/// Output bin count for decoding at `f_d` from `f_e_bins` bins at `f_e`,
/// keeping `f_e : f_d = (F_E - 1) : (F_D - 1)`.
pub fn required_output_bins(f_e: u32, f_d: u32, f_e_bins: usize) -> Result<usize> {
    if f_e == 0 || f_d == 0 || f_e_bins == 0 {
        return Err(SfiError::NonIntegralRatio { f_e, f_d, bins: f_e_bins });
    }
    let num = (f_e_bins as u64 - 1) * f_d as u64;
    if num % f_e as u64 != 0 {
        return Err(SfiError::NonIntegralRatio { f_e, f_d, bins: f_e_bins });
    }
    Ok((num / f_e as u64) as usize + 1)
}

/// Complex spectrogram stored as F x T x 2 (real, imaginary), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub params: StftParams,
}

impl ComplexSpectrogram {
    pub fn zeros(params: StftParams, n_frames: usize) -> Self {
        Self { data: vec![0.0; params.n_bins * n_frames * 2], n_frames, params }
    }

    pub fn from_data(data: Vec<f64>, n_frames: usize, params: StftParams) -> Result<Self> {
        if data.len() != params.n_bins * n_frames * 2 {
            return Err(SfiError::ShapeMismatch(format!(
                "spectrogram data has {} values, expected {}x{}x2",
                data.len(),
                params.n_bins,
                n_frames
            )));
        }
        Ok(Self { data, n_frames, params })
    }

    pub fn n_bins(&self) -> usize {
        self.params.n_bins
    }

    #[inline]
    fn idx(&self, f: usize, t: usize) -> usize {
        (f * self.n_frames + t) * 2
    }

    pub fn get(&self, f: usize, t: usize) -> (f64, f64) {
        let i = self.idx(f, t);
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, f: usize, t: usize, re: f64, im: f64) {
        let i = self.idx(f, t);
        self.data[i] = re;
        self.data[i + 1] = im;
    }

    pub fn magnitude(&self, f: usize, t: usize) -> f64 {
        let (re, im) = self.get(f, t);
        re.hypot(im)
    }

    /// Channel-first layout [2, F, T] used by the network.
    pub fn to_channels_first(&self) -> Vec<f64> {
        let (nf, nt) = (self.n_bins(), self.n_frames);
        let mut out = vec![0.0; 2 * nf * nt];
        for f in 0..nf {
            for t in 0..nt {
                let (re, im) = self.get(f, t);
                out[f * nt + t] = re;
                out[nf * nt + f * nt + t] = im;
            }
        }
        out
    }

    pub fn from_channels_first(values: &[f64], n_frames: usize, params: StftParams) -> Result<Self> {
        let nf = params.n_bins;
        if values.len() != 2 * nf * n_frames {
            return Err(SfiError::ShapeMismatch(format!(
                "channel-first tensor has {} values, expected 2x{}x{}",
                values.len(),
                nf,
                n_frames
            )));
        }
        let mut s = Self::zeros(params, n_frames);
        for f in 0..nf {
            for t in 0..n_frames {
                s.set(f, t, values[f * n_frames + t], values[nf * n_frames + f * n_frames + t]);
            }
        }
        Ok(s)
    }
}

/// Scale a waveform so its RMS equals `level_dbfs` (RMS convention).
/// Returns the scaled waveform and the gain applied.
pub fn scale_to_dbfs(w: &Waveform, level_dbfs: f64) -> Result<(Waveform, f64)> {
    let r = w.rms();
    if r == 0.0 || !r.is_finite() {
        return Err(SfiError::SilentSignal);
    }
    let gain = 10f64.powf(level_dbfs / 20.0) / r;
    let samples = w.samples.iter().map(|x| x * gain).collect();
    Ok((Waveform::new(samples, w.sample_rate), gain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_for_grid_rates() {
        let p = StftParams::for_rate(48000).unwrap();
        assert_eq!((p.n_fft, p.hop, p.n_bins), (1920, 960, 961));
        let p = StftParams::for_rate(8000).unwrap();
        assert_eq!((p.n_fft, p.hop, p.n_bins), (320, 160, 161));
        let p = StftParams::for_rate(44100).unwrap();
        assert_eq!((p.n_fft, p.hop, p.n_bins), (1764, 882, 883));
        for &sr in &SUPPORTED_RATES {
            let p = StftParams::for_rate(sr).unwrap();
            assert_eq!((p.n_bins as u32 - 1) * 50, sr);
            assert_eq!(p.n_fft % 2, 0);
        }
    }

    #[test]
    fn non_integral_rate_is_rejected() {
        assert_eq!(StftParams::for_rate(11025), Err(SfiError::UnsupportedRate(11025)));
        assert_eq!(StftParams::for_rate(0), Err(SfiError::UnsupportedRate(0)));
    }

    #[test]
    fn output_bins_examples() {
        assert_eq!(required_output_bins(8000, 16000, 161).unwrap(), 321);
        assert_eq!(required_output_bins(16000, 48000, 321).unwrap(), 961);
        assert_eq!(required_output_bins(8000, 44100, 161).unwrap(), 883);
        assert!(required_output_bins(48000, 8000, 10).is_err());
    }

    #[test]
    fn output_bins_symmetric() {
        for &a in &SUPPORTED_RATES {
            for &b in &SUPPORTED_RATES {
                let fa = StftParams::for_rate(a).unwrap().n_bins;
                let fb = required_output_bins(a, b, fa).unwrap();
                assert_eq!(fb, StftParams::for_rate(b).unwrap().n_bins);
                assert_eq!(required_output_bins(b, a, fb).unwrap(), fa);
            }
        }
    }

    #[test]
    fn dbfs_scaling() {
        let w = Waveform::new((0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(), 16000);
        let (out, g) = scale_to_dbfs(&w, -20.0).unwrap();
        assert!((out.rms() - 0.1).abs() < 1e-12);
        assert!((g - 0.1).abs() < 1e-12);

        let (lvl, _) = scale_to_dbfs(&w, -15.0).unwrap();
        let (_, g) = scale_to_dbfs(&lvl, -15.0).unwrap();
        assert!((g - 1.0).abs() < 1e-9);

        let sine = Waveform::new(
            (0..16000).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).collect(),
            16000,
        );
        let (out, _) = scale_to_dbfs(&sine, -35.0).unwrap();
        assert!((out.rms() - 0.017_782_794_1).abs() < 1e-9);

        assert_eq!(scale_to_dbfs(&Waveform::zeros(10, 16000), -20.0), Err(SfiError::SilentSignal));
    }

    #[test]
    fn channel_first_round_trip() {
        let p = StftParams::for_rate(8000).unwrap();
        let mut s = ComplexSpectrogram::zeros(p, 3);
        s.set(5, 2, 1.5, -2.0);
        let cf = s.to_channels_first();
        let back = ComplexSpectrogram::from_channels_first(&cf, 3, p).unwrap();
        assert_eq!(back, s);
    }
}

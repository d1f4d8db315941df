//! Reference-based fidelity metrics: log-spectral distance, mel-cepstral
//! distortion, SDR and SI-SDR.
//!
//! LSD and SDR depend on the estimate's gain; MCD (which drops c0) and SI-SDR do not.

use serde::{Deserialize, Serialize};

use crate::mel::{dct2, mel_filterbank};
use crate::sfi_stft::{stft, SfiError, StftParams, Waveform};

/// Upper bound reported by SDR and SI-SDR for (near) perfect estimates.
pub const SDR_CAP_DB: f64 = 60.0;
pub const LSD_EPS: f64 = 1e-10;
pub const MCD_EPS: f64 = 1e-10;
pub const MCD_MELS: usize = 80;
pub const MCD_COEFFS: usize = 13;
pub const MCD_WINDOW_MS: f64 = 25.0;
pub const MCD_HOP_MS: f64 = 10.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("reference signal is silent")]
    SilentReference,
    #[error("empty signal")]
    Empty,
    #[error(transparent)]
    Stft(#[from] SfiError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Common length prefix of estimate and reference, plus their shared rate.
fn paired<'a>(y: &'a Waveform, s: &'a Waveform) -> Result<(&'a [f64], &'a [f64], u32)> {
    if y.sample_rate != s.sample_rate {
        return Err(MetricsError::RateMismatch(y.sample_rate, s.sample_rate));
    }
    let n = y.len().min(s.len());
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok((&y.samples[..n], &s.samples[..n], s.sample_rate))
}

/// LSD framing: 2048-point window at 32 kHz and above, 1024 below, hop of a quarter window.
pub fn lsd_params(sample_rate: u32) -> Result<StftParams> {
    let n_fft = if sample_rate >= 32000 { 2048 } else { 1024 };
    Ok(StftParams::with_sizes(sample_rate, n_fft, n_fft / 4)?)
}

/// MCD framing: 25 ms window, 10 ms hop.
pub fn mcd_params(sample_rate: u32) -> Result<StftParams> {
    Ok(StftParams::with_durations(sample_rate, MCD_WINDOW_MS, MCD_HOP_MS)?)
}

/// Frame-major power spectra.
fn power_frames(x: &[f64], p: &StftParams) -> Result<Vec<Vec<f64>>> {
    let spec = stft(&Waveform::new(x.to_vec(), p.sample_rate), p)?;
    Ok((0..spec.n_frames)
        .map(|t| {
            (0..spec.n_bins())
                .map(|f| {
                    let (re, im) = spec.get(f, t);
                    re * re + im * im
                })
                .collect()
        })
        .collect())
}

/// Mean over frames of the RMS (over bins) difference of log10 power spectra.
pub fn lsd(y: &Waveform, s: &Waveform) -> Result<f64> {
    let (y, s, rate) = paired(y, s)?;
    let p = lsd_params(rate)?;
    let (py, ps) = (power_frames(y, &p)?, power_frames(s, &p)?);
    let total: f64 = py
        .iter()
        .zip(&ps)
        .map(|(fy, fs)| {
            let ms = fy
                .iter()
                .zip(fs)
                .map(|(a, b)| ((b + LSD_EPS).log10() - (a + LSD_EPS).log10()).powi(2))
                .sum::<f64>()
                / fy.len() as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / py.len() as f64)
}

/// Mel cepstra c1..c13 per frame: natural-log mel amplitudes through an orthonormal DCT-II.
pub fn mel_cepstra(x: &[f64], sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let p = mcd_params(sample_rate)?;
    let fb = mel_filterbank(MCD_MELS, p.n_fft, sample_rate);
    let frames = power_frames(x, &p)?;
    Ok(frames
        .iter()
        .map(|pw| {
            let amp: Vec<f64> = pw.iter().map(|v| v.sqrt()).collect();
            let logmel: Vec<f64> = (0..MCD_MELS)
                .map(|m| {
                    let e: f64 = fb[m * p.n_bins..(m + 1) * p.n_bins].iter().zip(&amp).map(|(w, a)| w * a).sum();
                    (e + MCD_EPS).ln()
                })
                .collect();
            dct2(&logmel, MCD_COEFFS + 1)[1..].to_vec()
        })
        .collect())
}

/// `(10 / ln 10) * sqrt(2) * mean_t ||c_y - c_s||`.
pub fn mcd(y: &Waveform, s: &Waveform) -> Result<f64> {
    let (y, s, rate) = paired(y, s)?;
    let (cy, cs) = (mel_cepstra(y, rate)?, mel_cepstra(s, rate)?);
    let k = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2;
    let total: f64 = cy
        .iter()
        .zip(&cs)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(k * total / cy.len() as f64)
}

fn ratio_db(signal: f64, error: f64) -> f64 {
    if error <= 0.0 {
        return SDR_CAP_DB;
    }
    (10.0 * (signal / error).log10()).min(SDR_CAP_DB)
}

/// `10 log10(||s||^2 / ||s - y||^2)`, capped.
pub fn sdr(y: &Waveform, s: &Waveform) -> Result<f64> {
    let (y, s, _) = paired(y, s)?;
    let ps: f64 = s.iter().map(|v| v * v).sum();
    if ps == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    let pe: f64 = s.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(ratio_db(ps, pe))
}

/// SDR after projecting the estimate onto the reference, capped.
pub fn si_sdr(y: &Waveform, s: &Waveform) -> Result<f64> {
    let (y, s, _) = paired(y, s)?;
    let ps: f64 = s.iter().map(|v| v * v).sum();
    if ps == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    let alpha = y.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / ps;
    let target = alpha * alpha * ps;
    let pe: f64 = y.iter().zip(s).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    Ok(ratio_db(target, pe))
}

/// All four metrics for one estimate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub lsd: f64,
    pub mcd: f64,
    pub sdr: f64,
    pub si_sdr: f64,
}

pub fn evaluate(y: &Waveform, s: &Waveform) -> Result<MetricRow> {
    Ok(MetricRow { lsd: lsd(y, s)?, mcd: mcd(y, s)?, sdr: sdr(y, s)?, si_sdr: si_sdr(y, s)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub lsd: MeanStd,
    pub mcd: MeanStd,
    pub sdr: MeanStd,
    pub si_sdr: MeanStd,
}

pub fn summarize(rows: &[MetricRow]) -> Summary {
    let col = |f: fn(&MetricRow) -> f64| MeanStd::of(&rows.iter().map(f).collect::<Vec<_>>());
    Summary {
        count: rows.len(),
        lsd: col(|r| r.lsd),
        mcd: col(|r| r.mcd),
        sdr: col(|r| r.sdr),
        si_sdr: col(|r| r.si_sdr),
    }
}

/// Analysis settings recorded alongside every report.
pub fn settings_json() -> serde_json::Value {
    serde_json::json!({
        "lsd": {"n_fft": "2048 at >= 32 kHz, else 1024", "hop": "n_fft / 4", "eps": LSD_EPS, "log": "log10 power"},
        "mcd": {"window_ms": MCD_WINDOW_MS, "hop_ms": MCD_HOP_MS, "mels": MCD_MELS, "coeffs": "c1..c13", "eps": MCD_EPS},
        "sdr_cap_db": SDR_CAP_DB,
        "window": "periodic hann, centered, reflect padding",
    })
}

//! Individual distortion stages. All are length-preserving.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use realfft::num_complex::Complex;
use realfft::RealFftPlanner;

use super::DegradeError;
use crate::sfi_stft::{istft, stft_with, PadMode, StftParams, Waveform};

/// Length of the direct-path window kept from a room response.
pub const DIRECT_PATH_MS: f64 = 2.5;

fn check_rates(a: &Waveform, b: &Waveform) -> Result<(), DegradeError> {
    if a.sample_rate != b.sample_rate {
        return Err(DegradeError::RateMismatch(a.sample_rate, b.sample_rate));
    }
    Ok(())
}

/// Full linear convolution via zero-padded real FFTs.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 64 {
        let mut out = vec![0.0; out_len];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |x: &[f64]| {
        let mut buf = vec![0.0; n];
        buf[..x.len()].copy_from_slice(x);
        let mut spec = fwd.make_output_vec();
        fwd.process(&mut buf, &mut spec).expect("fft sizes match");
        spec
    };
    let sa = spectrum(a);
    let sb = spectrum(b);
    let mut prod: Vec<Complex<f64>> = sa.iter().zip(&sb).map(|(x, y)| x * y).collect();
    prod[0].im = 0.0;
    prod[n / 2].im = 0.0;
    let mut out = vec![0.0; n];
    inv.process(&mut prod, &mut out).expect("fft sizes match");
    out.truncate(out_len);
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Centered ("same" length) filtering with an odd-length kernel.
pub fn filter_same(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    assert!(kernel.len() % 2 == 1, "centered filtering needs an odd kernel");
    let half = kernel.len() / 2;
    let full = fft_convolve(x, kernel);
    full[half..half + x.len()].to_vec()
}

fn peak_index(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, -1.0), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
        .0
}

/// Reverberates `speech` and returns `(wet, aligned_target)`.
///
/// Both outputs are advanced by the response's peak index, so the wet onset
/// lines up with the target, which keeps only the direct-path part of `rir`.
pub fn apply_rir(speech: &Waveform, rir: &Waveform) -> Result<(Waveform, Waveform), DegradeError> {
    check_rates(speech, rir)?;
    if rir.samples.is_empty() || rir.samples.iter().all(|&v| v == 0.0) {
        return Err(DegradeError::EmptyRir);
    }
    let n = speech.len();
    let peak = peak_index(&rir.samples);
    let full = fft_convolve(&speech.samples, &rir.samples);
    let wet: Vec<f64> = (0..n).map(|i| full.get(i + peak).copied().unwrap_or(0.0)).collect();
    let direct_len = (DIRECT_PATH_MS * 1e-3 * rir.sample_rate as f64).round() as usize + 1;
    let direct = &rir.samples[peak..(peak + direct_len).min(rir.len())];
    let target_full = fft_convolve(&speech.samples, direct);
    let target = target_full[..n].to_vec();
    Ok((Waveform::new(wet, speech.sample_rate), Waveform::new(target, speech.sample_rate)))
}

/// Gain that puts `noise` at `snr_db` below `reference`, both powers taken over
/// `len` samples of the looped noise.
pub fn noise_gain(reference: &[f64], noise: &[f64], snr_db: f64) -> Result<f64, DegradeError> {
    let ps = reference.iter().map(|v| v * v).sum::<f64>() / reference.len().max(1) as f64;
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len().max(1) as f64;
    if pn == 0.0 {
        return Err(DegradeError::SilentNoise);
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Noise looped from `offset` to cover `len` samples.
pub fn loop_noise(noise: &[f64], len: usize, offset: usize) -> Result<Vec<f64>, DegradeError> {
    if noise.is_empty() {
        return Err(DegradeError::SilentNoise);
    }
    Ok((0..len).map(|i| noise[(offset + i) % noise.len()]).collect())
}

/// Adds `noise` (looped or cropped to the signal length) at `snr_db`.
pub fn mix_noise(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform, DegradeError> {
    check_rates(signal, noise)?;
    let n = loop_noise(&noise.samples, signal.len(), 0)?;
    let g = noise_gain(&signal.samples, &n, snr_db)?;
    let out = signal.samples.iter().zip(&n).map(|(s, v)| s + g * v).collect();
    Ok(Waveform::new(out, signal.sample_rate))
}

/// Gaussian noise with power spectral density proportional to `1/f^beta`, unit RMS.
pub fn colored_noise<R: Rng>(n: usize, beta: f64, sample_rate: u32, rng: &mut R) -> Waveform {
    if n == 0 {
        return Waveform::new(Vec::new(), sample_rate);
    }
    let mut white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spec = fwd.make_output_vec();
    fwd.process(&mut white, &mut spec).expect("fft sizes match");
    for (k, c) in spec.iter_mut().enumerate() {
        // amplitude goes as f^(-beta/2); DC borrows the first bin's gain
        let gain = (k.max(1) as f64).powf(-beta / 2.0);
        *c *= gain;
    }
    spec[0].im = 0.0;
    if n % 2 == 0 {
        spec[n / 2].im = 0.0;
    }
    let mut out = vec![0.0; n];
    inv.process(&mut spec, &mut out).expect("fft sizes match");
    let rms = crate::sfi_stft::rms(&out);
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    Waveform::new(out, sample_rate)
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Linear-phase FIR by frequency sampling of a piecewise-linear gain curve
/// given as `(hz, gain)` breakpoints from 0 to Nyquist, Hamming windowed.
pub fn firwin2(taps: usize, points: &[(f64, f64)], sample_rate: u32) -> Vec<f64> {
    let nyq = sample_rate as f64 / 2.0;
    let nfreqs = 1 + taps.next_power_of_two();
    let n = 2 * (nfreqs - 1);
    let gain_at = |x: f64| {
        let hz = x * nyq;
        for w in points.windows(2) {
            let ((f0, g0), (f1, g1)) = (w[0], w[1]);
            if hz <= f1 {
                if f1 == f0 {
                    return g1;
                }
                return g0 + (g1 - g0) * (hz - f0) / (f1 - f0);
            }
        }
        points.last().map_or(0.0, |p| p.1)
    };
    let delay = (taps - 1) as f64 / 2.0;
    let mut spec: Vec<Complex<f64>> = (0..nfreqs)
        .map(|k| {
            let x = k as f64 / (nfreqs - 1) as f64;
            Complex::from_polar(gain_at(x), -delay * PI * x)
        })
        .collect();
    spec[0].im = 0.0;
    spec[nfreqs - 1].im = 0.0;
    let mut planner = RealFftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(n);
    let mut out = vec![0.0; n];
    inv.process(&mut spec, &mut out).expect("fft sizes match");
    let win = hamming(taps);
    (0..taps).map(|i| out[i] / n as f64 * win[i]).collect()
}

/// Symmetric kernel `h * reverse(h)` equivalent to filtering forward then backward.
pub fn zero_phase_kernel(h: &[f64]) -> Vec<f64> {
    let l = h.len();
    let mut k = vec![0.0; 2 * l - 1];
    for j in 0..l {
        // k[j] = sum_i h[i] h[i + l - 1 - j]
        let s: f64 = (0..=j).map(|i| h[i] * h[i + l - 1 - j]).sum();
        k[j] = s;
        k[2 * l - 2 - j] = s;
    }
    k
}

/// Occlusion filter: unity gain below `f1`, `cut_gain^beta` above `f2`, linear
/// between, applied forward and backward so the stopband gain is squared.
pub fn occlusion_bpf(signal: &Waveform, f1: f64, f2: f64, cut_gain: f64, beta: f64, taps: usize) -> Result<Waveform, DegradeError> {
    let nyq = signal.sample_rate as f64 / 2.0;
    if !(0.0 < f1 && f1 < f2 && f2 < nyq) {
        return Err(DegradeError::InvalidBand(format!("need 0 < f1 {f1} < f2 {f2} < Nyquist {nyq}")));
    }
    if taps % 2 == 0 || taps < 3 {
        return Err(DegradeError::InvalidBand(format!("tap count {taps} must be odd and at least 3")));
    }
    let stop = cut_gain.powf(beta);
    let h = firwin2(taps, &[(0.0, 1.0), (f1, 1.0), (f2, stop), (nyq, stop)], signal.sample_rate);
    let k = zero_phase_kernel(&h);
    Ok(Waveform::new(filter_same(&signal.samples, &k), signal.sample_rate))
}

/// Hard clipping at `level_db` relative to the signal peak.
pub fn clip(signal: &Waveform, level_db: f64) -> Waveform {
    let threshold = signal.peak() * 10f64.powf(level_db / 20.0);
    let out = signal.samples.iter().map(|&v| v.clamp(-threshold, threshold)).collect();
    Waveform::new(out, signal.sample_rate)
}

/// First-difference emphasis, limited to full scale.
pub fn crystalizer(signal: &Waveform, intensity: f64) -> Waveform {
    let x = &signal.samples;
    let out = (0..x.len())
        .map(|n| {
            let prev = if n == 0 { x[0] } else { x[n - 1] };
            (x[n] + intensity * (x[n] - prev)).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform::new(out, signal.sample_rate)
}

/// Delay in samples of the flanger tap at sample `n`.
pub fn flanger_delay(n: usize, depth_ms: f64, sample_rate: u32) -> f64 {
    let fs = sample_rate as f64;
    depth_ms * fs / 1000.0 * (1.0 + (2.0 * PI * 0.5 * n as f64 / fs).sin()) / 2.0
}

/// Equal mix of the signal and a sinusoidally swept delayed copy.
pub fn flanger(signal: &Waveform, depth_ms: f64) -> Waveform {
    let x = &signal.samples;
    let at = |i: isize| if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { 0.0 };
    let out = (0..x.len())
        .map(|n| {
            let pos = n as f64 - flanger_delay(n, depth_ms, signal.sample_rate);
            let i0 = pos.floor();
            let frac = pos - i0;
            let delayed = (1.0 - frac) * at(i0 as isize) + frac * at(i0 as isize + 1);
            0.5 * x[n] + 0.5 * delayed
        })
        .collect();
    Waveform::new(out, signal.sample_rate)
}

/// Uniform quantization to `2^(bits-1)` steps per unit.
pub fn bitcrush(signal: &Waveform, bits: f64) -> Waveform {
    let q = 2f64.powf(bits - 1.0);
    Waveform::new(signal.samples.iter().map(|v| (v * q).round() / q).collect(), signal.sample_rate)
}

/// Zero-phase windowed-sinc lowpass; a no-op at or above Nyquist.
pub fn lowpass(signal: &Waveform, cutoff_hz: f64, taps: usize) -> Waveform {
    let nyq = signal.sample_rate as f64 / 2.0;
    if cutoff_hz >= nyq {
        return signal.clone();
    }
    let taps = taps | 1;
    let fc = cutoff_hz / signal.sample_rate as f64;
    let win = hamming(taps);
    let mid = (taps / 2) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let x = i as f64 - mid;
            let s = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
            s * win[i]
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    Waveform::new(filter_same(&signal.samples, &h), signal.sample_rate)
}

/// Spectral masking: zero bin bands `(start, width)` and frame spans `(start, width)`
/// in the analysis domain of `params`, then resynthesize at the original length.
pub fn spec_mask(
    signal: &Waveform,
    freq_masks: &[(usize, usize)],
    time_masks: &[(usize, usize)],
    params: &StftParams,
) -> Result<Waveform, DegradeError> {
    if freq_masks.iter().all(|m| m.1 == 0) && time_masks.iter().all(|m| m.1 == 0) {
        return Ok(signal.clone());
    }
    let mut s = stft_with(signal, params, PadMode::Reflect)?;
    let (f, t) = (s.n_bins(), s.n_frames);
    for &(start, width) in freq_masks {
        for k in start.min(f)..(start + width).min(f) {
            for j in 0..t {
                s.set(k, j, 0.0, 0.0);
            }
        }
    }
    for &(start, width) in time_masks {
        for j in start.min(t)..(start + width).min(t) {
            for k in 0..f {
                s.set(k, j, 0.0, 0.0);
            }
        }
    }
    Ok(istft(&s, signal.len())?)
}

use realfft::num_complex::Complex;

use super::{ComplexSpectrogram, RealDft, Result, SfiError, StftParams, Waveform};

/// How the signal is extended by `n_fft / 2` samples on the left so frames are centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Reflect,
    /// Zero history; used by the causal streaming path.
    Zero,
}

pub(crate) fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect()
}

/// Maps an index of the padded signal into the original signal under reflection.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Source index (or None for zero) of every sample of the padded, hop-aligned signal.
fn padded_sources(len: usize, p: &StftParams, pad: PadMode, n_frames: usize) -> Vec<Option<usize>> {
    let half = (p.n_fft / 2) as isize;
    let aligned = n_frames * p.hop;
    let total = (n_frames.saturating_sub(1)) * p.hop + p.n_fft;
    (0..total)
        .map(|i| {
            let j = i as isize - half;
            if (0..aligned as isize).contains(&j) {
                // past the end of the signal but inside the last hop: zero-fill
                ((j as usize) < len).then_some(j as usize)
            } else if j < 0 {
                match pad {
                    PadMode::Reflect => Some(reflect_index(j, len)),
                    PadMode::Zero => None,
                }
            } else {
                // right-hand reflection of the hop-aligned (zero-extended) signal
                let r = reflect_index(j, aligned);
                (r < len).then_some(r)
            }
        })
        .collect()
}

/// Centered STFT with reflect padding and a periodic Hann window.
pub fn stft(w: &Waveform, p: &StftParams) -> Result<ComplexSpectrogram> {
    stft_with(w, p, PadMode::Reflect)
}

pub fn stft_with(w: &Waveform, p: &StftParams, pad: PadMode) -> Result<ComplexSpectrogram> {
    if w.sample_rate != p.sample_rate {
        return Err(SfiError::RateMismatch(w.sample_rate, p.sample_rate));
    }
    if w.is_empty() {
        return Err(SfiError::EmptySignal);
    }
    let n_frames = p.n_frames(w.len());
    let src = padded_sources(w.len(), p, pad, n_frames);
    let win = periodic_hann(p.n_fft);
    let dft = RealDft::new(p.n_fft);
    let mut spec = ComplexSpectrogram::zeros(*p, n_frames);
    let mut frame = vec![0.0; p.n_fft];
    let mut bins = vec![Complex::new(0.0, 0.0); p.n_bins];
    for t in 0..n_frames {
        for k in 0..p.n_fft {
            frame[k] = src[t * p.hop + k].map_or(0.0, |j| w.samples[j]) * win[k];
        }
        dft.forward(&frame, &mut bins);
        for (f, b) in bins.iter().enumerate() {
            spec.set(f, t, b.re, b.im);
        }
    }
    Ok(spec)
}

/// Adjoint of [`stft_with`] for a signal of `len` samples; `grad` has the
/// spectrogram's F x T x 2 layout.
pub fn stft_adjoint(grad: &[f64], p: &StftParams, len: usize, pad: PadMode) -> Vec<f64> {
    let n_frames = p.n_frames(len);
    assert_eq!(grad.len(), p.n_bins * n_frames * 2, "stft adjoint gradient shape");
    let src = padded_sources(len, p, pad, n_frames);
    let win = periodic_hann(p.n_fft);
    let dft = RealDft::new(p.n_fft);
    let mut out = vec![0.0; len];
    let mut bins = vec![Complex::new(0.0, 0.0); p.n_bins];
    let mut frame = vec![0.0; p.n_fft];
    for t in 0..n_frames {
        for (f, b) in bins.iter_mut().enumerate() {
            let i = (f * n_frames + t) * 2;
            *b = Complex::new(grad[i], grad[i + 1]);
        }
        dft.forward_adjoint(&bins, &mut frame);
        for k in 0..p.n_fft {
            if let Some(j) = src[t * p.hop + k] {
                out[j] += frame[k] * win[k];
            }
        }
    }
    out
}

/// Squared-window normalization over the padded synthesis buffer.
fn synthesis_norm(p: &StftParams, n_frames: usize, win: &[f64]) -> Vec<f64> {
    let total = (n_frames.saturating_sub(1)) * p.hop + p.n_fft;
    let mut norm = vec![0.0; total];
    for t in 0..n_frames {
        for k in 0..p.n_fft {
            norm[t * p.hop + k] += win[k] * win[k];
        }
    }
    norm
}

fn check_synthesis(s_len: usize, p: &StftParams, n_frames: usize, target_len: usize) -> Result<()> {
    if s_len != p.n_bins * n_frames * 2 {
        return Err(SfiError::ShapeMismatch(format!(
            "spectrogram has {s_len} values, expected {}x{}x2",
            p.n_bins, n_frames
        )));
    }
    let total = (n_frames.saturating_sub(1)) * p.hop + p.n_fft;
    if n_frames == 0 || target_len + p.n_fft / 2 > total {
        return Err(SfiError::ShapeMismatch(format!(
            "{n_frames} frames cannot synthesize {target_len} samples"
        )));
    }
    Ok(())
}

/// Overlap-add inverse of [`stft`] with squared-window normalization.
pub fn istft(s: &ComplexSpectrogram, target_len: usize) -> Result<Waveform> {
    let p = &s.params;
    check_synthesis(s.data.len(), p, s.n_frames, target_len)?;
    let win = periodic_hann(p.n_fft);
    let norm = synthesis_norm(p, s.n_frames, &win);
    let dft = RealDft::new(p.n_fft);
    let scale = 1.0 / p.n_fft as f64;
    let mut buf = vec![0.0; norm.len()];
    let mut bins = vec![Complex::new(0.0, 0.0); p.n_bins];
    let mut frame = vec![0.0; p.n_fft];
    for t in 0..s.n_frames {
        for (f, b) in bins.iter_mut().enumerate() {
            let (re, im) = s.get(f, t);
            *b = Complex::new(re, im);
        }
        dft.inverse(&bins, &mut frame);
        for k in 0..p.n_fft {
            buf[t * p.hop + k] += frame[k] * scale * win[k];
        }
    }
    let half = p.n_fft / 2;
    let samples = (0..target_len)
        .map(|n| {
            let d = norm[n + half];
            if d > 0.0 {
                buf[n + half] / d
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform::new(samples, p.sample_rate))
}

/// Adjoint of [`istft`]: maps waveform cotangents to F x T x 2 spectrogram cotangents.
pub fn istft_adjoint(grad: &[f64], p: &StftParams, n_frames: usize) -> Result<Vec<f64>> {
    check_synthesis(p.n_bins * n_frames * 2, p, n_frames, grad.len())?;
    let win = periodic_hann(p.n_fft);
    let norm = synthesis_norm(p, n_frames, &win);
    let half = p.n_fft / 2;
    let mut gbuf = vec![0.0; norm.len()];
    for (n, g) in grad.iter().enumerate() {
        let d = norm[n + half];
        if d > 0.0 {
            gbuf[n + half] = g / d;
        }
    }
    let dft = RealDft::new(p.n_fft);
    let scale = 1.0 / p.n_fft as f64;
    let mut out = vec![0.0; p.n_bins * n_frames * 2];
    let mut frame = vec![0.0; p.n_fft];
    let mut bins = vec![Complex::new(0.0, 0.0); p.n_bins];
    for t in 0..n_frames {
        for k in 0..p.n_fft {
            frame[k] = gbuf[t * p.hop + k] * win[k] * scale;
        }
        dft.inverse_adjoint(&frame, &mut bins);
        for (f, b) in bins.iter().enumerate() {
            let i = (f * n_frames + t) * 2;
            out[i] = b.re;
            out[i + 1] = b.im;
        }
    }
    Ok(out)
}


fn check_half_overlap(p: &StftParams) -> Result<()> {
    if p.n_fft != 2 * p.hop {
        return Err(SfiError::ShapeMismatch(format!(
            "incremental processing needs n_fft = 2 * hop, got {} and {}",
            p.n_fft, p.hop
        )));
    }
    Ok(())
}

/// Frame-by-frame form of [`stft_with`] with [`PadMode::Zero`]: each pushed hop
/// of samples yields the frame centred on its first sample.
pub struct StreamingAnalysis {
    params: StftParams,
    win: Vec<f64>,
    dft: RealDft,
    prev: Vec<f64>,
    frame: Vec<f64>,
    bins: Vec<Complex<f64>>,
}

impl StreamingAnalysis {
    pub fn new(p: &StftParams) -> Result<Self> {
        check_half_overlap(p)?;
        Ok(Self {
            params: *p,
            win: periodic_hann(p.n_fft),
            dft: RealDft::new(p.n_fft),
            prev: vec![0.0; p.hop],
            frame: vec![0.0; p.n_fft],
            bins: vec![Complex::new(0.0, 0.0); p.n_bins],
        })
    }

    /// Returns the frame as interleaved `(re, im)` pairs over bins.
    pub fn push(&mut self, chunk: &[f64]) -> Result<Vec<f64>> {
        let hop = self.params.hop;
        if chunk.len() != hop {
            return Err(SfiError::ShapeMismatch(format!("chunk of {} samples, expected {hop}", chunk.len())));
        }
        for k in 0..hop {
            self.frame[k] = self.prev[k] * self.win[k];
            self.frame[hop + k] = chunk[k] * self.win[hop + k];
        }
        self.prev.copy_from_slice(chunk);
        self.dft.forward(&self.frame, &mut self.bins);
        Ok(self.bins.iter().flat_map(|b| [b.re, b.im]).collect())
    }
}

/// Frame-by-frame form of [`istft`]. Frame `t` completes output samples
/// `[(t - 1) * hop, t * hop)`; [`StreamingSynthesis::finish`] returns the last hop.
pub struct StreamingSynthesis {
    params: StftParams,
    win: Vec<f64>,
    dft: RealDft,
    buf: Vec<f64>,
    norm: Vec<f64>,
    frames: usize,
    frame: Vec<f64>,
    bins: Vec<Complex<f64>>,
}

impl StreamingSynthesis {
    pub fn new(p: &StftParams) -> Result<Self> {
        check_half_overlap(p)?;
        Ok(Self {
            params: *p,
            win: periodic_hann(p.n_fft),
            dft: RealDft::new(p.n_fft),
            buf: vec![0.0; p.n_fft],
            norm: vec![0.0; p.n_fft],
            frames: 0,
            frame: vec![0.0; p.n_fft],
            bins: vec![Complex::new(0.0, 0.0); p.n_bins],
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Adds the next frame (interleaved `(re, im)` pairs) and returns the samples
    /// it completes; empty for the first frame.
    pub fn push(&mut self, spectrum: &[f64]) -> Result<Vec<f64>> {
        let p = self.params;
        if spectrum.len() != 2 * p.n_bins {
            return Err(SfiError::ShapeMismatch(format!(
                "frame of {} values, expected {}",
                spectrum.len(),
                2 * p.n_bins
            )));
        }
        for (f, b) in self.bins.iter_mut().enumerate() {
            *b = Complex::new(spectrum[2 * f], spectrum[2 * f + 1]);
        }
        self.dft.inverse(&self.bins, &mut self.frame);
        let scale = 1.0 / p.n_fft as f64;
        for k in 0..p.n_fft {
            self.buf[k] += self.frame[k] * scale * self.win[k];
            self.norm[k] += self.win[k] * self.win[k];
        }
        let done = self.take_first_hop();
        self.frames += 1;
        Ok(if self.frames == 1 { Vec::new() } else { done })
    }

    /// Emits the first hop of the buffer and shifts the rest forward.
    fn take_first_hop(&mut self) -> Vec<f64> {
        let hop = self.params.hop;
        let out = (0..hop).map(|n| if self.norm[n] > 0.0 { self.buf[n] / self.norm[n] } else { 0.0 }).collect();
        self.buf.copy_within(hop.., 0);
        self.norm.copy_within(hop.., 0);
        self.buf[hop..].iter_mut().for_each(|v| *v = 0.0);
        self.norm[hop..].iter_mut().for_each(|v| *v = 0.0);
        out
    }

    /// Samples after the last frame; empty if no frame was pushed.
    pub fn finish(&mut self) -> Vec<f64> {
        if self.frames == 0 {
            return Vec::new();
        }
        self.take_first_hop()
    }
}

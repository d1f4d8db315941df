use super::Waveform;

/// Taps per polyphase branch, measured at the lower of the two rates.
const TAPS_PER_PHASE: usize = 64;
/// Kaiser shape parameter for roughly 80 dB stopband rejection.
const KAISER_BETA: f64 = 7.857;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (series form).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Rational-ratio polyphase resampler with a Kaiser-windowed sinc prototype.
///
/// Output sample `n` sits at input position `n * down / up`. Each phase is
/// normalized to unit DC gain. The filter is linear, so [`Resampler::adjoint`]
/// is its exact transpose.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub source_rate: u32,
    pub target_rate: u32,
    up: usize,
    down: usize,
    taps: usize,
    /// `phases[r][j]` weights input `i0 - taps/2 + 1 + j` for positions with remainder `r`.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Self {
        assert!(source_rate > 0 && target_rate > 0, "sample rates must be positive");
        let g = gcd(source_rate as u64, target_rate as u64);
        let up = (target_rate as u64 / g) as usize;
        let down = (source_rate as u64 / g) as usize;
        let low = source_rate.min(target_rate) as f64;
        // cutoff in cycles per input sample, at the lower Nyquist
        let cutoff = 0.5 * low / source_rate as f64;
        let half_width = (TAPS_PER_PHASE / 2) as f64 * source_rate as f64 / low;
        let taps = 2 * half_width.ceil() as usize;
        let phases = (0..up)
            .map(|r| {
                let frac = r as f64 / up as f64;
                let mut h: Vec<f64> = (0..taps)
                    .map(|j| {
                        let x = (j as f64 - (taps / 2) as f64 + 1.0) - frac;
                        if x.abs() >= half_width {
                            return 0.0;
                        }
                        let arg = 2.0 * cutoff * x;
                        let sinc = if arg == 0.0 {
                            1.0
                        } else {
                            (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                        };
                        let ratio = x / half_width;
                        let win = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).sqrt()) / bessel_i0(KAISER_BETA);
                        sinc * win
                    })
                    .collect();
                let sum: f64 = h.iter().sum();
                h.iter_mut().for_each(|v| *v /= sum);
                h
            })
            .collect();
        Self { source_rate, target_rate, up, down, taps, phases }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len as f64 * self.up as f64 / self.down as f64).round() as usize
    }

    fn for_each_tap(&self, input_len: usize, mut f: impl FnMut(usize, usize, f64)) {
        let out_len = self.output_len(input_len);
        let first = -((self.taps / 2) as isize) + 1;
        for n in 0..out_len {
            let pos = n * self.down;
            let i0 = (pos / self.up) as isize;
            let phase = &self.phases[pos % self.up];
            for (j, &w) in phase.iter().enumerate() {
                let i = i0 + first + j as isize;
                if i >= 0 && (i as usize) < input_len {
                    f(n, i as usize, w);
                }
            }
        }
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == self.down {
            return x.to_vec();
        }
        let mut out = vec![0.0; self.output_len(x.len())];
        self.for_each_tap(x.len(), |n, i, w| out[n] += w * x[i]);
        out
    }

    /// Transpose of [`Resampler::process`] for an input of `input_len` samples.
    pub fn adjoint(&self, grad: &[f64], input_len: usize) -> Vec<f64> {
        assert_eq!(grad.len(), self.output_len(input_len), "resampler adjoint length");
        if self.up == self.down {
            return grad.to_vec();
        }
        let mut out = vec![0.0; input_len];
        self.for_each_tap(input_len, |n, i, w| out[i] += w * grad[n]);
        out
    }
}

/// Resample a waveform to `target_rate`; identical rates return an exact copy.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    if w.sample_rate == target_rate {
        return w.clone();
    }
    let r = Resampler::new(w.sample_rate, target_rate);
    Waveform::new(r.process(&w.samples), target_rate)
}

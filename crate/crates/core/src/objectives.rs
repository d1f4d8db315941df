//! Generator objectives: the scaled log-spectral loss, its plain ℓ1
//! counterpart, a perceptual feature loss and the weighted stage totals.
//!
//! Spectrogram losses take the network output as a `[2, F, T]` variable
//! (real, imaginary) and the target as a [`ComplexSpectrogram`]. Per-bin
//! scales are computed from the target and held constant.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::mel::mel_filterbank;
use crate::nn::{Graph, NnError, Tensor, Var};
use crate::sfi_stft::{
    istft, istft_adjoint, stft_adjoint, stft_with, ComplexSpectrogram, PadMode, Resampler, SfiError, StftParams,
    Waveform,
};

/// Lower bound on the per-bin scale `w_f`.
pub const SCALE_FLOOR: f64 = 1e-5;
/// Added under the square root of magnitudes so their gradient exists at zero.
pub const MAG_EPS: f64 = 1e-12;
pub const PERCEPTUAL_RATE: u32 = 16000;
pub const LOG_MEL_BANDS: usize = 80;
pub const LOG_MEL_WINDOW_MS: f64 = 25.0;
pub const LOG_MEL_HOP_MS: f64 = 10.0;
pub const LOG_MEL_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature extractor runs at {expected} Hz, got {got} Hz")]
    RateMismatch { expected: u32, got: u32 },
    #[error("negative loss weight `{0}`")]
    NegativeWeight(&'static str),
    #[error("no stored features for `{0}`")]
    MissingFeatures(String),
    #[error("feature file {path}: {msg}")]
    FeatureFile { path: PathBuf, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stft(#[from] SfiError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights of the real, imaginary and magnitude components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub real: f64,
    pub imag: f64,
    pub mag: f64,
}

impl Default for ComponentWeights {
    fn default() -> Self {
        Self { real: 0.2, imag: 0.2, mag: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: ComponentWeights,
    pub perceptual: f64,
    pub spectral: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub human_feedback: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: ComponentWeights::default(),
            perceptual: 100.0,
            spectral: 1.0,
            adversarial: 0.005,
            feature_matching: 0.1,
            human_feedback: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha.real", self.alpha.real),
            ("alpha.imag", self.alpha.imag),
            ("alpha.mag", self.alpha.mag),
            ("perceptual", self.perceptual),
            ("spectral", self.spectral),
            ("adversarial", self.adversarial),
            ("feature_matching", self.feature_matching),
            ("human_feedback", self.human_feedback),
        ];
        match all.iter().find(|(_, v)| !(*v >= 0.0)) {
            Some((name, _)) => Err(LossError::NegativeWeight(name)),
            None => Ok(()),
        }
    }
}

/// Per-bin scales `w_f`: the frame-averaged target magnitude, floored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleField {
    pub w: Vec<f64>,
}

impl ScaleField {
    pub fn from_target(s: &ComplexSpectrogram) -> Self {
        let t = s.n_frames.max(1) as f64;
        let w = (0..s.n_bins())
            .map(|f| ((0..s.n_frames).map(|i| s.magnitude(f, i)).sum::<f64>() / t).max(SCALE_FLOOR))
            .collect();
        Self { w }
    }

    /// One weight per `(f, t)` element, bin-major.
    fn per_element(&self, n_frames: usize) -> Vec<f64> {
        self.w.iter().flat_map(|&w| std::iter::repeat(w).take(n_frames)).collect()
    }
}

fn magnitudes(s: &ComplexSpectrogram) -> Vec<f64> {
    s.data.chunks(2).map(|p| (p[0] * p[0] + p[1] * p[1] + MAG_EPS).sqrt()).collect()
}

/// Component differences `Y_c - S_c` for real, imaginary and magnitude, each bin-major over `(f, t)`.
fn component_errors(g: &Graph, y: Var, s: &ComplexSpectrogram) -> Result<[Var; 3]> {
    let (nf, nt) = (s.n_bins(), s.n_frames);
    if g.shape(y) != [2, nf, nt] {
        return Err(LossError::ShapeMismatch(format!("estimate {:?} against target [2, {nf}, {nt}]", g.shape(y))));
    }
    let target = s.to_channels_first();
    let s_re = g.constant(Tensor::new(vec![nf, nt], target[..nf * nt].to_vec()));
    let s_im = g.constant(Tensor::new(vec![nf, nt], target[nf * nt..].to_vec()));
    let s_mag = g.constant(Tensor::new(vec![nf, nt], magnitudes(s)));
    let y_re = g.reshape(g.narrow(y, 0, 0, 1)?, &[nf, nt])?;
    let y_im = g.reshape(g.narrow(y, 0, 1, 1)?, &[nf, nt])?;
    let y_mag = g.complex_magnitude(g.permute(y, &[1, 2, 0])?, MAG_EPS)?;
    Ok([g.sub(y_re, s_re)?, g.sub(y_im, s_im)?, g.sub(y_mag, s_mag)?])
}

fn weighted_sum(g: &Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for &(w, v) in terms {
        if w != 0.0 {
            total = g.add(total, g.scale(v, w))?;
        }
    }
    Ok(total)
}

/// `sum_c alpha_c mean_{t,f}[w_f ln(1 + |Y_c - S_c| / w_f)]`.
pub fn scaled_log_loss(g: &Graph, y: Var, s: &ComplexSpectrogram, alpha: &ComponentWeights) -> Result<Var> {
    let w = ScaleField::from_target(s).per_element(s.n_frames);
    let [re, im, mag] = component_errors(g, y, s)?;
    let terms = [
        (alpha.real, g.scaled_log_abs_mean(re, w.clone())?),
        (alpha.imag, g.scaled_log_abs_mean(im, w.clone())?),
        (alpha.mag, g.scaled_log_abs_mean(mag, w)?),
    ];
    weighted_sum(g, &terms)
}

/// `sum_c alpha_c mean_{t,f}|Y_c - S_c|`.
pub fn complex_l1(g: &Graph, y: Var, s: &ComplexSpectrogram, alpha: &ComponentWeights) -> Result<Var> {
    let [re, im, mag] = component_errors(g, y, s)?;
    let terms = [(alpha.real, g.abs_mean(re)), (alpha.imag, g.abs_mean(im)), (alpha.mag, g.abs_mean(mag))];
    weighted_sum(g, &terms)
}

fn spectrogram_var(g: &Graph, y: &ComplexSpectrogram) -> Var {
    g.constant(Tensor::new(vec![2, y.n_bins(), y.n_frames], y.to_channels_first()))
}

fn check_same_grid(y: &ComplexSpectrogram, s: &ComplexSpectrogram) -> Result<()> {
    if y.params != s.params || y.n_frames != s.n_frames {
        return Err(LossError::ShapeMismatch(format!(
            "{}x{} at {} Hz against {}x{} at {} Hz",
            y.n_bins(),
            y.n_frames,
            y.params.sample_rate,
            s.n_bins(),
            s.n_frames,
            s.params.sample_rate
        )));
    }
    Ok(())
}

/// [`scaled_log_loss`] evaluated on two spectrograms.
pub fn scaled_log_loss_value(y: &ComplexSpectrogram, s: &ComplexSpectrogram, alpha: &ComponentWeights) -> Result<f64> {
    check_same_grid(y, s)?;
    let g = Graph::inference();
    let l = scaled_log_loss(&g, spectrogram_var(&g, y), s, alpha)?;
    Ok(g.value(l).item())
}

/// [`complex_l1`] evaluated on two spectrograms.
pub fn complex_l1_value(y: &ComplexSpectrogram, s: &ComplexSpectrogram, alpha: &ComponentWeights) -> Result<f64> {
    check_same_grid(y, s)?;
    let g = Graph::inference();
    let l = complex_l1(&g, spectrogram_var(&g, y), s, alpha)?;
    Ok(g.value(l).item())
}

/// Differentiable inverse STFT of a `[2, F, T]` variable to `len` samples.
pub fn synthesize(g: &Graph, y: Var, p: StftParams, len: usize) -> Result<Var> {
    let shape = g.shape(y);
    if shape.len() != 3 || shape[0] != 2 || shape[1] != p.n_bins {
        return Err(LossError::ShapeMismatch(format!("synthesis of {shape:?} with {} bins", p.n_bins)));
    }
    let nt = shape[2];
    let fwd = |v: &[f64]| -> Vec<f64> {
        let s = ComplexSpectrogram::from_channels_first(v, nt, p).expect("checked shape");
        istft(&s, len).expect("validated synthesis shape").samples
    };
    // validate once so the forward closure cannot fail silently
    istft(&ComplexSpectrogram::zeros(p, nt), len)?;
    Ok(g.linear_map(y, vec![len], fwd, move |gr| {
        let spec = istft_adjoint(gr, &p, nt).expect("validated synthesis shape");
        ComplexSpectrogram { data: spec, n_frames: nt, params: p }.to_channels_first()
    })?)
}

/// Differentiable rate conversion of a 1-D variable.
pub fn resample_var(g: &Graph, x: Var, from: u32, to: u32) -> Result<Var> {
    if from == to {
        return Ok(x);
    }
    let r = Arc::new(Resampler::new(from, to));
    let n = g.shape(x)[0];
    let out = r.output_len(n);
    let rf = r.clone();
    Ok(g.linear_map(x, vec![out], move |v| rf.process(v), move |gr| r.adjoint(gr, n))?)
}

/// Maps a waveform to a `[frames, dims]` feature map.
pub trait FeatureExtractor {
    fn sample_rate(&self) -> u32;

    /// Differentiable features of a 1-D waveform variable.
    fn features(&self, g: &Graph, wav: Var) -> Result<Var>;

    fn features_of(&self, w: &Waveform) -> Result<Tensor> {
        if w.sample_rate != self.sample_rate() {
            return Err(LossError::RateMismatch { expected: self.sample_rate(), got: w.sample_rate });
        }
        let g = Graph::inference();
        let x = g.constant(Tensor::new(vec![w.len()], w.samples.clone()));
        let f = self.features(&g, x)?;
        Ok((*g.value(f)).clone())
    }
}

/// Built-in perceptual surrogate: natural-log mel power spectrogram.
#[derive(Debug, Clone)]
pub struct LogMel {
    params: StftParams,
    n_mels: usize,
    fb: Arc<Vec<f64>>,
}

impl LogMel {
    pub fn new() -> Self {
        Self::with_rate(PERCEPTUAL_RATE).expect("16 kHz is a valid analysis rate")
    }

    pub fn with_rate(rate: u32) -> Result<Self> {
        let params = StftParams::with_durations(rate, LOG_MEL_WINDOW_MS, LOG_MEL_HOP_MS)?;
        let fb = mel_filterbank(LOG_MEL_BANDS, params.n_fft, rate);
        Ok(Self { params, n_mels: LOG_MEL_BANDS, fb: Arc::new(fb) })
    }
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor for LogMel {
    fn sample_rate(&self) -> u32 {
        self.params.sample_rate
    }

    fn features(&self, g: &Graph, wav: Var) -> Result<Var> {
        let p = self.params;
        let shape = g.shape(wav);
        if shape.len() != 1 || shape[0] == 0 {
            return Err(LossError::ShapeMismatch(format!("waveform variable {shape:?}")));
        }
        let len = shape[0];
        let (nf, nt, nm) = (p.n_bins, p.n_frames(len), self.n_mels);
        let spec = g.linear_map(
            wav,
            vec![nf, nt, 2],
            |v| {
                let w = Waveform::new(v.to_vec(), p.sample_rate);
                stft_with(&w, &p, PadMode::Reflect).expect("non-empty input").data
            },
            move |gr| stft_adjoint(gr, &p, len, PadMode::Reflect),
        )?;
        let sq = g.square(spec);
        let power = g.linear_map(
            sq,
            vec![nf, nt],
            |v| v.chunks(2).map(|c| c[0] + c[1]).collect(),
            |gr| gr.iter().flat_map(|&x| [x, x]).collect(),
        )?;
        let (fb, fb_t) = (self.fb.clone(), self.fb.clone());
        let mel = g.linear_map(
            power,
            vec![nt, nm],
            move |v| {
                let mut out = vec![0.0; nt * nm];
                for t in 0..nt {
                    for m in 0..nm {
                        out[t * nm + m] = (0..nf).map(|f| fb[m * nf + f] * v[f * nt + t]).sum();
                    }
                }
                out
            },
            move |gr| {
                let mut out = vec![0.0; nf * nt];
                for f in 0..nf {
                    for t in 0..nt {
                        out[f * nt + t] = (0..nm).map(|m| fb_t[m * nf + f] * gr[t * nm + m]).sum();
                    }
                }
                out
            },
        )?;
        Ok(g.log_eps(mel, LOG_MEL_EPS))
    }
}

/// Mean squared difference between estimate features and fixed target features.
pub fn feature_mse(g: &Graph, est: Var, target: &Tensor) -> Result<Var> {
    if g.shape(est) != target.shape {
        return Err(LossError::ShapeMismatch(format!("features {:?} against {:?}", g.shape(est), target.shape)));
    }
    Ok(g.mse(est, g.constant(target.clone()))?)
}

/// Perceptual loss of a waveform variable at the extractor rate against a clean reference.
pub fn perceptual_loss(g: &Graph, y: Var, s: &Waveform, extractor: &dyn FeatureExtractor) -> Result<Var> {
    let target = extractor.features_of(s)?;
    let est = extractor.features(g, y)?;
    feature_mse(g, est, &target)
}

/// [`perceptual_loss`] on two waveforms.
pub fn perceptual_loss_value(y: &Waveform, s: &Waveform, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if y.sample_rate != extractor.sample_rate() {
        return Err(LossError::RateMismatch { expected: extractor.sample_rate(), got: y.sample_rate });
    }
    let g = Graph::inference();
    let x = g.constant(Tensor::new(vec![y.len()], y.samples.clone()));
    let l = perceptual_loss(&g, x, s, extractor)?;
    Ok(g.value(l).item())
}

#[derive(Serialize, Deserialize)]
struct FeatureFile {
    frames: usize,
    dims: usize,
    data: Vec<f64>,
}

/// Precomputed target features from an external extractor, one JSON file per
/// utterance id (`<dir>/<id>.json` holding `frames`, `dims` and row-major `data`).
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dir: PathBuf,
}

impl FeatureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn load(&self, id: &str) -> Result<Tensor> {
        let path = self.path(id);
        let text = std::fs::read_to_string(&path).map_err(|_| LossError::MissingFeatures(id.to_string()))?;
        let f: FeatureFile =
            serde_json::from_str(&text).map_err(|e| LossError::FeatureFile { path: path.clone(), msg: e.to_string() })?;
        if f.data.len() != f.frames * f.dims {
            return Err(LossError::FeatureFile {
                path,
                msg: format!("{} values for {}x{}", f.data.len(), f.frames, f.dims),
            });
        }
        Ok(Tensor::new(vec![f.frames, f.dims], f.data))
    }

    pub fn save(&self, id: &str, features: &Tensor) -> Result<()> {
        let path = self.path(id);
        let io = |e: std::io::Error| LossError::FeatureFile { path: path.clone(), msg: e.to_string() };
        if features.rank() != 2 {
            return Err(LossError::ShapeMismatch(format!("features {:?} are not 2-D", features.shape)));
        }
        std::fs::create_dir_all(&self.dir).map_err(io)?;
        let f = FeatureFile { frames: features.shape[0], dims: features.shape[1], data: features.data.clone() };
        std::fs::write(&path, serde_json::to_vec(&f).expect("plain numbers")).map_err(io)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Every term of a stage objective, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub perceptual: f64,
    pub spectral: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub human_feedback: f64,
}

/// `lambda_p L_p + lambda_s L_s`.
pub fn pretrain_loss(g: &Graph, perceptual: Var, spectral: Var, w: &LossWeights) -> Result<(Var, LossReport)> {
    let total = weighted_sum(g, &[(w.perceptual, perceptual), (w.spectral, spectral)])?;
    let report = LossReport {
        total: g.value(total).item(),
        perceptual: g.value(perceptual).item(),
        spectral: g.value(spectral).item(),
        ..LossReport::default()
    };
    Ok((total, report))
}

/// Terms of the adversarial-stage generator objective.
pub struct GeneratorTerms {
    pub perceptual: Var,
    pub spectral: Var,
    pub adversarial: Var,
    pub feature_matching: Var,
    /// Optional human-feedback plug-in; contributes zero when absent.
    pub human_feedback: Option<Var>,
}

/// `lambda_g L_g + lambda_fm L_fm + lambda_p L_p + lambda_s L_s + lambda_hf L_hf`.
pub fn generator_loss(g: &Graph, t: &GeneratorTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    let mut terms = vec![
        (w.adversarial, t.adversarial),
        (w.feature_matching, t.feature_matching),
        (w.perceptual, t.perceptual),
        (w.spectral, t.spectral),
    ];
    terms.extend(t.human_feedback.map(|v| (w.human_feedback, v)));
    let total = weighted_sum(g, &terms)?;
    let item = |v: Var| g.value(v).item();
    let report = LossReport {
        total: item(total),
        perceptual: item(t.perceptual),
        spectral: item(t.spectral),
        adversarial: item(t.adversarial),
        feature_matching: item(t.feature_matching),
        human_feedback: t.human_feedback.map_or(0.0, item),
    };
    Ok((total, report))
}

//! Multi-scale discriminators on duration-based STFTs and the adversarial
//! loss terms.
//!
//! Each scale analyses the waveform with a fixed physical window, so a frame
//! always covers the same time span and the conv stack sees the same number of
//! frames at any sample rate. Weights never depend on the bin count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{truncated_normal, Checkpoint, Graph, NnError, ParamStore, Tensor, Var};
use crate::sfi_stft::{is_supported_rate, stft_adjoint, stft_with, PadMode, SfiError, StftParams, Waveform};

/// Added to the real-feature scale in the feature-matching denominator.
pub const FM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum AdversaryError {
    #[error("input of {len} samples is shorter than the largest window ({needed} samples)")]
    TooShort { len: usize, needed: usize },
    #[error("real and fake terms do not match: {0}")]
    StructureMismatch(String),
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),
    #[error("invalid discriminator config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match the discriminator: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stft(#[from] SfiError),
}

pub type Result<T> = std::result::Result<T, AdversaryError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub windows_ms: Vec<f64>,
    pub channels: usize,
    pub layers: usize,
    /// Kernel extent along frequency.
    pub kernel_freq: usize,
    /// Kernel extent along time.
    pub kernel_time: usize,
    pub slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            windows_ms: vec![20.0, 40.0, 60.0, 80.0, 100.0],
            channels: 32,
            layers: 4,
            kernel_freq: 9,
            kernel_time: 3,
            slope: 0.2,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AdversaryError::InvalidConfig(m.to_string()));
        if self.windows_ms.is_empty() || self.windows_ms.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("window durations must be positive");
        }
        if self.channels == 0 || self.layers == 0 {
            return bad("channels and layers must be nonzero");
        }
        if self.kernel_freq % 2 == 0 || self.kernel_time % 2 == 0 {
            return bad("kernel extents must be odd");
        }
        Ok(())
    }

    /// Parameter names and shapes for every scale; no rate enters here.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let mut out = Vec::new();
        for i in 0..self.windows_ms.len() {
            for l in 0..self.layers {
                let ci = if l == 0 { 2 } else { c };
                out.push((format!("disc.{i}.conv.{l}.weight"), vec![c, ci, self.kernel_freq, self.kernel_time]));
                out.push((format!("disc.{i}.conv.{l}.bias"), vec![c]));
            }
            out.push((format!("disc.{i}.out.weight"), vec![1, c, 1, 1]));
            out.push((format!("disc.{i}.out.bias"), vec![1]));
        }
        out
    }

    /// Framing of scale `i` at `rate`: window rounded to whole samples, hop a quarter of it.
    pub fn framing(&self, i: usize, rate: u32) -> Result<StftParams> {
        let n_fft = (self.windows_ms[i] * rate as f64 / 1000.0).round() as usize;
        let hop = ((n_fft as f64) / 4.0).round().max(1.0) as usize;
        Ok(StftParams::with_sizes(rate, n_fft, hop)?)
    }
}

/// Output of one scale: the score map `[1, F', T]` and each hidden activation.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorBank {
    pub cfg: DiscConfig,
    pub params: ParamStore,
}

impl DiscriminatorBank {
    pub fn build(cfg: DiscConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                truncated_normal(&mut rng, &shape, (1.0 / fan_in as f64).sqrt())
            };
            params.add(&name, t)?;
        }
        Ok(Self { cfg, params })
    }

    pub fn num_scales(&self) -> usize {
        self.cfg.windows_ms.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Parameters belonging to scale `i`.
    pub fn scale_params(&self, i: usize) -> usize {
        let prefix = format!("disc.{i}.");
        self.params.iter().filter(|(n, _)| n.starts_with(&prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Smallest input length every scale accepts at `rate`.
    pub fn min_len(&self, rate: u32) -> Result<usize> {
        let mut needed = 0;
        for i in 0..self.num_scales() {
            needed = needed.max(self.cfg.framing(i, rate)?.n_fft);
        }
        Ok(needed)
    }

    /// Runs every scale on the waveform variable `wav` (shape `[len]`) at `rate`.
    pub fn forward(&self, g: &Graph, wav: Var, rate: u32) -> Result<Vec<ScaleOutput>> {
        self.run(g, wav, rate, false)
    }

    /// Like [`forward`](Self::forward) but with the weights as constants, so
    /// gradients reach only the waveform.
    pub fn forward_frozen(&self, g: &Graph, wav: Var, rate: u32) -> Result<Vec<ScaleOutput>> {
        self.run(g, wav, rate, true)
    }

    fn run(&self, g: &Graph, wav: Var, rate: u32, frozen: bool) -> Result<Vec<ScaleOutput>> {
        if !is_supported_rate(rate) {
            return Err(AdversaryError::UnsupportedRate(rate));
        }
        let shape = g.shape(wav);
        if shape.len() != 1 {
            return Err(AdversaryError::StructureMismatch(format!("waveform variable {shape:?}")));
        }
        let len = shape[0];
        let needed = self.min_len(rate)?;
        if len < needed {
            return Err(AdversaryError::TooShort { len, needed });
        }
        (0..self.num_scales()).map(|i| self.scale_forward(g, i, wav, len, rate, frozen)).collect()
    }

    fn weight(&self, g: &Graph, name: &str, frozen: bool) -> Result<Var> {
        if frozen {
            let t = self.params.get(name).ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
            Ok(g.constant((**t).clone()))
        } else {
            Ok(g.param(&self.params, name)?)
        }
    }

    fn scale_forward(&self, g: &Graph, i: usize, wav: Var, len: usize, rate: u32, frozen: bool) -> Result<ScaleOutput> {
        let p = self.cfg.framing(i, rate)?;
        let (nf, nt) = (p.n_bins, p.n_frames(len));
        let spec = g.linear_map(
            wav,
            vec![nf, nt, 2],
            |v| stft_with(&Waveform::new(v.to_vec(), rate), &p, PadMode::Reflect).expect("checked length").data,
            move |gr| stft_adjoint(gr, &p, len, PadMode::Reflect),
        )?;
        // unit-power scaling keeps input magnitudes comparable across rates
        let spec = g.scale(spec, 1.0 / (p.n_fft as f64).sqrt());
        let mut h = g.permute(spec, &[2, 0, 1])?;
        let pad = (self.cfg.kernel_freq / 2, self.cfg.kernel_time / 2);
        let mut features = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let w = self.weight(g, &format!("disc.{i}.conv.{l}.weight"), frozen)?;
            let b = self.weight(g, &format!("disc.{i}.conv.{l}.bias"), frozen)?;
            let stride = if l % 2 == 1 { (2, 1) } else { (1, 1) };
            h = g.conv2d(h, w, Some(b), stride, pad)?;
            h = g.leaky_relu(h, self.cfg.slope);
            features.push(h);
        }
        let w = self.weight(g, &format!("disc.{i}.out.weight"), frozen)?;
        let b = self.weight(g, &format!("disc.{i}.out.bias"), frozen)?;
        let score = g.conv2d(h, w, Some(b), (1, 1), (0, 0))?;
        Ok(ScaleOutput { score, features })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            meta: serde_json::json!({ "discriminator": self.cfg }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: DiscConfig = serde_json::from_value(ckpt.meta.get("discriminator").cloned().unwrap_or_default())
            .map_err(|e| AdversaryError::CheckpointMismatch(format!("no usable discriminator config: {e}")))?;
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in cfg.param_shapes() {
            let t = ckpt.get(&name).ok_or_else(|| AdversaryError::CheckpointMismatch(format!("missing `{name}`")))?;
            if t.shape != shape {
                return Err(AdversaryError::CheckpointMismatch(format!("`{name}` has shape {:?}", t.shape)));
            }
            params.add(&name, t.clone())?;
        }
        Ok(Self { cfg, params })
    }
}

fn check_pairs(g: &Graph, real: &[Var], fake: &[Var]) -> Result<()> {
    if real.len() != fake.len() {
        return Err(AdversaryError::StructureMismatch(format!("{} real vs {} fake terms", real.len(), fake.len())));
    }
    for (k, (r, f)) in real.iter().zip(fake).enumerate() {
        let (sr, sf) = (g.shape(*r), g.shape(*f));
        if sr != sf {
            return Err(AdversaryError::StructureMismatch(format!("term {k}: {sr:?} vs {sf:?}")));
        }
    }
    Ok(())
}

fn sum_vars(g: &Graph, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| AdversaryError::StructureMismatch("no terms".into()))?;
    it.try_fold(first, |acc, v| g.add(acc, v).map_err(Into::into))
}

/// Least-squares discriminator loss summed over scales.
pub fn lsgan_d_loss(g: &Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    check_pairs(g, real, fake)?;
    let mut terms = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(fake) {
        terms.push(g.mean_sq_offset(*r, 1.0));
        terms.push(g.mean_sq_offset(*f, 0.0));
    }
    sum_vars(g, terms)
}

/// Least-squares generator loss summed over scales.
pub fn lsgan_g_loss(g: &Graph, fake: &[Var]) -> Result<Var> {
    sum_vars(g, fake.iter().map(|f| g.mean_sq_offset(*f, 1.0)).collect())
}

/// L1 feature distance per layer, normalized by the mean magnitude of the real
/// feature. Real features are treated as constants.
pub fn feature_matching(g: &Graph, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(AdversaryError::StructureMismatch(format!("{} real vs {} fake scales", real.len(), fake.len())));
    }
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        check_pairs(g, r, f)?;
        for (rv, fv) in r.iter().zip(f) {
            let rv = g.detach(*rv);
            let t = g.value(rv);
            let denom = t.data.iter().map(|v| v.abs()).sum::<f64>() / t.numel().max(1) as f64 + FM_EPS;
            let d = g.sub(*fv, rv)?;
            terms.push(g.scale(g.abs_mean(d), 1.0 / denom));
        }
    }
    sum_vars(g, terms)
}

/// Splits scale outputs into score maps and feature lists.
pub fn split_outputs(out: &[ScaleOutput]) -> (Vec<Var>, Vec<Vec<Var>>) {
    (out.iter().map(|o| o.score).collect(), out.iter().map(|o| o.features.clone()).collect())
}

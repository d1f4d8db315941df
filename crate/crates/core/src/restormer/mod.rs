//! The restoration network: a time-frequency dual-path encoder at the input
//! rate and a decoder that extends the spectrum to any output rate with
//! learnable extension queries.
//!
//! Offline models use attention over frames; streaming models replace every
//! time module with causal selective-SSM blocks and can run frame by frame
//! through a [`StreamSession`].

mod config;
mod forward;
mod stream;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Ablation, ConvFfnKind, MambaConfig, Mode, ModelConfig};
pub use forward::Forward;
pub use stream::{ChunkNormalizer, StreamFrame, StreamSession, LOOKAHEAD_FRAMES, NORMALIZER_HALF_LIFE_S};

use crate::nn::{normal, truncated_normal, Checkpoint, Graph, NnError, ParamStore, Tensor};
use crate::sfi_stft::{
    is_supported_rate, istft, required_output_bins, stft, stft_with, ComplexSpectrogram, PadMode, SfiError, StftParams,
    Waveform,
};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("output bins {f_d} are fewer than input bins {f_e}")]
    BadBinCount { f_e: usize, f_d: usize },
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),
    #[error("stream session is closed")]
    SessionClosed,
    #[error("operation needs a {0:?} model")]
    WrongMode(Mode),
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stft(#[from] SfiError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Inverse of softplus, for step-size bias initialization.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn init_tensor<R: Rng>(rng: &mut R, name: &str, shape: &[usize]) -> Tensor {
    if name.ends_with("dt_proj.bias") {
        // step sizes log-uniform in [1e-3, 1e-1]
        let data = (0..shape[0])
            .map(|_| {
                let u: f64 = rng.gen();
                softplus_inv((1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp())
            })
            .collect();
        return Tensor::new(shape.to_vec(), data);
    }
    if name.ends_with(".bias") || name.ends_with(".beta") {
        return Tensor::zeros(shape);
    }
    if name.ends_with(".gamma") || name.ends_with(".D") {
        return Tensor::full(shape, 1.0);
    }
    if name.ends_with(".A_log") {
        let (d, n) = (shape[0], shape[1]);
        let data = (0..d).flat_map(|_| (1..=n).map(|k| (k as f64).ln())).collect();
        return Tensor::new(shape.to_vec(), data);
    }
    if name == "decoder.ext_query" || name.starts_with("freq_proj.") {
        return normal(rng, shape, INIT_STD);
    }
    truncated_normal(rng, shape, INIT_STD)
}

/// Population standard deviation used for utterance normalization; 1 for silence.
pub fn utterance_scale(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 1.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        std
    } else {
        1.0
    }
}

/// Output length for `n` input samples decoded from `f_e` to `f_d`.
pub fn output_len(n: usize, f_e: u32, f_d: u32) -> usize {
    ((n as f64) * f_d as f64 / f_e as f64).round() as usize
}

impl Model {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in cfg.param_shapes() {
            let t = init_tensor(&mut rng, &name, &shape);
            params.add(&name, t)?;
        }
        Ok(Self { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Parameter counts grouped by module path, `depth` components deep.
    pub fn describe(&self, depth: usize) -> Vec<(String, usize)> {
        self.params.count_by_prefix(depth)
    }

    pub fn forward<'a>(&'a self, g: &'a Graph) -> Forward<'a> {
        Forward::new(g, &self.params, &self.cfg)
    }

    /// Copies every parameter of `other` whose name and shape also exist here.
    /// Returns how many tensors were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        let mut copied = 0;
        for name in names {
            if let Some(src) = other.get(&name) {
                let dst = self.params.get_mut(&name).expect("listed name");
                if dst.shape == src.shape {
                    *dst = (**src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            meta: serde_json::json!({ "model": self.cfg }),
        }
    }

    /// Rebuilds a model from a checkpoint. The config comes from `cfg` if given,
    /// otherwise from the checkpoint metadata; every tensor must match exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: Option<ModelConfig>) -> Result<Self> {
        let cfg = match cfg {
            Some(c) => c,
            None => serde_json::from_value(ckpt.meta.get("model").cloned().unwrap_or_default())
                .map_err(|e| ModelError::CheckpointMismatch(format!("no usable model config: {e}")))?,
        };
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in cfg.param_shapes() {
            let t = ckpt.get(&name).ok_or_else(|| ModelError::CheckpointMismatch(format!("missing `{name}`")))?;
            if t.shape != shape {
                return Err(ModelError::CheckpointMismatch(format!(
                    "`{name}` has shape {:?}, config expects {shape:?}",
                    t.shape
                )));
            }
            params.add(&name, t.clone())?;
        }
        Ok(Self { cfg, params })
    }

    pub(crate) fn check_rates(f_e: u32, f_d: u32) -> Result<()> {
        for r in [f_e, f_d] {
            if !is_supported_rate(r) {
                return Err(ModelError::UnsupportedRate(r));
            }
        }
        Ok(())
    }

    /// Runs the network on an analysed input and returns the output spectrogram at `f_d`.
    pub fn restore_spectrogram(&self, x: &ComplexSpectrogram, f_d: u32) -> Result<ComplexSpectrogram> {
        let f_e = x.params.sample_rate;
        Self::check_rates(f_e, f_d)?;
        let p_d = StftParams::for_rate(f_d)?;
        let f_d_bins = required_output_bins(f_e, f_d, x.n_bins())?;
        let g = Graph::inference();
        let xin = g.constant(Tensor::new(vec![2, x.n_bins(), x.n_frames], x.to_channels_first()));
        let y = self.forward(&g).forward(xin, f_d_bins)?;
        Ok(ComplexSpectrogram::from_channels_first(&g.value(y).data, x.n_frames, p_d)?)
    }

    /// Waveform restoration at output rate `f_d`.
    ///
    /// Offline models normalize by the utterance standard deviation; streaming
    /// models use the causal running normalizer and zero-history analysis, so this
    /// is the whole-sequence reference for a [`StreamSession`].
    pub fn restore(&self, x: &Waveform, f_d: u32) -> Result<Waveform> {
        let f_e = x.sample_rate;
        Self::check_rates(f_e, f_d)?;
        if x.is_empty() {
            return Err(SfiError::EmptySignal.into());
        }
        let p_e = StftParams::for_rate(f_e)?;
        let n_out = output_len(x.len(), f_e, f_d);
        match self.cfg.mode {
            Mode::Offline => {
                let scale = utterance_scale(&x.samples);
                let xn = Waveform::new(x.samples.iter().map(|v| v / scale).collect(), f_e);
                let y = self.restore_spectrogram(&stft(&xn, &p_e)?, f_d)?;
                let mut out = istft(&y, n_out)?;
                out.samples.iter_mut().for_each(|v| *v *= scale);
                Ok(out)
            }
            Mode::Streaming => {
                let p_d = StftParams::for_rate(f_d)?;
                let t = p_e.n_frames(x.len());
                let mut padded = x.samples.clone();
                padded.resize(t * p_e.hop, 0.0);
                let mut norm = ChunkNormalizer::new(f_e);
                let mut scales = Vec::with_capacity(t);
                for chunk in padded.chunks_mut(p_e.hop) {
                    let s = norm.push(chunk);
                    chunk.iter_mut().for_each(|v| *v *= s);
                    scales.push(s);
                }
                let spec = stft_with(&Waveform::new(padded, f_e), &p_e, PadMode::Zero)?;
                let y = self.restore_spectrogram(&spec, f_d)?;
                let mut out = istft(&y, t * p_d.hop)?;
                for (chunk, s) in out.samples.chunks_mut(p_d.hop).zip(&scales) {
                    chunk.iter_mut().for_each(|v| *v /= s);
                }
                out.samples.truncate(n_out);
                Ok(out)
            }
        }
    }

    /// Opens a frame-by-frame session; streaming models only.
    pub fn stream_session(&self, f_e: u32, f_d: u32) -> Result<StreamSession<'_>> {
        StreamSession::new(self, f_e, f_d)
    }
}

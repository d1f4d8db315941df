//! Frame-by-frame inference for streaming models.
//!
//! Each pushed chunk of one hop is normalized by a causal running level,
//! analysed into one spectral frame and fed through the network. The 3x3 input
//! and output convolutions each look one frame ahead, so output frame `o` is
//! produced once input chunk `o + 2` has arrived. Time modules keep a
//! per-bin convolution history and SSM state instead of rescanning the past.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::nn::{layer_norm_forward, linear_forward, silu, softplus, ssm_step, Graph, Tensor, Var};
use crate::sfi_stft::{required_output_bins, HOP_MS, WINDOW_MS, SfiError, StftParams, StreamingAnalysis, StreamingSynthesis};

use super::config::{MambaConfig, Mode};
use super::{Model, ModelError, Result};

pub const NORMALIZER_HALF_LIFE_S: f64 = 1.0;
/// Input frames that must arrive after frame `o` before it is emitted.
pub const LOOKAHEAD_FRAMES: usize = 2;
/// Lowest level the normalizer divides by.
pub const NORMALIZER_FLOOR: f64 = 1e-4;

/// Causal level normalizer: exponentially weighted mean square with a one
/// second half-life, bias-corrected for the start of the stream.
#[derive(Debug, Clone)]
pub struct ChunkNormalizer {
    decay: f64,
    mean_sq: f64,
    weight: f64,
}

impl ChunkNormalizer {
    pub fn new(sample_rate: u32) -> Self {
        let decay = 0.5f64.powf(1.0 / (NORMALIZER_HALF_LIFE_S * sample_rate as f64));
        Self { decay, mean_sq: 0.0, weight: 0.0 }
    }

    /// Folds `chunk` into the running level and returns the gain for that chunk.
    pub fn push(&mut self, chunk: &[f64]) -> f64 {
        for &v in chunk {
            self.mean_sq = self.decay * self.mean_sq + (1.0 - self.decay) * v * v;
            self.weight = self.decay * self.weight + (1.0 - self.decay);
        }
        let rms = if self.weight > 0.0 { (self.mean_sq / self.weight).sqrt() } else { 0.0 };
        1.0 / rms.max(NORMALIZER_FLOOR)
    }
}

/// One output frame of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFrame {
    pub index: usize,
    /// Interleaved `(re, im)` over output bins.
    pub spectrum: Vec<f64>,
    /// Output samples completed by this frame (the previous hop; empty for frame 0,
    /// and the final frame also carries the tail).
    pub samples: Vec<f64>,
}

struct MambaParams {
    gamma: Arc<Tensor>,
    beta: Arc<Tensor>,
    in_proj: Arc<Tensor>,
    conv_w: Arc<Tensor>,
    conv_b: Arc<Tensor>,
    x_proj: Arc<Tensor>,
    dt_w: Arc<Tensor>,
    dt_b: Arc<Tensor>,
    a: Vec<f64>,
    skip: Arc<Tensor>,
    out_proj: Arc<Tensor>,
}

impl MambaParams {
    fn load(model: &Model, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            model
                .params
                .get(&format!("{prefix}.{name}"))
                .cloned()
                .ok_or_else(|| ModelError::CheckpointMismatch(format!("missing `{prefix}.{name}`")))
        };
        let a_log = get("A_log")?;
        Ok(Self {
            gamma: get("norm.gamma")?,
            beta: get("norm.beta")?,
            in_proj: get("in_proj.weight")?,
            conv_w: get("conv.weight")?,
            conv_b: get("conv.bias")?,
            x_proj: get("x_proj.weight")?,
            dt_w: get("dt_proj.weight")?,
            dt_b: get("dt_proj.bias")?,
            a: a_log.data.iter().map(|v| -v.exp()).collect(),
            skip: get("D")?,
            out_proj: get("out_proj.weight")?,
        })
    }
}

/// Convolution history (oldest first) and SSM state of one block at one bin.
#[derive(Clone)]
struct MambaState {
    hist: Vec<f64>,
    h: Vec<f64>,
}

/// One residual selective-SSM block advanced by a single step.
fn mamba_step(p: &MambaParams, m: &MambaConfig, c: usize, st: &mut MambaState, x: &[f64]) -> Vec<f64> {
    let (di, r, n, k) = (m.inner(c), m.dt_rank(c), m.d_state, m.conv_kernel);
    let xn = layer_norm_forward(x, &p.gamma.data, &p.beta.data, c);
    let xz = linear_forward(&xn, &p.in_proj.data, None, c, 2 * di);
    let (xs, z) = xz.split_at(di);
    let mut u = vec![0.0; di];
    for d in 0..di {
        let mut s = p.conv_b.data[d];
        for j in 0..k {
            let src = if j + 1 < k { st.hist[j * di + d] } else { xs[d] };
            s += p.conv_w.data[d * k + j] * src;
        }
        u[d] = silu(s);
    }
    if k > 1 {
        st.hist.copy_within(di.., 0);
        let last = (k - 2) * di;
        st.hist[last..].copy_from_slice(xs);
    }
    let dbc = linear_forward(&u, &p.x_proj.data, None, di, r + 2 * n);
    let delta: Vec<f64> = linear_forward(&dbc[..r], &p.dt_w.data, Some(&p.dt_b.data), r, di)
        .into_iter()
        .map(softplus)
        .collect();
    let mut y = vec![0.0; di];
    ssm_step(&mut st.h, &u, &delta, &p.a, &dbc[r..r + n], &dbc[r + n..], &p.skip.data, &mut y);
    for (yv, zv) in y.iter_mut().zip(z) {
        *yv *= silu(*zv);
    }
    let out = linear_forward(&y, &p.out_proj.data, None, di, c);
    x.iter().zip(out).map(|(a, b)| a + b).collect()
}

/// A time module: its blocks' parameters plus per-bin state.
struct TimeStack {
    blocks: Vec<MambaParams>,
    states: Vec<Vec<MambaState>>,
    c: usize,
}

impl TimeStack {
    fn new(model: &Model, prefix: &str, bins: usize, c: usize) -> Result<Self> {
        let m = &model.cfg.mamba;
        let (di, n, k) = (m.inner(c), m.d_state, m.conv_kernel);
        let blocks = (0..m.blocks)
            .map(|i| MambaParams::load(model, &format!("{prefix}.mamba.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let fresh = MambaState { hist: vec![0.0; k.saturating_sub(1) * di], h: vec![0.0; di * n] };
        let states = vec![vec![fresh; m.blocks]; bins];
        Ok(Self { blocks, states, c })
    }

    /// Advances every bin of a `[F * C]` frame by one step.
    fn step(&mut self, m: &MambaConfig, frame: &[f64]) -> Vec<f64> {
        let c = self.c;
        let mut out = Vec::with_capacity(frame.len());
        for (row, states) in frame.chunks(c).zip(self.states.iter_mut()) {
            let mut x = row.to_vec();
            for (p, st) in self.blocks.iter().zip(states.iter_mut()) {
                x = mamba_step(p, m, c, st, &x);
            }
            out.extend(x);
        }
        out
    }
}

/// Last few frames by absolute index; missing ones read as zeros.
struct Window {
    frames: VecDeque<(usize, Vec<f64>)>,
    zeros: Vec<f64>,
}

impl Window {
    fn new(len: usize) -> Self {
        Self { frames: VecDeque::new(), zeros: vec![0.0; len] }
    }

    fn push(&mut self, index: usize, v: Vec<f64>) {
        self.frames.push_back((index, v));
        while self.frames.len() > 3 {
            self.frames.pop_front();
        }
    }

    fn get(&self, index: Option<usize>) -> &[f64] {
        index
            .and_then(|i| self.frames.iter().find(|(j, _)| *j == i))
            .map_or(&self.zeros, |(_, v)| v)
    }
}

/// Frame-by-frame session over a streaming model.
pub struct StreamSession<'m> {
    model: &'m Model,
    p_e: StftParams,
    f_e_bins: usize,
    f_d_bins: usize,
    normalizer: ChunkNormalizer,
    analysis: StreamingAnalysis,
    synthesis: StreamingSynthesis,
    scales: VecDeque<f64>,
    inputs: Window,
    decoded: Window,
    encoder: Vec<TimeStack>,
    decoder: Vec<TimeStack>,
    n_in: usize,
    n_model: usize,
    n_out: usize,
    closed: bool,
}

impl<'m> StreamSession<'m> {
    pub fn new(model: &'m Model, f_e: u32, f_d: u32) -> Result<Self> {
        if model.cfg.mode != Mode::Streaming {
            return Err(ModelError::WrongMode(Mode::Streaming));
        }
        Model::check_rates(f_e, f_d)?;
        let p_e = StftParams::for_rate(f_e)?;
        let p_d = StftParams::for_rate(f_d)?;
        let f_e_bins = p_e.n_bins;
        let f_d_bins = required_output_bins(f_e, f_d, f_e_bins)?;
        if f_d_bins > model.cfg.f_max {
            return Err(crate::nn::NnError::FTooLarge { f: f_d_bins, f_max: model.cfg.f_max }.into());
        }
        let cfg = &model.cfg;
        let encoder = (0..cfg.encoder_blocks())
            .map(|b| TimeStack::new(model, &format!("encoder.{b}.time"), f_e_bins, cfg.c_e))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.b_d)
            .map(|b| TimeStack::new(model, &format!("decoder.{b}.time"), f_d_bins, cfg.c_d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            p_e,
            f_e_bins,
            f_d_bins,
            normalizer: ChunkNormalizer::new(f_e),
            analysis: StreamingAnalysis::new(&p_e)?,
            synthesis: StreamingSynthesis::new(&p_d)?,
            scales: VecDeque::new(),
            inputs: Window::new(2 * f_e_bins),
            decoded: Window::new(f_d_bins * cfg.c_d),
            encoder,
            decoder,
            n_in: 0,
            n_model: 0,
            n_out: 0,
            closed: false,
        })
    }

    /// Input chunk length in samples.
    pub fn hop(&self) -> usize {
        self.p_e.hop
    }

    pub fn output_bins(&self) -> usize {
        self.f_d_bins
    }

    /// Algorithmic latency: one analysis window plus the lookahead hops.
    pub fn latency_ms(&self) -> f64 {
        WINDOW_MS + LOOKAHEAD_FRAMES as f64 * HOP_MS
    }

    /// Pushes one hop of input; returns the output frame it completes, if any.
    pub fn stream_step(&mut self, chunk: &[f64]) -> Result<Option<StreamFrame>> {
        if self.closed {
            return Err(ModelError::SessionClosed);
        }
        if chunk.len() != self.p_e.hop {
            return Err(SfiError::ShapeMismatch(format!("chunk of {} samples, expected {}", chunk.len(), self.p_e.hop))
                .into());
        }
        let s = self.normalizer.push(chunk);
        let scaled: Vec<f64> = chunk.iter().map(|v| v * s).collect();
        self.scales.push_back(s);
        let frame = self.analysis.push(&scaled)?;
        self.inputs.push(self.n_in, frame);
        self.n_in += 1;

        if self.n_model + 1 < self.n_in {
            self.run_model_frame()?;
        }
        if self.n_out + 1 < self.n_model {
            return Ok(Some(self.emit_frame()?));
        }
        Ok(None)
    }

    /// Ends the stream, treating the future as silence, and returns the remaining frames.
    pub fn flush(&mut self) -> Result<Vec<StreamFrame>> {
        if self.closed {
            return Err(ModelError::SessionClosed);
        }
        self.closed = true;
        while self.n_model < self.n_in {
            self.run_model_frame()?;
        }
        let mut out = Vec::new();
        while self.n_out < self.n_model {
            out.push(self.emit_frame()?);
        }
        if let Some(last) = out.last_mut() {
            let tail = self.synthesis.finish();
            let s = self.scales.pop_front().unwrap_or(1.0);
            last.samples.extend(tail.into_iter().map(|v| v / s));
        }
        Ok(out)
    }

    fn run_model_frame(&mut self) -> Result<()> {
        let m = self.n_model;
        let cfg = &self.model.cfg;
        let f = self.f_e_bins;
        let cols = [self.inputs.get(m.checked_sub(1)), self.inputs.get(Some(m)), self.inputs.get(Some(m + 1))];
        let mut data = vec![0.0; 2 * f * 3];
        for (t, col) in cols.iter().enumerate() {
            for b in 0..f {
                data[b * 3 + t] = col[2 * b];
                data[f * 3 + b * 3 + t] = col[2 * b + 1];
            }
        }
        let g = Graph::inference();
        let fwd = self.model.forward(&g);
        let mut z = fwd.input_projection(g.constant(Tensor::new(vec![2, f, 3], data)), 0)?;
        for (b, stack) in self.encoder.iter_mut().enumerate() {
            z = fwd.freq_self_module(z, &format!("encoder.{b}.freq"))?;
            z = step_var(&g, z, stack, &cfg.mamba);
        }
        let (mut x, kv) = fwd.bridge(z, self.f_d_bins)?;
        for (b, stack) in self.decoder.iter_mut().enumerate() {
            x = fwd.freq_cross_module(x, kv, f, &format!("decoder.{b}.freq"))?;
            x = step_var(&g, x, stack, &cfg.mamba);
        }
        self.decoded.push(m, g.value(x).data.clone());
        self.n_model += 1;
        Ok(())
    }

    fn emit_frame(&mut self) -> Result<StreamFrame> {
        let o = self.n_out;
        let (fd, cd) = (self.f_d_bins, self.model.cfg.c_d);
        let mut data = Vec::with_capacity(3 * fd * cd);
        for i in [o.checked_sub(1), Some(o), Some(o + 1)] {
            // the frame after the last model frame is padding
            let i = i.filter(|&i| i < self.n_model);
            data.extend_from_slice(self.decoded.get(i));
        }
        let g = Graph::inference();
        let fwd = self.model.forward(&g);
        let y = fwd.output_projection(g.constant(Tensor::new(vec![3, fd, cd], data)), 0)?;
        let v = &g.value(y).data;
        let spectrum: Vec<f64> = (0..fd).flat_map(|b| [v[b], v[fd + b]]).collect();
        let mut samples = self.synthesis.push(&spectrum)?;
        if o > 0 {
            let s = self.scales.pop_front().unwrap_or(1.0);
            samples.iter_mut().for_each(|v| *v /= s);
        }
        self.n_out += 1;
        Ok(StreamFrame { index: o, spectrum, samples })
    }
}

fn step_var(g: &Graph, x: Var, stack: &mut TimeStack, m: &MambaConfig) -> Var {
    let shape = g.shape(x);
    let y = stack.step(m, &g.value(x).data);
    g.constant(Tensor::new(shape, y))
}

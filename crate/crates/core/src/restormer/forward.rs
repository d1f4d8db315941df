//! Graph construction for the encoder, decoder and their modules.
//!
//! Feature maps are `[T, F, C]`. Frequency modules treat frames as the batch
//! axis; time modules permute to `[F, T, C]` and treat bins as the batch axis.

use crate::nn::{sinusoidal_table, Graph, ParamStore, Var};

use super::config::{ConvFfnKind, Mode, ModelConfig};
use super::{ModelError, Result};

pub struct Forward<'a> {
    pub g: &'a Graph,
    pub store: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

impl<'a> Forward<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore, cfg: &'a ModelConfig) -> Self {
        Self { g, store, cfg }
    }

    fn p(&self, name: &str) -> Result<Var> {
        Ok(self.g.param(self.store, name)?)
    }

    fn linear(&self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.p(&format!("{prefix}.bias"))?) } else { None };
        Ok(self.g.linear(x, w, b)?)
    }

    fn norm(&self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        Ok(self.g.layer_norm(x, gamma, beta)?)
    }

    fn residual(&self, x: Var, branch: Var) -> Result<Var> {
        Ok(self.g.add(x, branch)?)
    }

    fn proj_mats(&self) -> Result<Vec<Var>> {
        (0..self.cfg.heads).map(|h| self.p(&format!("freq_proj.a.{h}"))).collect()
    }

    /// Feed-forward branch over the sequence axis of `[B, L, C]` (residual not added).
    pub fn conv_ffn(&self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.g;
        let pad = self.cfg.kernel / 2;
        let xn = self.norm(x, &format!("{prefix}.norm"))?;
        match self.cfg.conv_ffn {
            ConvFfnKind::Full => {
                let w1 = self.p(&format!("{prefix}.expand.weight"))?;
                let b1 = self.p(&format!("{prefix}.expand.bias"))?;
                let h = g.conv1d(xn, w1, Some(b1), pad, pad)?;
                let h = g.swiglu(h)?;
                let w2 = self.p(&format!("{prefix}.contract.weight"))?;
                let b2 = self.p(&format!("{prefix}.contract.bias"))?;
                Ok(g.conv1d(h, w2, Some(b2), pad, pad)?)
            }
            ConvFfnKind::Depthwise => {
                let h = self.linear(xn, &format!("{prefix}.expand"), true)?;
                let h = g.swiglu(h)?;
                let wd = self.p(&format!("{prefix}.dw.weight"))?;
                let bd = self.p(&format!("{prefix}.dw.bias"))?;
                let h = g.depthwise_conv1d(h, wd, Some(bd), pad, pad)?;
                self.linear(h, &format!("{prefix}.contract"), true)
            }
        }
    }

    /// Self-attention over frames with rotary positions (branch only).
    fn time_attention(&self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.g;
        let xn = self.norm(x, &format!("{prefix}.norm"))?;
        let q = self.linear(xn, &format!("{prefix}.q"), true)?;
        let k = self.linear(xn, &format!("{prefix}.k"), true)?;
        let v = self.linear(xn, &format!("{prefix}.v"), true)?;
        let q = g.rope(q, self.cfg.heads, 0)?;
        let k = g.rope(k, self.cfg.heads, 0)?;
        let a = g.attention(q, k, v, self.cfg.heads)?;
        self.linear(a, &format!("{prefix}.o"), true)
    }

    /// Attention over bins whose keys and values are compressed by the shared
    /// frequency projection. `kv` defaults to the normalized queries' source.
    fn freq_attention(&self, x: Var, kv: Option<Var>, prefix: &str) -> Result<Var> {
        let g = self.g;
        let xn = self.norm(x, &format!("{prefix}.norm"))?;
        let src = match kv {
            Some(kv) => self.norm(kv, &format!("{prefix}.kv_norm"))?,
            None => xn,
        };
        let q = self.linear(xn, &format!("{prefix}.q"), true)?;
        let k = self.linear(src, &format!("{prefix}.k"), true)?;
        let v = self.linear(src, &format!("{prefix}.v"), true)?;
        let mats = self.proj_mats()?;
        let k = g.freq_project(k, &mats)?;
        let v = g.freq_project(v, &mats)?;
        let a = g.attention(q, k, v, self.cfg.heads)?;
        self.linear(a, &format!("{prefix}.o"), true)
    }

    /// Encoder frequency module on `[T, F, C]`.
    pub fn freq_self_module(&self, x: Var, prefix: &str) -> Result<Var> {
        let x = self.residual(x, self.conv_ffn(x, &format!("{prefix}.ffn1"))?)?;
        let x = self.residual(x, self.freq_attention(x, None, &format!("{prefix}.attn"))?)?;
        self.residual(x, self.conv_ffn(x, &format!("{prefix}.ffn2"))?)
    }

    /// Decoder frequency module on `[T, F_D, C]`: cross-attention from the
    /// extension rows `[f_e, F_D)` to the encoder keys/values, then self-attention
    /// over every row, then one feed-forward block.
    pub fn freq_cross_module(&self, x: Var, kv: Option<Var>, f_e: usize, prefix: &str) -> Result<Var> {
        let g = self.g;
        let shape = g.shape(x);
        let (t, f_d, c) = (shape[0], shape[1], shape[2]);
        let mut x = x;
        if let Some(kv) = kv.filter(|_| f_d > f_e && self.cfg.uses_mhca()) {
            let low = g.narrow(x, 1, 0, f_e)?;
            let high = g.narrow(x, 1, f_e, f_d - f_e)?;
            let upd = self.freq_attention(high, Some(kv), &format!("{prefix}.mhca"))?;
            let high = self.residual(high, upd)?;
            x = g.concat(&[low, high], 1)?;
            debug_assert_eq!(g.shape(x), vec![t, f_d, c]);
        }
        let x = self.residual(x, self.freq_attention(x, None, &format!("{prefix}.attn"))?)?;
        self.residual(x, self.conv_ffn(x, &format!("{prefix}.ffn"))?)
    }

    /// One selective-SSM block with residual on `[B, L, C]`.
    pub fn mamba_block(&self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.g;
        let c = g.shape(x)[2];
        let m = &self.cfg.mamba;
        let (di, r, n) = (m.inner(c), m.dt_rank(c), m.d_state);
        let xn = self.norm(x, &format!("{prefix}.norm"))?;
        let xz = self.linear(xn, &format!("{prefix}.in_proj"), false)?;
        let xs = g.narrow(xz, 2, 0, di)?;
        let z = g.narrow(xz, 2, di, di)?;
        let cw = self.p(&format!("{prefix}.conv.weight"))?;
        let cb = self.p(&format!("{prefix}.conv.bias"))?;
        let u = g.depthwise_conv1d(xs, cw, Some(cb), m.conv_kernel - 1, 0)?;
        let u = g.silu(u);
        let dbc = self.linear(u, &format!("{prefix}.x_proj"), false)?;
        let dt = g.narrow(dbc, 2, 0, r)?;
        let bm = g.narrow(dbc, 2, r, n)?;
        let cm = g.narrow(dbc, 2, r + n, n)?;
        let delta = g.softplus(self.linear(dt, &format!("{prefix}.dt_proj"), true)?);
        let a = g.neg(g.exp(self.p(&format!("{prefix}.A_log"))?));
        let skip = self.p(&format!("{prefix}.D"))?;
        let y = g.selective_scan(u, delta, a, bm, cm, skip)?;
        let y = g.mul(y, g.silu(z))?;
        let out = self.linear(y, &format!("{prefix}.out_proj"), false)?;
        self.residual(x, out)
    }

    /// Time module on `[T, F, C]`.
    pub fn time_module(&self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.g;
        let mut y = g.permute(x, &[1, 0, 2])?;
        match self.cfg.mode {
            Mode::Offline => {
                y = self.residual(y, self.conv_ffn(y, &format!("{prefix}.ffn1"))?)?;
                y = self.residual(y, self.time_attention(y, &format!("{prefix}.attn"))?)?;
                y = self.residual(y, self.conv_ffn(y, &format!("{prefix}.ffn2"))?)?;
            }
            Mode::Streaming => {
                for i in 0..self.cfg.mamba.blocks {
                    y = self.mamba_block(y, &format!("{prefix}.mamba.{i}"))?;
                }
            }
        }
        Ok(g.permute(y, &[1, 0, 2])?)
    }

    fn add_freq_pe(&self, x: Var) -> Result<Var> {
        let shape = self.g.shape(x);
        let pe = self.g.constant(sinusoidal_table(shape[1], shape[2]));
        let pe = self.g.broadcast_leading(pe, shape[0]);
        Ok(self.g.add(x, pe)?)
    }

    /// Input projection: `[2, F, T]` conv map to `[T, F, C_E]` features with
    /// normalization and frequency encoding. `time_pad` is 1 for whole sequences
    /// and 0 when the caller supplies the neighbouring frames explicitly.
    pub fn input_projection(&self, x: Var, time_pad: usize) -> Result<Var> {
        let g = self.g;
        let w = self.p("input.conv.weight")?;
        let b = self.p("input.conv.bias")?;
        let h = g.conv2d(x, w, Some(b), (1, 1), (1, time_pad))?;
        let h = g.permute(h, &[2, 1, 0])?;
        let h = self.norm(h, "input.norm")?;
        self.add_freq_pe(h)
    }

    /// Encoder blocks on `[T, F_E, C_E]`.
    pub fn encoder_blocks(&self, mut z: Var) -> Result<Var> {
        for b in 0..self.cfg.encoder_blocks() {
            z = self.freq_self_module(z, &format!("encoder.{b}.freq"))?;
            z = self.time_module(z, &format!("encoder.{b}.time"))?;
        }
        Ok(z)
    }

    /// Projects encoder features to the decoder width and pads extension queries up to `f_d` rows.
    /// Returns the decoder input and the cross-attention key/value source.
    pub fn bridge(&self, z: Var, f_d: usize) -> Result<(Var, Option<Var>)> {
        let g = self.g;
        let shape = g.shape(z);
        let (t, f_e) = (shape[0], shape[1]);
        if f_d < f_e {
            return Err(ModelError::BadBinCount { f_e, f_d });
        }
        if f_d > self.cfg.f_max {
            return Err(ModelError::Nn(crate::nn::NnError::FTooLarge { f: f_d, f_max: self.cfg.f_max }));
        }
        let d = self.linear(z, "bridge.proj", true)?;
        let kv = match (self.cfg.uses_mhca() && f_d > f_e, self.cfg.shared_kv_projection) {
            (false, _) => None,
            (true, true) => Some(d),
            (true, false) => Some(self.linear(z, "bridge.kv", true)?),
        };
        let mut x = d;
        if f_d > f_e {
            let table = self.p("decoder.ext_query")?;
            let rows = g.narrow(table, 0, f_e, f_d - f_e)?;
            let q = g.broadcast_leading(rows, t);
            x = g.concat(&[d, q], 1)?;
        }
        if self.cfg.decoder_pe {
            x = self.add_freq_pe(x)?;
        }
        Ok((x, kv))
    }

    /// Decoder blocks on `[T, F_D, C_D]`.
    pub fn decoder_blocks(&self, mut x: Var, kv: Option<Var>, f_e: usize) -> Result<Var> {
        for b in 0..self.cfg.b_d {
            x = self.freq_cross_module(x, kv, f_e, &format!("decoder.{b}.freq"))?;
            x = self.time_module(x, &format!("decoder.{b}.time"))?;
        }
        Ok(x)
    }

    /// Output head: `[T, F_D, C_D]` to a `[2, F_D, T']` conv map.
    pub fn output_projection(&self, x: Var, time_pad: usize) -> Result<Var> {
        let g = self.g;
        let h = g.permute(x, &[2, 1, 0])?;
        let w = self.p("output.conv.weight")?;
        let b = self.p("output.conv.bias")?;
        Ok(g.conv2d(h, w, Some(b), (1, 1), (1, time_pad))?)
    }

    /// Encoder features `Z: [T, F_E, C_E]` from a `[2, F_E, T]` input map.
    pub fn encode(&self, x: Var) -> Result<Var> {
        let z = self.input_projection(x, 1)?;
        self.encoder_blocks(z)
    }

    /// Complex output map `[2, f_d, T]` from encoder features.
    pub fn decode(&self, z: Var, f_d: usize) -> Result<Var> {
        let f_e = self.g.shape(z)[1];
        let (x, kv) = self.bridge(z, f_d)?;
        let x = self.decoder_blocks(x, kv, f_e)?;
        self.output_projection(x, 1)
    }

    pub fn forward(&self, x: Var, f_d: usize) -> Result<Var> {
        let z = self.encode(x)?;
        self.decode(z, f_d)
    }
}

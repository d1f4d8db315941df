use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Attention-based time modules over the whole utterance.
    Offline,
    /// Causal selective-SSM time modules; supports frame-by-frame sessions.
    Streaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Decoder frequency modules without cross-attention.
    NoMhca,
    /// No encoder blocks; extension queries are padded right after the input projection.
    DecoderOnly,
}

/// How the feed-forward blocks mix along their sequence axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvFfnKind {
    /// Full 1-D convolutions for both the expansion and the contraction.
    Full,
    /// Pointwise expansion, depthwise convolution, pointwise contraction.
    Depthwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MambaConfig {
    pub blocks: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub expand: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self { blocks: 2, d_state: 16, conv_kernel: 3, expand: 4 }
    }
}

impl MambaConfig {
    pub fn inner(&self, c: usize) -> usize {
        self.expand * c
    }

    /// Rank of the step-size projection.
    pub fn dt_rank(&self, c: usize) -> usize {
        c.div_ceil(16)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub c_e: usize,
    pub b_e: usize,
    pub c_d: usize,
    pub b_d: usize,
    /// Kernel size of the feed-forward convolutions.
    pub kernel: usize,
    pub heads: usize,
    pub f_proj: usize,
    pub f_max: usize,
    pub ffn_expansion: usize,
    pub conv_ffn: ConvFfnKind,
    pub mode: Mode,
    pub ablation: Ablation,
    /// Add the frequency encoding again after padding the decoder input.
    pub decoder_pe: bool,
    /// Use the decoder input projection as the cross-attention key/value source.
    pub shared_kv_projection: bool,
    pub mamba: MambaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_offline()
    }
}

impl ModelConfig {
    pub fn full_offline() -> Self {
        Self {
            c_e: 128,
            b_e: 6,
            c_d: 64,
            b_d: 3,
            kernel: 7,
            heads: 4,
            f_proj: 512,
            f_max: 961,
            ffn_expansion: 3,
            conv_ffn: ConvFfnKind::Full,
            mode: Mode::Offline,
            ablation: Ablation::Full,
            decoder_pe: true,
            shared_kv_projection: false,
            mamba: MambaConfig::default(),
        }
    }

    pub fn full_streaming() -> Self {
        Self { mode: Mode::Streaming, ..Self::full_offline() }
    }

    /// Small model for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self { c_e: 8, b_e: 1, c_d: 8, b_d: 1, heads: 2, f_proj: 16, ..Self::full_offline() }
    }

    /// Encoder depth after applying the ablation.
    pub fn encoder_blocks(&self) -> usize {
        match self.ablation {
            Ablation::DecoderOnly => 0,
            _ => self.b_e,
        }
    }

    pub fn uses_mhca(&self) -> bool {
        self.ablation != Ablation::NoMhca
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.c_e == 0 || self.c_d == 0 || self.heads == 0 || self.f_proj == 0 || self.f_max == 0 {
            return bad("channel, head and projection sizes must be positive".into());
        }
        for (name, c) in [("c_e", self.c_e), ("c_d", self.c_d)] {
            if c % self.heads != 0 {
                return bad(format!("{name} = {c} is not divisible by {} heads", self.heads));
            }
            if self.mode == Mode::Offline && (c / self.heads) % 2 != 0 {
                return bad(format!("{name} = {c} gives an odd head width; rotary encoding needs pairs"));
            }
        }
        if self.f_proj > self.f_max {
            return bad(format!("f_proj = {} exceeds f_max = {}", self.f_proj, self.f_max));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel = {} must be odd", self.kernel));
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive".into());
        }
        if self.b_d == 0 {
            return bad("the decoder needs at least one block".into());
        }
        if self.mode == Mode::Streaming {
            let m = &self.mamba;
            if m.blocks == 0 || m.d_state == 0 || m.conv_kernel == 0 || m.expand == 0 {
                return bad("mamba sizes must be positive".into());
            }
        }
        Ok(())
    }

    /// Every parameter name and shape in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let (ce, cd, k) = (self.c_e, self.c_d, self.kernel);

        push("input.conv.weight".into(), vec![ce, 2, 3, 3]);
        push("input.conv.bias".into(), vec![ce]);
        norm_shapes(&mut push, "input.norm", ce);

        for h in 0..self.heads {
            push(format!("freq_proj.a.{h}"), vec![self.f_max, self.f_proj]);
        }

        for b in 0..self.encoder_blocks() {
            let p = format!("encoder.{b}");
            ffn_shapes(&mut push, &format!("{p}.freq.ffn1"), ce, k, self.ffn_expansion, self.conv_ffn);
            attn_shapes(&mut push, &format!("{p}.freq.attn"), ce);
            ffn_shapes(&mut push, &format!("{p}.freq.ffn2"), ce, k, self.ffn_expansion, self.conv_ffn);
            self.time_shapes(&mut push, &format!("{p}.time"), ce);
        }

        linear_shapes(&mut push, "bridge.proj", ce, cd);
        if self.uses_mhca() && !self.shared_kv_projection {
            linear_shapes(&mut push, "bridge.kv", ce, cd);
        }
        push("decoder.ext_query".into(), vec![self.f_max, cd]);

        for b in 0..self.b_d {
            let p = format!("decoder.{b}");
            if self.uses_mhca() {
                norm_shapes(&mut push, &format!("{p}.freq.mhca.kv_norm"), cd);
                attn_shapes(&mut push, &format!("{p}.freq.mhca"), cd);
            }
            attn_shapes(&mut push, &format!("{p}.freq.attn"), cd);
            ffn_shapes(&mut push, &format!("{p}.freq.ffn"), cd, k, self.ffn_expansion, self.conv_ffn);
            self.time_shapes(&mut push, &format!("{p}.time"), cd);
        }

        push("output.conv.weight".into(), vec![2, cd, 3, 3]);
        push("output.conv.bias".into(), vec![2]);
        out
    }

    fn time_shapes(&self, push: &mut impl FnMut(String, Vec<usize>), p: &str, c: usize) {
        match self.mode {
            Mode::Offline => {
                ffn_shapes(push, &format!("{p}.ffn1"), c, self.kernel, self.ffn_expansion, self.conv_ffn);
                attn_shapes(push, &format!("{p}.attn"), c);
                ffn_shapes(push, &format!("{p}.ffn2"), c, self.kernel, self.ffn_expansion, self.conv_ffn);
            }
            Mode::Streaming => {
                let m = &self.mamba;
                let (di, r, n) = (m.inner(c), m.dt_rank(c), m.d_state);
                for i in 0..m.blocks {
                    let q = format!("{p}.mamba.{i}");
                    norm_shapes(push, &format!("{q}.norm"), c);
                    push(format!("{q}.in_proj.weight"), vec![2 * di, c]);
                    push(format!("{q}.conv.weight"), vec![di, m.conv_kernel]);
                    push(format!("{q}.conv.bias"), vec![di]);
                    push(format!("{q}.x_proj.weight"), vec![r + 2 * n, di]);
                    push(format!("{q}.dt_proj.weight"), vec![di, r]);
                    push(format!("{q}.dt_proj.bias"), vec![di]);
                    push(format!("{q}.A_log"), vec![di, n]);
                    push(format!("{q}.D"), vec![di]);
                    push(format!("{q}.out_proj.weight"), vec![c, di]);
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

fn norm_shapes(push: &mut impl FnMut(String, Vec<usize>), p: &str, c: usize) {
    push(format!("{p}.gamma"), vec![c]);
    push(format!("{p}.beta"), vec![c]);
}

fn linear_shapes(push: &mut impl FnMut(String, Vec<usize>), p: &str, d_in: usize, d_out: usize) {
    push(format!("{p}.weight"), vec![d_out, d_in]);
    push(format!("{p}.bias"), vec![d_out]);
}

fn attn_shapes(push: &mut impl FnMut(String, Vec<usize>), p: &str, c: usize) {
    norm_shapes(push, &format!("{p}.norm"), c);
    for w in ["q", "k", "v", "o"] {
        linear_shapes(push, &format!("{p}.{w}"), c, c);
    }
}

fn ffn_shapes(push: &mut impl FnMut(String, Vec<usize>), p: &str, c: usize, k: usize, e: usize, kind: ConvFfnKind) {
    norm_shapes(push, &format!("{p}.norm"), c);
    match kind {
        ConvFfnKind::Full => {
            push(format!("{p}.expand.weight"), vec![2 * e * c, c, k]);
            push(format!("{p}.expand.bias"), vec![2 * e * c]);
            push(format!("{p}.contract.weight"), vec![c, e * c, k]);
            push(format!("{p}.contract.bias"), vec![c]);
        }
        ConvFfnKind::Depthwise => {
            linear_shapes(push, &format!("{p}.expand"), c, 2 * e * c);
            push(format!("{p}.dw.weight"), vec![e * c, k]);
            push(format!("{p}.dw.bias"), vec![e * c]);
            linear_shapes(push, &format!("{p}.contract"), e * c, c);
        }
    }
}

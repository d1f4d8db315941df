//! Layer kernels: dense, normalization, gating, convolution.

use super::graph::{silu, silu_grad, Graph, Var};
use super::{NnError, Result, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch<T>(msg: String) -> Result<T> {
    Err(NnError::ShapeMismatch(msg))
}

/// `y = x w^T + b` over the last axis; `w` is `[out, in]`.
pub fn linear_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, d_in: usize, d_out: usize) -> Vec<f64> {
    let rows = x.len() / d_in;
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let yr = &mut y[r * d_out..(r + 1) * d_out];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &w[o * d_in..(o + 1) * d_in];
            let mut s = b.map_or(0.0, |b| b[o]);
            for (a, c) in xr.iter().zip(wr) {
                s += a * c;
            }
            *yo = s;
        }
    }
    y
}

pub fn layer_norm_forward(x: &[f64], gamma: &[f64], beta: &[f64], c: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(c).zip(y.chunks_mut(c)) {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for i in 0..c {
            yr[i] = (xr[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
    y
}

impl Graph {
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.last_dim() != tw.shape[1] {
            return mismatch(format!("linear input {:?} with weight {:?}", tx.shape, tw.shape));
        }
        let (d_out, d_in) = (tw.shape[0], tw.shape[1]);
        let tb = b.map(|b| self.value(b));
        if let Some(tb) = &tb {
            if tb.shape != [d_out] {
                return mismatch(format!("linear bias {:?} for {d_out} outputs", tb.shape));
            }
        }
        let y = linear_forward(&tx.data, &tw.data, tb.as_ref().map(|t| t.data.as_slice()), d_in, d_out);
        let mut shape = tx.shape.clone();
        *shape.last_mut().unwrap() = d_out;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.op(Tensor::new(shape, y), &inputs, move |g, ins, _| {
            let (xv, wv) = (&ins[0].data, &ins[1].data);
            let rows = xv.len() / d_in;
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let mut gb = vec![0.0; d_out];
            for r in 0..rows {
                let xr = &xv[r * d_in..(r + 1) * d_in];
                let gxr = &mut gx[r * d_in..(r + 1) * d_in];
                for o in 0..d_out {
                    let go = g[r * d_out + o];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    let wr = &wv[o * d_in..(o + 1) * d_in];
                    let gwr = &mut gw[o * d_in..(o + 1) * d_in];
                    for i in 0..d_in {
                        gxr[i] += go * wr[i];
                        gwr[i] += go * xr[i];
                    }
                }
            }
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some(gb));
            }
            out
        }))
    }

    /// Plain 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return mismatch(format!("matmul {:?} x {:?}", ta.shape, tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let br = &tb.data[p * n..(p + 1) * n];
                for (yv, bv) in y[i * n..(i + 1) * n].iter_mut().zip(br) {
                    *yv += av * bv;
                }
            }
        }
        Ok(self.op(Tensor::new(vec![m, n], y), &[a, b], move |g, ins, _| {
            let (av, bv) = (&ins[0].data, &ins[1].data);
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let gr = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let br = &bv[p * n..(p + 1) * n];
                    ga[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                    let a_ip = av[i * k + p];
                    for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                        *gbv += a_ip * gv;
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.last_dim();
        if tg.shape != [c] || tb.shape != [c] {
            return mismatch(format!("layer norm of {:?} with gain {:?} bias {:?}", tx.shape, tg.shape, tb.shape));
        }
        let y = layer_norm_forward(&tx.data, &tg.data, &tb.data, c);
        Ok(self.op(Tensor::new(tx.shape.clone(), y), &[x, gamma, beta], move |g, ins, _| {
            let (xv, gv) = (&ins[0].data, &ins[1].data);
            let mut gx = vec![0.0; xv.len()];
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for r in 0..xv.len() / c {
                let xr = &xv[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mean = xr.iter().sum::<f64>() / c as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for i in 0..c {
                    xhat[i] = (xr[i] - mean) * inv;
                    dxhat[i] = gr[i] * gv[i];
                    gg[i] += gr[i] * xhat[i];
                    gbeta[i] += gr[i];
                }
                let m1 = dxhat.iter().sum::<f64>() / c as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for i in 0..c {
                    gx[r * c + i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
            vec![Some(gx), Some(gg), Some(gbeta)]
        }))
    }

    /// Splits the last axis into `[gate | value]` and returns `silu(gate) * value`.
    pub fn swiglu(&self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c2 = tx.last_dim();
        if c2 % 2 != 0 {
            return mismatch(format!("swiglu needs an even last axis, got {:?}", tx.shape));
        }
        let h = c2 / 2;
        let rows = tx.rows();
        let mut y = vec![0.0; rows * h];
        for r in 0..rows {
            for i in 0..h {
                y[r * h + i] = silu(tx.data[r * c2 + i]) * tx.data[r * c2 + h + i];
            }
        }
        let mut shape = tx.shape.clone();
        *shape.last_mut().unwrap() = h;
        Ok(self.op(Tensor::new(shape, y), &[x], move |g, ins, _| {
            let xv = &ins[0].data;
            let mut gx = vec![0.0; xv.len()];
            for r in 0..rows {
                for i in 0..h {
                    let (a, b) = (xv[r * c2 + i], xv[r * c2 + h + i]);
                    let go = g[r * h + i];
                    gx[r * c2 + i] = go * b * silu_grad(a);
                    gx[r * c2 + h + i] = go * silu(a);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// 2-D cross-correlation on `[c_in, h, w]` with weight `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 4 || tw.shape[1] != tx.shape[0] || stride.0 == 0 || stride.1 == 0 {
            return mismatch(format!("conv2d input {:?} with weight {:?}", tx.shape, tw.shape));
        }
        let (ci, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (co, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
        if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
            return mismatch(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
        let tb = b.map(|b| self.value(b));
        if let Some(tb) = &tb {
            if tb.shape != [co] {
                return mismatch(format!("conv2d bias {:?} for {co} channels", tb.shape));
            }
        }
        let geom = Conv2dGeom { ci, h, w: wd, co, kh, kw, ho, wo, stride, pad };
        let mut y = vec![0.0; co * ho * wo];
        geom.for_each(|t| {
            let wv = tw.data[t.widx];
            for oj in t.cols.clone() {
                y[t.ybase + oj] += wv * tx.data[t.x(oj)];
            }
        });
        if let Some(tb) = &tb {
            for o in 0..co {
                y[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v += tb.data[o]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.op(Tensor::new(vec![co, ho, wo], y), &inputs, move |g, ins, _| {
            let (xv, wv) = (&ins[0].data, &ins[1].data);
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            geom.for_each(|t| {
                let wval = wv[t.widx];
                let mut acc = 0.0;
                for oj in t.cols.clone() {
                    let xi = t.x(oj);
                    let go = g[t.ybase + oj];
                    acc += go * xv[xi];
                    gx[xi] += go * wval;
                }
                gw[t.widx] += acc;
            });
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some((0..co).map(|o| g[o * ho * wo..(o + 1) * ho * wo].iter().sum()).collect()));
            }
            out
        }))
    }

    /// 1-D convolution along the sequence axis of `[batch, len, c_in]`,
    /// weight `[c_out, c_in, k]`, with explicit left/right zero padding.
    pub fn conv1d(&self, x: Var, w: Var, b: Option<Var>, pad_left: usize, pad_right: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 3 || tw.shape[1] != tx.shape[2] {
            return mismatch(format!("conv1d input {:?} with weight {:?}", tx.shape, tw.shape));
        }
        let (nb, len, ci) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (co, k) = (tw.shape[0], tw.shape[2]);
        if len + pad_left + pad_right < k {
            return mismatch(format!("conv1d kernel {k} longer than padded length {}", len + pad_left + pad_right));
        }
        let lo = len + pad_left + pad_right - k + 1;
        let tb = b.map(|b| self.value(b));
        // weight as [k, c_out, c_in] so every tap is a contiguous matrix
        let mut wt = vec![0.0; tw.numel()];
        for o in 0..co {
            for c in 0..ci {
                for j in 0..k {
                    wt[(j * co + o) * ci + c] = tw.data[(o * ci + c) * k + j];
                }
            }
        }
        let mut y = vec![0.0; nb * lo * co];
        for bi in 0..nb {
            for l in 0..lo {
                let yr = &mut y[(bi * lo + l) * co..(bi * lo + l + 1) * co];
                if let Some(tb) = &tb {
                    yr.copy_from_slice(&tb.data);
                }
                for j in 0..k {
                    let src = l + j;
                    if src < pad_left || src - pad_left >= len {
                        continue;
                    }
                    let xr = &tx.data[(bi * len + src - pad_left) * ci..(bi * len + src - pad_left + 1) * ci];
                    for (o, yo) in yr.iter_mut().enumerate() {
                        let wr = &wt[(j * co + o) * ci..(j * co + o + 1) * ci];
                        *yo += xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.op(Tensor::new(vec![nb, lo, co], y), &inputs, move |g, ins, _| {
            let xv = &ins[0].data;
            let mut gx = vec![0.0; xv.len()];
            let mut gwt = vec![0.0; wt.len()];
            let mut gb = vec![0.0; co];
            for bi in 0..nb {
                for l in 0..lo {
                    let gr = &g[(bi * lo + l) * co..(bi * lo + l + 1) * co];
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    for j in 0..k {
                        let src = l + j;
                        if src < pad_left || src - pad_left >= len {
                            continue;
                        }
                        let xoff = (bi * len + src - pad_left) * ci;
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let woff = (j * co + o) * ci;
                            for c in 0..ci {
                                gx[xoff + c] += go * wt[woff + c];
                                gwt[woff + c] += go * xv[xoff + c];
                            }
                        }
                    }
                }
            }
            let mut gw = vec![0.0; gwt.len()];
            for o in 0..co {
                for c in 0..ci {
                    for j in 0..k {
                        gw[(o * ci + c) * k + j] = gwt[(j * co + o) * ci + c];
                    }
                }
            }
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some(gb));
            }
            out
        }))
    }

    /// Per-channel 1-D convolution along the sequence axis of `[batch, len, c]`, weight `[c, k]`.
    pub fn depthwise_conv1d(&self, x: Var, w: Var, b: Option<Var>, pad_left: usize, pad_right: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 2 || tw.shape[0] != tx.shape[2] {
            return mismatch(format!("depthwise conv1d input {:?} with weight {:?}", tx.shape, tw.shape));
        }
        let (nb, len, c) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let k = tw.shape[1];
        if len + pad_left + pad_right < k {
            return mismatch(format!("depthwise kernel {k} longer than padded length"));
        }
        let lo = len + pad_left + pad_right - k + 1;
        let tb = b.map(|b| self.value(b));
        let mut y = vec![0.0; nb * lo * c];
        for bi in 0..nb {
            for l in 0..lo {
                for ch in 0..c {
                    let mut s = tb.as_ref().map_or(0.0, |t| t.data[ch]);
                    for j in 0..k {
                        let src = l + j;
                        if src >= pad_left && src - pad_left < len {
                            s += tw.data[ch * k + j] * tx.data[(bi * len + src - pad_left) * c + ch];
                        }
                    }
                    y[(bi * lo + l) * c + ch] = s;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.op(Tensor::new(vec![nb, lo, c], y), &inputs, move |g, ins, _| {
            let (xv, wv) = (&ins[0].data, &ins[1].data);
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let mut gb = vec![0.0; c];
            for bi in 0..nb {
                for l in 0..lo {
                    for ch in 0..c {
                        let go = g[(bi * lo + l) * c + ch];
                        gb[ch] += go;
                        for j in 0..k {
                            let src = l + j;
                            if src >= pad_left && src - pad_left < len {
                                let xi = (bi * len + src - pad_left) * c + ch;
                                gx[xi] += go * wv[ch * k + j];
                                gw[ch * k + j] += go * xv[xi];
                            }
                        }
                    }
                }
            }
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some(gb));
            }
            out
        }))
    }
}

#[derive(Clone, Copy)]
struct Conv2dGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

/// One kernel tap applied along an output row.
struct Tap {
    widx: usize,
    /// Output offset of column 0 in the row.
    ybase: usize,
    /// Input row offset plus the tap column.
    xbase: usize,
    stride: usize,
    pad: usize,
    cols: std::ops::Range<usize>,
}

impl Tap {
    #[inline]
    fn x(&self, oj: usize) -> usize {
        self.xbase + oj * self.stride - self.pad
    }
}

impl Conv2dGeom {
    fn for_each(&self, mut f: impl FnMut(&Tap)) {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        for j in 0..self.kw {
            // output columns whose input column oj*sw + j - pw lies in [0, w)
            let lo = if j >= pw { 0 } else { (pw - j).div_ceil(sw) };
            let hi = if self.w + pw > j { ((self.w + pw - j - 1) / sw + 1).min(self.wo) } else { 0 };
            if lo >= hi {
                continue;
            }
            for o in 0..self.co {
                for c in 0..self.ci {
                    for i in 0..self.kh {
                        let widx = ((o * self.ci + c) * self.kh + i) * self.kw + j;
                        for oi in 0..self.ho {
                            let xi = (oi * sh + i) as isize - ph as isize;
                            if xi < 0 || xi as usize >= self.h {
                                continue;
                            }
                            let xbase = (c * self.h + xi as usize) * self.w + j;
                            f(&Tap { widx, ybase: (o * self.ho + oi) * self.wo, xbase, stride: sw, pad: pw, cols: lo..hi });
                        }
                    }
                }
            }
        }
    }
}

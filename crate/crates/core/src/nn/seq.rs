//! Sequence kernels: attention, rotary and sinusoidal encodings, frequency
//! projection and the selective state-space scan.

use super::graph::{Graph, Var};
use super::{NnError, Result, Tensor};

pub const ROPE_BASE: f64 = 10000.0;

fn mismatch<T>(msg: String) -> Result<T> {
    Err(NnError::ShapeMismatch(msg))
}

/// Interleaved sin/cos table of shape `[n, c]` over position index.
pub fn sinusoidal_table(n: usize, c: usize) -> Tensor {
    let mut data = vec![0.0; n * c];
    for p in 0..n {
        for i in 0..c / 2 {
            let freq = ROPE_BASE.powf(-((2 * i) as f64) / c as f64);
            let a = p as f64 * freq;
            data[p * c + 2 * i] = a.sin();
            data[p * c + 2 * i + 1] = a.cos();
        }
        if c % 2 == 1 {
            data[p * c + c - 1] = (p as f64).sin();
        }
    }
    Tensor::new(vec![n, c], data)
}

/// Rotates channel pairs `(2i, 2i+1)` within each head of `x: [b, l, c]`
/// by `pos * base^(-2i/d)` with `pos = offset + l`.
pub fn rope_forward(x: &[f64], l: usize, c: usize, heads: usize, offset: usize, inverse: bool) -> Vec<f64> {
    let d = c / heads;
    let mut y = x.to_vec();
    for (row, chunk) in y.chunks_mut(c).enumerate() {
        let pos = (offset + row % l) as f64;
        for h in 0..heads {
            for i in 0..d / 2 {
                let theta = pos * ROPE_BASE.powf(-((2 * i) as f64) / d as f64);
                let (s, co) = theta.sin_cos();
                let s = if inverse { -s } else { s };
                let a = h * d + 2 * i;
                let (x0, x1) = (chunk[a], chunk[a + 1]);
                chunk[a] = x0 * co - x1 * s;
                chunk[a + 1] = x0 * s + x1 * co;
            }
        }
    }
    y
}

/// State update and readout for one time step of the selective scan.
///
/// `h` is `[d, n]`; `a` is `[d, n]` (negative); returns `y[d] = c . h[d] + skip[d] u[d]`
/// after `h[d, k] = exp(delta[d] a[d, k]) h[d, k] + delta[d] b[k] u[d]`.
pub fn ssm_step(h: &mut [f64], u: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64], skip: &[f64], y: &mut [f64]) {
    let n = b.len();
    for d in 0..u.len() {
        let du = delta[d] * u[d];
        let hd = &mut h[d * n..(d + 1) * n];
        let ad = &a[d * n..(d + 1) * n];
        let mut acc = skip[d] * u[d];
        for k in 0..n {
            hd[k] = (delta[d] * ad[k]).exp() * hd[k] + du * b[k];
            acc += c[k] * hd[k];
        }
        y[d] = acc;
    }
}

impl Graph {
    /// Multi-head scaled dot-product attention.
    /// `q: [b, lq, c]`, `k, v: [b, lk, c]` -> `[b, lq, c]`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.rank() != 3 || tk.shape != tv.shape || tk.rank() != 3 || tq.shape[0] != tk.shape[0] || tq.shape[2] != tk.shape[2] {
            return mismatch(format!("attention q {:?} k {:?} v {:?}", tq.shape, tk.shape, tv.shape));
        }
        let (nb, lq, c) = (tq.shape[0], tq.shape[1], tq.shape[2]);
        let lk = tk.shape[1];
        if heads == 0 || c % heads != 0 {
            return mismatch(format!("{heads} heads do not divide {c} channels"));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        // probs laid out [b, head, lq, lk]
        let mut probs = vec![0.0; nb * heads * lq * lk];
        let mut y = vec![0.0; nb * lq * c];
        for bi in 0..nb {
            for h in 0..heads {
                for i in 0..lq {
                    let qi = &tq.data[(bi * lq + i) * c + h * d..(bi * lq + i) * c + (h + 1) * d];
                    let pr = &mut probs[((bi * heads + h) * lq + i) * lk..((bi * heads + h) * lq + i + 1) * lk];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..lk {
                        let kj = &tk.data[(bi * lk + j) * c + h * d..(bi * lk + j) * c + (h + 1) * d];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        pr[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for p in pr.iter_mut() {
                        *p = (*p - mx).exp();
                        z += *p;
                    }
                    let yi = &mut y[(bi * lq + i) * c + h * d..(bi * lq + i) * c + (h + 1) * d];
                    for j in 0..lk {
                        pr[j] /= z;
                        let vj = &tv.data[(bi * lk + j) * c + h * d..(bi * lk + j) * c + (h + 1) * d];
                        for (yv, vv) in yi.iter_mut().zip(vj) {
                            *yv += pr[j] * vv;
                        }
                    }
                }
            }
        }
        Ok(self.op(Tensor::new(vec![nb, lq, c], y), &[q, k, v], move |g, ins, _| {
            let (qv, kv, vv) = (&ins[0].data, &ins[1].data, &ins[2].data);
            let mut gq = vec![0.0; qv.len()];
            let mut gk = vec![0.0; kv.len()];
            let mut gv = vec![0.0; vv.len()];
            let mut dp = vec![0.0; lk];
            for bi in 0..nb {
                for h in 0..heads {
                    for i in 0..lq {
                        let pr = &probs[((bi * heads + h) * lq + i) * lk..((bi * heads + h) * lq + i + 1) * lk];
                        let gi = &g[(bi * lq + i) * c + h * d..(bi * lq + i) * c + (h + 1) * d];
                        let mut dot = 0.0;
                        for j in 0..lk {
                            let vo = (bi * lk + j) * c + h * d;
                            let mut s = 0.0;
                            for e in 0..d {
                                s += gi[e] * vv[vo + e];
                                gv[vo + e] += pr[j] * gi[e];
                            }
                            dp[j] = s;
                            dot += pr[j] * s;
                        }
                        let qo = (bi * lq + i) * c + h * d;
                        for j in 0..lk {
                            let ds = pr[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let ko = (bi * lk + j) * c + h * d;
                            for e in 0..d {
                                gq[qo + e] += ds * kv[ko + e];
                                gk[ko + e] += ds * qv[qo + e];
                            }
                        }
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        }))
    }

    /// Rotary position encoding on `[b, l, c]` with head-local channel pairs.
    pub fn rope(&self, x: Var, heads: usize, offset: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || heads == 0 || tx.shape[2] % heads != 0 || (tx.shape[2] / heads) % 2 != 0 {
            return mismatch(format!("rope on {:?} with {heads} heads needs even head width", tx.shape));
        }
        let (l, c) = (tx.shape[1], tx.shape[2]);
        let y = rope_forward(&tx.data, l, c, heads, offset, false);
        Ok(self.op(Tensor::new(tx.shape.clone(), y), &[x], move |g, _, _| {
            vec![Some(rope_forward(g, l, c, heads, offset, true))]
        }))
    }

    /// Projects the sequence axis of `x: [b, f, c]` onto `f_proj` positions,
    /// head `h` (channels `[h*d, (h+1)*d)`) using the first `f` rows of
    /// `mats[h]: [f_max, f_proj]`. Rows past `f` act on implicit zero padding.
    pub fn freq_project(&self, x: Var, mats: &[Var]) -> Result<Var> {
        let tx = self.value(x);
        let heads = mats.len();
        if tx.rank() != 3 || heads == 0 || tx.shape[2] % heads != 0 {
            return mismatch(format!("frequency projection of {:?} with {heads} matrices", tx.shape));
        }
        let (nb, f, c) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let d = c / heads;
        let ta: Vec<_> = mats.iter().map(|&m| self.value(m)).collect();
        let (f_max, f_proj) = (ta[0].shape[0], ta[0].shape.get(1).copied().unwrap_or(0));
        if ta.iter().any(|t| t.shape != [f_max, f_proj]) {
            return mismatch("projection matrices differ in shape".into());
        }
        if f > f_max {
            return Err(NnError::FTooLarge { f, f_max });
        }
        let mut y = vec![0.0; nb * f_proj * c];
        for bi in 0..nb {
            for (h, a) in ta.iter().enumerate() {
                for fi in 0..f {
                    let xr = &tx.data[(bi * f + fi) * c + h * d..(bi * f + fi) * c + (h + 1) * d];
                    let ar = &a.data[fi * f_proj..(fi + 1) * f_proj];
                    for (p, &av) in ar.iter().enumerate() {
                        let yr = &mut y[(bi * f_proj + p) * c + h * d..(bi * f_proj + p) * c + (h + 1) * d];
                        for (yv, xv) in yr.iter_mut().zip(xr) {
                            *yv += av * xv;
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x];
        inputs.extend_from_slice(mats);
        Ok(self.op(Tensor::new(vec![nb, f_proj, c], y), &inputs, move |g, ins, _| {
            let xv = &ins[0].data;
            let mut gx = vec![0.0; xv.len()];
            let mut ga: Vec<Vec<f64>> = (0..heads).map(|_| vec![0.0; f_max * f_proj]).collect();
            for bi in 0..nb {
                for h in 0..heads {
                    let a = &ins[1 + h].data;
                    for fi in 0..f {
                        let xo = (bi * f + fi) * c + h * d;
                        for p in 0..f_proj {
                            let go = (bi * f_proj + p) * c + h * d;
                            let mut s = 0.0;
                            let av = a[fi * f_proj + p];
                            for e in 0..d {
                                s += g[go + e] * xv[xo + e];
                                gx[xo + e] += av * g[go + e];
                            }
                            ga[h][fi * f_proj + p] += s;
                        }
                    }
                }
            }
            let mut out = vec![Some(gx)];
            out.extend(ga.into_iter().map(Some));
            out
        }))
    }

    /// Selective scan over `[b, l, d]` inputs `u` and `delta` (positive),
    /// transition `a: [d, n]`, input-dependent `bm, cm: [b, l, n]` and skip `[d]`.
    /// State starts at zero for every sequence.
    pub fn selective_scan(&self, u: Var, delta: Var, a: Var, bm: Var, cm: Var, skip: Var) -> Result<Var> {
        let (tu, tdl, ta, tb, tc, ts) =
            (self.value(u), self.value(delta), self.value(a), self.value(bm), self.value(cm), self.value(skip));
        if tu.rank() != 3 || tdl.shape != tu.shape || ta.rank() != 2 || ta.shape[0] != tu.shape[2] {
            return mismatch(format!("selective scan u {:?} delta {:?} a {:?}", tu.shape, tdl.shape, ta.shape));
        }
        let (nb, l, dd) = (tu.shape[0], tu.shape[1], tu.shape[2]);
        let n = ta.shape[1];
        if tb.shape != [nb, l, n] || tc.shape != [nb, l, n] || ts.shape != [dd] {
            return mismatch(format!("selective scan b {:?} c {:?} skip {:?}", tb.shape, tc.shape, ts.shape));
        }
        // states after each step, [b, l, d, n]
        let mut states = vec![0.0; nb * l * dd * n];
        let mut y = vec![0.0; nb * l * dd];
        let mut h = vec![0.0; dd * n];
        for bi in 0..nb {
            h.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..l {
                let r = bi * l + t;
                ssm_step(
                    &mut h,
                    &tu.data[r * dd..(r + 1) * dd],
                    &tdl.data[r * dd..(r + 1) * dd],
                    &ta.data,
                    &tb.data[r * n..(r + 1) * n],
                    &tc.data[r * n..(r + 1) * n],
                    &ts.data,
                    &mut y[r * dd..(r + 1) * dd],
                );
                states[r * dd * n..(r + 1) * dd * n].copy_from_slice(&h);
            }
        }
        Ok(self.op(Tensor::new(vec![nb, l, dd], y), &[u, delta, a, bm, cm, skip], move |g, ins, _| {
            let (uv, dv, av, bv, cv, sv) = (&ins[0].data, &ins[1].data, &ins[2].data, &ins[3].data, &ins[4].data, &ins[5].data);
            let mut gu = vec![0.0; uv.len()];
            let mut gd = vec![0.0; dv.len()];
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            let mut gc = vec![0.0; cv.len()];
            let mut gs = vec![0.0; sv.len()];
            let mut carry = vec![0.0; dd * n];
            for bi in 0..nb {
                carry.iter_mut().for_each(|v| *v = 0.0);
                for t in (0..l).rev() {
                    let r = bi * l + t;
                    let ht = &states[r * dd * n..(r + 1) * dd * n];
                    for d in 0..dd {
                        let gy = g[r * dd + d];
                        let (ut, dt) = (uv[r * dd + d], dv[r * dd + d]);
                        gs[d] += gy * ut;
                        gu[r * dd + d] += gy * sv[d];
                        for k in 0..n {
                            let idx = d * n + k;
                            let hprev = if t > 0 { states[(r - 1) * dd * n + idx] } else { 0.0 };
                            let bk = bv[r * n + k];
                            gc[r * n + k] += gy * ht[idx];
                            let gh = gy * cv[r * n + k] + carry[idx];
                            let decay = (dt * av[idx]).exp();
                            let gdecay = gh * hprev * decay;
                            gd[r * dd + d] += gdecay * av[idx] + gh * bk * ut;
                            ga[idx] += gdecay * dt;
                            gb[r * n + k] += gh * dt * ut;
                            gu[r * dd + d] += gh * dt * bk;
                            carry[idx] = gh * decay;
                        }
                    }
                }
            }
            vec![Some(gu), Some(gd), Some(ga), Some(gb), Some(gc), Some(gs)]
        }))
    }
}

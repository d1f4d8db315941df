//! Reduction kernels used by the training objectives.

use super::graph::{Graph, Var};
use super::{NnError, Result, Tensor};

/// Derivative of `w ln(1 + d / w)` with respect to `d >= 0`.
pub fn scaled_log_grad(d: f64, w: f64) -> f64 {
    w / (d + w)
}

impl Graph {
    /// `mean(w * ln(1 + |e| / w))` with a fixed positive weight per element.
    pub fn scaled_log_abs_mean(&self, e: Var, w: Vec<f64>) -> Result<Var> {
        let te = self.value(e);
        if w.len() != te.numel() {
            return Err(NnError::ShapeMismatch(format!("{} weights for {:?}", w.len(), te.shape)));
        }
        let n = te.numel().max(1) as f64;
        let total: f64 = te.data.iter().zip(&w).map(|(x, w)| w * (x.abs() / w).ln_1p()).sum();
        Ok(self.op(Tensor::scalar(total / n), &[e], move |g, ins, _| {
            let gx = ins[0]
                .data
                .iter()
                .zip(&w)
                .map(|(&x, &w)| g[0] / n * x.signum() * if x == 0.0 { 0.0 } else { scaled_log_grad(x.abs(), w) })
                .collect();
            vec![Some(gx)]
        }))
    }

    /// `mean(|e|)`; the subgradient at zero is zero.
    pub fn abs_mean(&self, e: Var) -> Var {
        let te = self.value(e);
        let n = te.numel().max(1) as f64;
        let total: f64 = te.data.iter().map(|x| x.abs()).sum();
        self.op(Tensor::scalar(total / n), &[e], move |g, ins, _| {
            vec![Some(ins[0].data.iter().map(|&x| if x == 0.0 { 0.0 } else { g[0] / n * x.signum() }).collect())]
        })
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// `mean((x - c)^2)` against a constant target value.
    pub fn mean_sq_offset(&self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let n = tx.numel().max(1) as f64;
        let total: f64 = tx.data.iter().map(|v| (v - c) * (v - c)).sum();
        self.op(Tensor::scalar(total / n), &[x], move |g, ins, _| {
            vec![Some(ins[0].data.iter().map(|v| g[0] * 2.0 * (v - c) / n).collect())]
        })
    }

    /// `sqrt(re^2 + im^2 + eps)` over a trailing axis of size 2.
    pub fn complex_magnitude(&self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.last_dim() != 2 {
            return Err(NnError::ShapeMismatch(format!("complex magnitude of {:?}", tx.shape)));
        }
        let y: Vec<f64> = tx.data.chunks(2).map(|p| (p[0] * p[0] + p[1] * p[1] + eps).sqrt()).collect();
        let shape = tx.shape[..tx.rank() - 1].to_vec();
        Ok(self.op(Tensor::new(shape, y), &[x], move |g, ins, out| {
            let mut gx = vec![0.0; ins[0].numel()];
            for (i, p) in ins[0].data.chunks(2).enumerate() {
                gx[2 * i] = g[i] * p[0] / out.data[i];
                gx[2 * i + 1] = g[i] * p[1] / out.data[i];
            }
            vec![Some(gx)]
        }))
    }
}

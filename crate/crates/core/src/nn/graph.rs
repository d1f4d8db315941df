//! Reverse-mode tape over a closed set of kernels.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together with
//! a closure computing the vector-Jacobian product for its inputs. Calling
//! [`Graph::backward`] on a scalar walks the tape once in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::{NnError, ParamStore, Result, Tensor};

/// Vector-Jacobian product: `(output cotangent, inputs, output) -> input cotangents`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor], &Tensor) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Handle to a value on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    /// A graph that records values only; `backward` on it yields no gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, value: Tensor, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), requires_grad, parents, backward });
        Var(nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_node(t, false, Vec::new(), None)
    }

    /// A differentiable leaf, e.g. an input under a gradient check.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push_node(t, self.grad_enabled, Vec::new(), None)
    }

    /// Leaf for a named parameter; repeated calls return the same handle.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.borrow().get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        let v = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { value: Arc::clone(t), requires_grad: self.grad_enabled, parents: Vec::new(), backward: None });
            Var(nodes.len() - 1)
        };
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation. The closure is dropped when no input needs a gradient.
    pub(crate) fn op<F>(&self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64], &[&Tensor], &Tensor) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let requires = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        if requires {
            self.push_node(value, true, inputs.iter().map(|v| v.0).collect(), Some(Box::new(backward)))
        } else {
            self.push_node(value, false, Vec::new(), None)
        }
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.push_node((*t).clone(), false, Vec::new(), None)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes[loss.0].value.numel();
        if n != 1 {
            return Err(NnError::NonScalarLoss(n));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
                let pg = bw(&g, &inputs, &node.value);
                for (&p, gp) in node.parents.iter().zip(pg) {
                    let Some(gp) = gp else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&gp).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
            // leaves keep their gradient; interior nodes release it
            if node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        let params = self.params.borrow().iter().map(|(k, v)| (k.clone(), v.0)).collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a named parameter; `None` when it was not reached.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|&i| self.grads.get(i)).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter in `store`, zero-filled where unreachable.
    pub fn for_store(&self, store: &ParamStore) -> Vec<(String, Vec<f64>)> {
        store
            .iter()
            .map(|(name, t)| {
                let g = self.param(name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.to_string(), g)
            })
            .collect()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(NnError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// Elementwise and structural operations.
impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(&ta, &tb, "add")?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        Ok(self.op(Tensor::new(ta.shape.clone(), data), &[a, b], |g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(&ta, &tb, "sub")?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        Ok(self.op(Tensor::new(ta.shape.clone(), data), &[a, b], |g, _, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(&ta, &tb, "mul")?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        Ok(self.op(Tensor::new(ta.shape.clone(), data), &[a, b], |g, ins, _| {
            let ga = g.iter().zip(&ins[1].data).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(&ins[0].data).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * s).collect();
        self.op(Tensor::new(ta.shape.clone(), data), &[a], move |g, _, _| vec![Some(g.iter().map(|v| v * s).collect())])
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x + c).collect();
        self.op(Tensor::new(ta.shape.clone(), data), &[a], |g, _, _| vec![Some(g.to_vec())])
    }

    /// Elementwise map with derivative expressed in terms of the input.
    pub fn unary<F, D>(&self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64) -> f64 + 'static,
    {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| f(x)).collect();
        self.op(Tensor::new(ta.shape.clone(), data), &[a], move |g, ins, _| {
            vec![Some(g.iter().zip(&ins[0].data).map(|(g, &x)| g * df(x)).collect())]
        })
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, silu, silu_grad)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, move |x| if x >= 0.0 { x } else { slope * x }, move |x| if x >= 0.0 { 1.0 } else { slope })
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&self, a: Var, eps: f64) -> Var {
        self.unary(a, move |x| (x + eps).ln(), move |x| 1.0 / (x + eps))
    }

    pub fn sum(&self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.numel();
        self.op(Tensor::scalar(ta.data.iter().sum()), &[a], move |g, _, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(NnError::ShapeMismatch(format!("reshape {:?} to {shape:?}", ta.shape)));
        }
        Ok(self.op(Tensor::new(shape.to_vec(), ta.data.clone()), &[a], |g, _, _| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(NnError::ShapeMismatch(format!("permutation {perm:?} of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| ta.shape[p]).collect();
        let in_strides = strides(&ta.shape);
        // stride in the input for each output axis
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let index_map = permuted_indices(&out_shape, &gather);
        let data = index_map.iter().map(|&i| ta.data[i]).collect();
        let n = ta.numel();
        Ok(self.op(Tensor::new(out_shape, data), &[a], move |g, _, _| {
            let mut gi = vec![0.0; n];
            for (o, &i) in index_map.iter().enumerate() {
                gi[i] = g[o];
            }
            vec![Some(gi)]
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || start + len > ta.shape[axis] {
            return Err(NnError::ShapeMismatch(format!("narrow axis {axis} [{start}, {}) of {:?}", start + len, ta.shape)));
        }
        let outer: usize = ta.shape[..axis].iter().product();
        let inner: usize = ta.shape[axis + 1..].iter().product();
        let dim = ta.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&ta.data[base..base + len * inner]);
        }
        let mut shape = ta.shape.clone();
        shape[axis] = len;
        let n = ta.numel();
        Ok(self.op(Tensor::new(shape, data), &[a], move |g, _, _| {
            let mut gi = vec![0.0; n];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gi)]
        }))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let ts: Vec<Arc<Tensor>> = parts.iter().map(|&v| self.value(v)).collect();
        let first = ts.first().ok_or_else(|| NnError::ShapeMismatch("concat of nothing".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(NnError::ShapeMismatch(format!("concat axis {axis} of rank {rank}")));
        }
        for t in &ts {
            if t.rank() != rank || (0..rank).any(|d| d != axis && t.shape[d] != first.shape[d]) {
                return Err(NnError::ShapeMismatch(format!("concat {:?} with {:?}", first.shape, t.shape)));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let dims: Vec<usize> = ts.iter().map(|t| t.shape[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &d) in ts.iter().zip(&dims) {
                data.extend_from_slice(&t.data[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(self.op(Tensor::new(shape, data), parts, move |g, _, _| {
            let mut out: Vec<Vec<f64>> = dims.iter().map(|&d| Vec::with_capacity(outer * d * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (k, &d) in dims.iter().enumerate() {
                    out[k].extend_from_slice(&g[pos..pos + d * inner]);
                    pos += d * inner;
                }
            }
            out.into_iter().map(Some).collect()
        }))
    }

    /// Repeats `a` along a new leading axis of size `n`.
    pub fn broadcast_leading(&self, a: Var, n: usize) -> Var {
        let ta = self.value(a);
        let m = ta.numel();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(&ta.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&ta.shape);
        self.op(Tensor::new(shape, data), &[a], move |g, _, _| {
            let mut gi = vec![0.0; m];
            for chunk in g.chunks(m) {
                gi.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            vec![Some(gi)]
        })
    }

    /// Applies a fixed linear operator and its adjoint.
    pub fn linear_map<F, A>(&self, a: Var, out_shape: Vec<usize>, forward: F, adjoint: A) -> Result<Var>
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
        A: Fn(&[f64]) -> Vec<f64> + 'static,
    {
        let ta = self.value(a);
        let data = forward(&ta.data);
        if data.len() != out_shape.iter().product::<usize>() {
            return Err(NnError::ShapeMismatch(format!("linear map produced {} values for {out_shape:?}", data.len())));
        }
        Ok(self.op(Tensor::new(out_shape, data), &[a], move |g, _, _| vec![Some(adjoint(g))]))
    }
}

fn permuted_indices(out_shape: &[usize], gather: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        idx.push(src);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            src += gather[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= gather[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    idx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

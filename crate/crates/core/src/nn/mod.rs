//! Differentiable numerics: tensors, a reverse-mode tape, layer kernels,
//! AdamW and the checkpoint container.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod losses;
mod optim;
mod seq;
mod tensor;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{sigmoid, silu, silu_grad, softplus, Gradients, Graph, Var};
pub use layers::{layer_norm_forward, linear_forward, LAYER_NORM_EPS};
pub use losses::scaled_log_grad;
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use seq::{rope_forward, sinusoidal_table, ssm_step, ROPE_BASE};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got {0} values")]
    NonScalarLoss(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("{f} frequency bins exceed the projection size {f_max}")]
    FTooLarge { f: usize, f_max: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Named parameters in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Arc<Tensor>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParameter(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), Arc::new(t)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Mutable access; clones the tensor if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.entries[i].1))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameter count per name prefix, cut at `depth` dot-separated components.
    pub fn count_by_prefix(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in &self.entries {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, c)) => *c += t.numel(),
                None => out.push((key, t.numel())),
            }
        }
        out
    }
}

/// Normal samples with `std`, redrawn outside two standard deviations.
pub fn truncated_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

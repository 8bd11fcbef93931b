use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor. Frozen parameters are never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
    pub grad: Option<Tensor<T>>,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// N(0, 2/fan_in).
    HeNormal { fan_in: usize },
    /// U(-1/√fan_in, 1/√fan_in).
    FanInUniform { fan_in: usize },
    Const(f64),
}

impl Init {
    pub fn sample<T: Element, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
            }
            Init::Const(v) => vec![T::from_f64_lossy(v); n],
        };
        Tensor::from_parts(shape.to_vec(), data)
    }
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

/// Named collection of parameters and buffers owned by a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Slot>,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    /// Number of values each statistic was reduced over.
    pub count: usize,
    pub momentum: f64,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new(), names: HashMap::new() }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        self.params.push(Parameter { name, tensor, frozen: false, grad: None });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn init_param<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let t = init.sample(shape, rng);
        self.add_param(name, t)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name, tensor });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    /// Tensor of a parameter or buffer by name.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        match self.names.get(name)? {
            Slot::Param(i) => Some(&self.params[*i].tensor),
            Slot::Buffer(i) => Some(&self.buffers[*i].tensor),
        }
    }

    /// Overwrites a named tensor; shapes must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = *self.names.get(name).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let target = match slot {
            Slot::Param(i) => &mut self.params[i].tensor,
            Slot::Buffer(i) => &mut self.buffers[i].tensor,
        };
        if target.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set",
                left: target.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *target = value;
        Ok(())
    }

    /// Entries in insertion order: parameters first, then buffers.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.tensor)))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Stores parameter gradients. Existing gradients are replaced, or summed
    /// into when `accumulate` is set.
    pub fn load_grads(&mut self, grads: &BTreeMap<ParamId, Tensor<T>>, accumulate: bool) {
        if !accumulate {
            self.zero_grad();
        }
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            match p.grad.as_mut() {
                Some(existing) if accumulate => existing.add_assign(g),
                _ => p.grad = Some(g.clone()),
            }
        }
    }

    /// Applies `running = (1-m)·running + m·batch` (unbiased batch variance).
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate<T>]) {
        for u in updates {
            let count = u.count;
            let m = T::from_f64_lossy(u.momentum);
            let one = T::one();
            let unbias = if count > 1 {
                T::from_f64_lossy(count as f64 / (count as f64 - 1.0))
            } else {
                one
            };
            let mean = self.buffers[u.mean.0].tensor.data_mut();
            for (r, &b) in mean.iter_mut().zip(&u.batch_mean) {
                *r = (one - m) * *r + m * b;
            }
            let var = self.buffers[u.var.0].tensor.data_mut();
            for (r, &b) in var.iter_mut().zip(&u.batch_var) {
                *r = (one - m) * *r + m * b * unbias;
            }
        }
    }

    /// Clones every parameter tensor whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.named_tensors()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }
}

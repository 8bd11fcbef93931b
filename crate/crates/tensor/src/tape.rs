//! Wengert tape: every differentiable operation appends a node holding its
//! output value and enough saved state to replay the chain rule in reverse.

use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore, RunningUpdate};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

pub(crate) struct Node<T> {
    pub(crate) value: Value<T>,
    pub(crate) op: crate::ops::Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Parameters are read straight from the borrowed [`ParamStore`]; the store
/// can only be mutated again once the tape is dropped.
pub struct Tape<'s, T: Element> {
    store: Option<&'s ParamStore<T>>,
    pub(crate) nodes: Vec<Node<T>>,
    record: bool,
    running: Vec<RunningUpdate<T>>,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf or retained node, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<T: Element> Default for Tape<'static, T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Element> Tape<'static, T> {
    /// Tape without a parameter store; leaves are created with [`Tape::leaf`].
    pub fn new() -> Self {
        Tape { store: None, nodes: Vec::new(), record: true, running: Vec::new() }
    }
}

impl<'s, T: Element> Tape<'s, T> {
    pub fn with_store(store: &'s ParamStore<T>) -> Self {
        Tape { store: Some(store), nodes: Vec::new(), record: true, running: Vec::new() }
    }

    /// Tape that keeps values but records no backward state.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Tape { store: Some(store), nodes: Vec::new(), record: false, running: Vec::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn store(&self) -> Option<&'s ParamStore<T>> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: crate::ops::Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a store parameter. Frozen parameters do not require grad.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("tape has no parameter store");
        let frozen = store.param(id).frozen;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: crate::ops::Op::Leaf,
            requires_grad: self.record && !frozen,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.expect("param node without store").param(*id).tensor,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: crate::ops::Op<T>) -> Var {
        let requires_grad = self.record && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { crate::ops::Op::Leaf };
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn record_running_update(&mut self, update: RunningUpdate<T>) {
        self.running.push(update);
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running)
    }

    /// Backpropagates from a scalar loss. Leaf and parameter gradients are returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_retain(loss, &[])
    }

    /// Like [`Tape::backward`] but also keeps the gradients of `retain`.
    pub fn backward_retain(&self, loss: Var, retain: &[Var]) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let seed = Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]);
        self.run_backward(loss, seed, retain)
    }

    fn run_backward(&self, out: Var, seed: Tensor<T>, retain: &[Var]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        let mut keep = vec![false; out.0 + 1];
        for r in retain {
            if r.0 <= out.0 {
                keep[r.0] = true;
            }
        }
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        let mut params = BTreeMap::new();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let is_leaf = matches!(node.op, crate::ops::Op::Leaf);
            if !is_leaf {
                crate::ops::backward_op(self, i, &g, &mut grads)?;
            }
            if let Value::Param(id) = node.value {
                params.insert(id, g);
            } else if is_leaf || keep[i] {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    /// Adds `g` into the gradient slot of `v` if it requires grad.
    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }
}

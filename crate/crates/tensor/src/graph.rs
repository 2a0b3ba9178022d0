//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its value and, when any input requires a
//! gradient, a closure mapping the output gradient to input gradients.
//! Nodes are topologically ordered by construction, so the backward pass is
//! a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [Arc<Tensor<T>>],
    pub output: &'a Tensor<T>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    params: RefCell<HashMap<(u64, usize), Var>>,
    param_of: RefCell<HashMap<usize, (u64, usize)>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            params: RefCell::new(HashMap::new()),
            param_of: RefCell::new(HashMap::new()),
        }
    }

    /// A graph for inference: values only, nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A value with no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A differentiable input (gradient available via [`Gradients::get`]).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
        })
    }

    /// Reads a parameter. Repeated reads of the same entry share one node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.borrow().get(&key) {
            return v;
        }
        let trainable = self.grad_enabled && !store.is_frozen();
        let v = self.push_node(Node {
            value: Arc::clone(store.get(id)),
            parents: Vec::new(),
            backward: None,
            requires_grad: trainable,
        });
        self.params.borrow_mut().insert(key, v);
        if trainable {
            self.param_of.borrow_mut().insert(v.0, key);
        }
        v
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Appends an op node. `backward` is dropped when no input needs a
    /// gradient.
    pub fn push_op<F>(&self, value: Tensor<T>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.numel(),
            1,
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<Arc<Tensor<T>>> =
                node.parents.iter().map(|&p| Arc::clone(&nodes[p].value)).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
            };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let param_of = self.param_of.borrow();
        let mut by_param = HashMap::new();
        let mut leaves = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if let Some(&key) = param_of.get(&i) {
                by_param.insert(key, g);
            } else {
                leaves.insert(i, g);
            }
        }
        Gradients { by_param, leaves }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    by_param: HashMap<(u64, usize), Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&(store.uid(), id.index()))
    }

    /// True when any gradient belongs to `store`.
    pub fn touches(&self, store: &ParamStore<T>) -> bool {
        self.by_param.keys().any(|(uid, _)| *uid == store.uid())
    }

    pub fn stores(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.by_param.keys().map(|k| k.0).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Global L2 norm over the gradients of `store`, in parameter order.
    pub fn norm(&self, store: &ParamStore<T>) -> f64 {
        let mut acc = 0.0;
        for id in store.ids() {
            if let Some(g) = self.param(store, id) {
                acc += g.data().iter().map(|v| v.to_f64c().powi(2)).sum::<f64>();
            }
        }
        acc.sqrt()
    }
}

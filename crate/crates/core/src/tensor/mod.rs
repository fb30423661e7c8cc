//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] is a write-once graph of operations built during a forward
//! pass; [`Tape::backward`] walks it in reverse and accumulates gradients.
//! Tapes are rebuilt every step, parameters live outside in a
//! [`crate::params::ParamStore`] and are bound into a tape with
//! [`Tape::param`].

mod conv;
mod ops;

pub use conv::{conv_bwd_data, conv_bwd_weight, conv_fwd};

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;

/// Handle to a node in a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackArgs<'a, F: Scalar> {
    pub grad: &'a ArrayD<F>,
    pub inputs: Vec<&'a ArrayD<F>>,
    pub output: &'a ArrayD<F>,
    /// Per-parent flag: gradient only has to be produced where true.
    pub needs: &'a [bool],
}

type BackFn<F> = Box<dyn for<'a> Fn(&BackArgs<'a, F>) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    needs_grad: bool,
    param: Option<ParamId>,
    parents: Vec<Var>,
    back: Option<BackFn<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().copied().next().unwrap()
    }

    /// Leaf with no gradient tracking.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, false, None, vec![], None)
    }

    /// Leaf that accumulates a gradient (model input under test, etc).
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, true, None, vec![], None)
    }

    /// Bind a stored parameter into this tape. Binding the same parameter
    /// twice returns the same node, so shared-weight layers naturally
    /// accumulate gradients from every use site.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), !p.frozen, Some(id), vec![], None);
        self.bound.insert(id, v);
        v
    }

    /// Copy of a node's value as a fresh constant: cuts the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<F>,
        needs_grad: bool,
        param: Option<ParamId>,
        parents: Vec<Var>,
        back: Option<BackFn<F>>,
    ) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        let needs = needs_grad || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad: needs,
            param,
            parents,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn unary(
        &mut self,
        a: Var,
        value: ArrayD<F>,
        back: impl for<'x> Fn(&BackArgs<'x, F>) -> ArrayD<F> + 'static,
    ) -> Var {
        self.push(
            value,
            false,
            None,
            vec![a],
            Some(Box::new(move |args| vec![Some(back(args))])),
        )
    }

    /// Reverse sweep from a scalar loss. Gradients of all reachable nodes
    /// that need them are produced; fetch per-node via [`Grads::get`] or
    /// fold into the parameter store with [`Tape::accumulate_param_grads`].
    pub fn backward(&self, loss: Var) -> Grads<F> {
        let node = &self.nodes[loss.0];
        assert_eq!(node.value.len(), 1, "backward() requires a scalar loss");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(node.value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node.back.is_none() || grads[i].is_none() {
                continue;
            }
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].needs_grad)
                .collect();
            let parent_grads = {
                let args = BackArgs {
                    grad: grads[i].as_ref().unwrap(),
                    inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                    output: &node.value,
                    needs: &needs,
                };
                (node.back.as_ref().unwrap())(&args)
            };
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                let g = g.expect("missing gradient for a parent that needs one");
                debug_assert_eq!(g.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        Grads { grads }
    }

    /// Add this tape's parameter gradients into the store.
    pub fn accumulate_param_grads(&self, grads: &Grads<F>, store: &mut ParamStore<F>) {
        for (&id, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

/// Sum `grad` down to `shape` by collapsing broadcast axes.
pub(crate) fn reduce_to_shape<F: Scalar>(grad: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    for (axis, (&have, &want)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1, "incompatible broadcast reduction");
            let summed = g.sum_axis(ndarray::Axis(axis));
            g = summed.insert_axis(ndarray::Axis(axis));
        }
    }
    g.into_shape_with_order(IxDyn(shape)).expect("reduce_to_shape")
}

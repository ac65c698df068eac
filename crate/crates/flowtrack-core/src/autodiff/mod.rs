//! Reverse-mode automatic differentiation on dynamically shaped `ndarray`
//! arrays.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every recorded node.
//! Tapes are cheap, single-threaded, and meant to be created per forward
//! pass. All operations produce standard-layout owned arrays so that
//! reshapes are exact views of the stored data.

mod nn;
pub mod numgrad;
mod ops;

pub use nn::{add_bias, bilinear_resize, conv2d, layer_norm, pixel_unshuffle};
pub(crate) use nn::resize_taps;
pub use ops::{concat, stack};

use crate::real::Real;
use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;

/// Arguments handed to an operation's backward function.
pub struct BackwardArgs<'a, T: Real> {
    /// Upstream gradient, same shape as the node's output.
    pub grad: &'a ArrayD<T>,
    /// Values of the node's parents, in parent order.
    pub inputs: &'a [&'a ArrayD<T>],
    /// The node's own forward value.
    pub output: &'a ArrayD<T>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<ArrayD<T>>>;

struct Node<T: Real> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only record of a forward computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input node. Gradients accumulate into it like any other
    /// node; whether they are read afterwards is up to the caller.
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None)
    }

    /// Record a 0-d scalar input node.
    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, index: usize) -> ArrayD<T> {
        self.nodes.borrow()[index].value.clone()
    }

    pub(crate) fn with_value<R>(&self, index: usize, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        f(&self.nodes.borrow()[index].value)
    }

    /// Run reverse-mode accumulation from a scalar root. Returns the
    /// gradient of the root with respect to every recorded node.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let root_dim = nodes[root.index].value.raw_dim();
        assert_eq!(
            nodes[root.index].value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            root_dim
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(ArrayD::from_elem(root_dim, T::one()));

        for i in (0..=root.index).rev() {
            if nodes[i].backward.is_none() {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let inputs: Vec<&ArrayD<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let args = BackwardArgs {
                grad: &upstream,
                inputs: &inputs,
                output: &node.value,
            };
            let parent_grads = (node.backward.as_ref().unwrap())(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) index: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<'t, T: Real> Var<'t, T> {
    /// Clone of the stored forward value.
    pub fn value(&self) -> ArrayD<T> {
        self.tape.value_of(self.index)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape
            .with_value(self.index, |value| value.shape().to_vec())
    }

    /// Scalar payload of a 0-d or single-element node.
    pub fn scalar_value(&self) -> T {
        self.tape.with_value(self.index, |value| {
            debug_assert_eq!(value.len(), 1);
            *value.iter().next().unwrap()
        })
    }

    pub(crate) fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Re-enter the value as a fresh leaf: the forward value is identical
    /// but no gradient flows back through it.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf(self.value())
    }
}

/// Gradients of a scalar root with respect to each tape node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or zeros if the root did not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> ArrayD<T> {
        match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(&var.shape())),
        }
    }

    /// Gradient for `var` if the root depended on it.
    pub fn wrt_opt(&self, var: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads[var.index].as_ref()
    }
}

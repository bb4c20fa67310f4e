use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule can look at.
pub(crate) struct BackCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

/// Returns one optional gradient per input, in input order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so the record is already in
/// topological order. A tape belongs to one execution context; the kernels
/// behind individual operations may still fan out over the rayon pool.
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
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Records an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push_node(Node {
            value: Rc::new(t),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        })
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Rc::new(t),
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Records a trainable parameter living in slot `slot` of a
    /// [`ParamStore`].
    pub fn param(&self, slot: usize, t: &Tensor<T>) -> Var {
        self.push_node(Node {
            value: Rc::new(t.clone()),
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            param: Some(slot),
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Appends the result of an operation. The backward rule is dropped when
    /// no input needs a gradient.
    pub(crate) fn push(&self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> =
                node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = rule(&BackCtx {
                grad: &g,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), nodes[input].value.len());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(ig),
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.param.map(|slot| (slot, id)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`]: gradients of leaves, keyed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf. `None` when the leaf does not influence the loss
    /// or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the matching slot of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(slot, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.tensor_mut(slot).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a tensor and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn tensor(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.tensors[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Registers slot `slot` on `tape`.
    pub fn bind(&self, tape: &Tape<T>, slot: usize) -> Var {
        tape.param(slot, &self.tensors[slot])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

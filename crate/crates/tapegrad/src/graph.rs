//! The tape itself: nodes, recording, and the reverse pass.

use crate::Scalar;
use ndarray::ArrayD;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Everything a backward closure may need: parent values, the node's own
/// output, the incoming gradient, and which parents actually need gradients.
pub struct BackwardCtx<'a, F: Scalar> {
    pub parents: Vec<&'a ArrayD<F>>,
    pub output: &'a ArrayD<F>,
    pub grad: &'a ArrayD<F>,
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<F> = Box<dyn Fn(&BackwardCtx<'_, F>) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    leaf: bool,
}

/// A single forward pass recorded as a tape.
///
/// Graphs are cheap to create; training code builds a fresh one per step and
/// inference code per batch (dropping it releases all stored activations).
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    /// A graph that records backward closures for nodes reachable from
    /// `requires_grad` leaves.
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256), grad_enabled: true }
    }

    /// A graph that never records backward closures. Values are still stored,
    /// so intermediate results can be inspected; drop the graph to free them.
    pub fn inference() -> Self {
        Graph { nodes: Vec::with_capacity(256), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf tensor. Only leaves with `requires_grad = true`
    /// receive gradients in the result of [`Graph::backward`].
    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad: rg, leaf: true });
        Var(self.nodes.len() - 1)
    }

    /// Registers a constant (non-differentiable) leaf.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True if an op over these parents must record a backward closure.
    pub fn grad_needed(&self, parents: &[Var]) -> bool {
        self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// Appends an op node. `backward` should be `None` when
    /// [`Graph::grad_needed`] is false for the parents; this is how closures
    /// capturing large buffers are skipped in inference mode.
    pub fn push_op(&mut self, value: ArrayD<F>, parents: Vec<Var>, backward: Option<BackwardFn<F>>) -> Var {
        let requires_grad = self.grad_needed(&parents);
        debug_assert!(!requires_grad || backward.is_some(), "missing backward for differentiable op");
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node { value, parents, backward, requires_grad, leaf: false });
        Var(self.nodes.len() - 1)
    }

    /// Runs the reverse pass from a scalar root and returns the gradients of
    /// all `requires_grad` leaves (and only those).
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        assert!(self.nodes[root.0].requires_grad, "backward root does not depend on any trainable leaf");

        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            // Leaves keep their gradient; interior nodes surrender it here.
            let g = if node.leaf {
                match &grads[id] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let Some(backward) = &node.backward else { continue };

            let parent_vals: Vec<&ArrayD<F>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let ctx = BackwardCtx { parents: parent_vals, output: &node.value, grad: &g, needs: &needs };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());

            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape(), "gradient shape mismatch");
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        // Drop everything that is not a requires-grad leaf.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !(self.nodes[id].leaf && self.nodes[id].requires_grad) {
                *slot = None;
            }
        }
        Gradients { grads }
    }
}

/// Result of a reverse pass: leaf gradients addressable by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

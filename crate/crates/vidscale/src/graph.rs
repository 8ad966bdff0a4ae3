//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] records every tensor produced during a forward pass as a node;
//! ops connect earlier nodes to later ones, so the tape is topologically
//! ordered by construction. [`Graph::backward`] sweeps the tape once in
//! reverse, handing each op its output gradient and letting it accumulate
//! into its parents. Gradients of interior nodes are dropped as soon as they
//! have been consumed; leaf gradients are retained for the optimizer.

use std::sync::Arc;

use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// One differentiable operation. Implementations read parent values from the
/// tape and accumulate gradients for each parent; parent indices are always
/// strictly smaller than the node's own index.
pub(crate) trait GraphOp: Send + Sync {
    fn backward(&self, values: &[Arc<Tensor>], grad_out: &Tensor, grads: &mut [Option<Tensor>]);
}

pub struct Graph {
    values: Vec<Arc<Tensor>>,
    ops: Vec<Option<Box<dyn GraphOp>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Add a leaf node (input or parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Arc::new(t), None)
    }

    /// Add a leaf sharing storage with the caller.
    pub fn leaf_arc(&mut self, t: Arc<Tensor>) -> Var {
        self.push(t, None)
    }

    /// Add a constant (identical to a leaf; no gradient will be requested).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    /// Detach: same value, no backward connection.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = Arc::clone(&self.values[x.0]);
        self.push(v, None)
    }

    pub(crate) fn push(&mut self, value: Arc<Tensor>, op: Option<Box<dyn GraphOp>>) -> Var {
        debug_assert!(
            value.all_finite() || !cfg!(debug_assertions),
            "non-finite node value"
        );
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.values[x.0]
    }

    pub fn value_arc(&self, x: Var) -> Arc<Tensor> {
        Arc::clone(&self.values[x.0])
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.values[x.0].shape()
    }

    /// Reverse sweep from a scalar root. Returns retained gradients: leaves
    /// keep theirs, interior gradients are freed once consumed.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(op) = self.ops[i].as_ref() else {
                continue; // leaf: keep gradient
            };
            let (head, tail) = grads.split_at_mut(i);
            let g = tail[0].take().expect("gradient present");
            op.backward(&self.values, &g, head);
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep. Only leaves retain gradients.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, x: Var) -> Option<&Tensor> {
        self.grads.get(x.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, x: Var) -> Option<Tensor> {
        self.grads.get_mut(x.0).and_then(|g| g.take())
    }
}

/// Accumulate `delta` into the gradient slot for node `id`.
pub(crate) fn add_grad(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_in_place(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Borrow the gradient buffer for node `id`, zero-initializing on first use.
pub(crate) fn grad_buf<'a>(
    grads: &'a mut [Option<Tensor>],
    id: usize,
    shape: &[usize],
) -> &'a mut Tensor {
    if grads[id].is_none() {
        grads[id] = Some(Tensor::zeros(shape));
    }
    grads[id].as_mut().unwrap()
}

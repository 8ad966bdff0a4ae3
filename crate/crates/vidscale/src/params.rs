use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a named parameter tensor in a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of named parameter tensors. Creation order is the canonical
/// order for optimizer state and checkpoints, so runs are reproducible.
#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        assert_eq!(
            self.tensors[id.0].shape(),
            t.shape(),
            "parameter shape change for {}",
            self.names[id.0]
        );
        self.tensors[id.0] = Arc::new(t);
    }

    /// Mutate a parameter in place (copy-on-write if a graph still holds it).
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Register every parameter as a graph leaf, in store order.
    pub fn leaves(&self, g: &mut Graph) -> ParamLeaves {
        ParamLeaves {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf_arc(Arc::clone(t)))
                .collect(),
        }
    }
}

/// Per-graph leaf handles for every parameter in a store.
pub struct ParamLeaves {
    vars: Vec<Var>,
}

impl ParamLeaves {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn gradient<'a>(&self, grads: &'a Gradients, id: ParamId) -> Option<&'a Tensor> {
        grads.get(self.vars[id.0])
    }

    /// Drain all parameter gradients in store order (input to [`Adam::step`]).
    pub fn take_gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Kaiming-style normal init for convolution kernels, scaled down so stacked
/// blocks start well inside the stable regime.
pub fn conv_init(shape: &[usize], rng: &mut Rng, gain: f64) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

/// Adam optimizer over a [`ParamStore`].
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            m: store
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            v: store
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads[i]` pairs with parameter `i`; `None` leaves the
    /// parameter (and its moments) untouched by the gradient but still
    /// counted in bias correction.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, slot) in grads.iter().enumerate() {
            let Some(gr) = slot else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = Arc::make_mut(&mut store.tensors[i]).data_mut();
            let g = gr.data();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.m[i], &self.v[i])
    }

    pub fn set_moments(&mut self, i: usize, m: Tensor, v: Tensor) -> Result<()> {
        if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
            return Err(Error::Checkpoint(format!(
                "moment shape mismatch at index {i}"
            )));
        }
        self.m[i] = m;
        self.v[i] = v;
        Ok(())
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }
}

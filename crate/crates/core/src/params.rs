//! Named trainable parameters and the bridge between a parameter set and a
//! [`Tape`]: a [`Graph`] mounts parameters lazily as tape leaves and routes
//! their gradients back into a [`GradStore`] after the reverse pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Weight decay applies only to decayed parameters (matrices); biases and
    /// norm gains are exempt.
    pub decayed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decayed: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{}`",
            name
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Parameter { name, value, decayed });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradStore {
            grads: params
                .params
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.grads.iter()
    }

    pub fn iter_mut_vecs(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.grads.iter_mut()
    }
}

/// A tape plus the parameter set it reads from. Parameters are mounted as
/// leaves on first use, so a forward pass only pays for the tensors it
/// touches, and gradient extraction knows which leaf belongs to which
/// parameter.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    mounts: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            mounts: vec![None; params.len()],
        }
    }

    /// Tape node for parameter `id`, mounting it if needed.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.mounts[id.0] {
            return node;
        }
        let node = self.tape.leaf(self.params.get(id).value.clone());
        self.mounts[id.0] = Some(node);
        node
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let v = self.tape.value(loss).data[0];
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(v));
        }
        self.tape.backward(loss)
    }

    /// Add this graph's parameter gradients into `store` (fixed parameter
    /// order, so accumulation across examples is deterministic).
    pub fn accumulate_grads(&self, store: &mut GradStore) {
        for (i, mount) in self.mounts.iter().enumerate() {
            if let Some(node) = mount {
                if let Some(g) = self.tape.grad(*node) {
                    let dst = &mut store.grads[i];
                    for (x, y) in dst.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
}

use std::ops::Index;

use super::{Graph, Result, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Each tensor is registered exactly once and keeps
/// its registration order, which is also the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// # Panics
    /// If `name` is already registered.
    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(self.id(name).is_none(), "parameter `{name}` registered twice");
        self.names.push(name.to_owned());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform matrix `[rows, cols]`: U(-a, a) with a = sqrt(6 / (rows + cols)).
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_range(-limit, limit)).collect();
        self.register(name, Tensor::new(vec![rows, cols], data).expect("positive extents"))
    }

    /// Glorot-uniform vector, treated as a `[1, len]` matrix.
    pub fn glorot_vector(&mut self, name: &str, len: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (1 + len) as f64).sqrt();
        let data = (0..len).map(|_| rng.uniform_range(-limit, limit)).collect();
        self.register(name, Tensor::new(vec![len], data).expect("positive extents"))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::full(shape, 1.0))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Records every parameter on `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|v| graph.param(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Records every parameter as a constant; no gradients are tracked.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|v| graph.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

//! Named parameter storage and gradient accumulation.
//!
//! A finalized `ParamSet` is an immutable value; forward passes bind
//! parameters into a per-episode `Graph` through a `Binder` so each
//! parameter becomes exactly one leaf per graph.

use std::collections::{BTreeMap, HashMap};

use super::{Graph, NodeId, Result, Rng, Tensor, TensorError};

/// All model parameters, keyed by name. BTreeMap keeps iteration order
/// stable, which the optimizer and checkpoints rely on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    /// Insert a tensor with entries uniform in [-scale, scale].
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, scale: f64, rng: &mut Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(-scale, scale)).collect();
        self.map.insert(name.to_string(), Tensor { shape, data });
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.map.insert(name.to_string(), Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| TensorError::Invalid {
            op: "params",
            reason: format!("unknown parameter {name}"),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| TensorError::Invalid {
            op: "params",
            reason: format!("unknown parameter {name}"),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Binds parameters into one graph, once each.
pub struct Binder {
    bound: HashMap<String, NodeId>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { bound: HashMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph, params: &ParamSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = g.param(name, params.get(name)?.clone())?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    map: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Collect per-parameter gradients from a graph after backward.
    pub fn accumulate_from(&mut self, g: &Graph) -> Result<()> {
        for (name, id) in g.param_nodes() {
            let grad = match g.grad(*id) {
                Ok(t) => t.clone(),
                // a parameter bound but unused in this pass gets zero
                Err(TensorError::NoGradient) => Tensor::zeros(g.value(*id).shape.clone()),
                Err(e) => return Err(e),
            };
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&grad.data) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), grad);
                }
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.map.values_mut() {
            for x in t.data.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

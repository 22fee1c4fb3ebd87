use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, SeededRng, Tensor, Var};

/// Initialization rule for a declared parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
}

/// Named parameter tensors, ordered by path.
///
/// A store built with [`ParamStore::shapes_only`] records shapes without
/// allocating, which is how paper-scale models are enumerated.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    shapes: BTreeMap<String, Vec<usize>>,
    lazy: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shapes_only() -> Self {
        Self {
            lazy: true,
            ..Self::default()
        }
    }

    pub fn is_shapes_only(&self) -> bool {
        self.lazy
    }

    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut SeededRng) -> Result<()> {
        if self.contains(name) {
            return Err(Error::invalid(format!("parameter `{name}` declared twice")));
        }
        self.shapes.insert(name.to_string(), shape.to_vec());
        if self.lazy {
            return Ok(());
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Uniform(b) => Tensor::uniform(shape, -b, b, rng),
        };
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.shapes.insert(name.clone(), t.shape().to_vec());
        if !self.lazy {
            self.tensors.insert(name, t);
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.shapes.remove(name);
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.shapes.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| {
            if self.lazy {
                Error::invalid(format!("parameter `{name}` has no values in a shapes-only store"))
            } else {
                Error::invalid(format!("unknown parameter `{name}`"))
            }
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.shapes.get(name).map(|s| s.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.shapes.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn numel(&self, name: &str) -> usize {
        self.shapes.get(name).map(|s| s.iter().product()).unwrap_or(0)
    }

    /// Total scalar count over parameters matching `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.shapes
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Moves every parameter of `other` into this store.
    pub fn absorb(&mut self, other: ParamStore) -> Result<()> {
        for (name, shape) in other.shapes {
            if self.shapes.contains_key(&name) {
                return Err(Error::invalid(format!("parameter `{name}` already present")));
            }
            self.shapes.insert(name, shape);
        }
        self.tensors.extend(other.tensors);
        Ok(())
    }
}

/// Per-forward-pass state: the tape, the parameter source, and which
/// parameters are differentiable.
pub struct Ctx<'g, 's> {
    pub graph: &'g Graph,
    pub store: &'s ParamStore,
    trainable: Option<&'s BTreeSet<String>>,
    vars: RefCell<BTreeMap<String, Var<'g>>>,
    pub train: bool,
    rng: RefCell<SeededRng>,
}

impl<'g, 's> Ctx<'g, 's> {
    /// Evaluation context: no dropout; parameters enter as constants when the
    /// graph has gradients disabled.
    pub fn eval(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self {
            graph,
            store,
            trainable: None,
            vars: RefCell::new(BTreeMap::new()),
            train: false,
            rng: RefCell::new(SeededRng::new(0)),
        }
    }

    /// Training context. With `trainable = None` every parameter is
    /// differentiable; otherwise only the named ones are.
    pub fn train(
        graph: &'g Graph,
        store: &'s ParamStore,
        trainable: Option<&'s BTreeSet<String>>,
        rng: SeededRng,
    ) -> Self {
        Self {
            graph,
            store,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
            train: true,
            rng: RefCell::new(rng),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let differentiable = self.graph.grad_enabled() && self.trainable.map_or(true, |s| s.contains(name));
        let v = if differentiable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut SeededRng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    /// Gradients for every differentiable parameter touched in this pass.
    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let differentiable = |name: &str| self.trainable.map_or(true, |s| s.contains(name));
        self.vars
            .borrow()
            .iter()
            .filter(|(k, _)| differentiable(k))
            .map(|(k, v)| (k.clone(), grads.take(*v)))
            .collect()
    }
}

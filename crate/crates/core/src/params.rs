use std::collections::HashMap;

use bootvit_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{config, CoreError, Result};
use crate::rng::trunc_normal;

/// Which parameter set a tensor belongs to: ViT-private, agent-private, or
/// shared between both networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Vit,
    Agent,
    Shared,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Vit => "vit",
            Group::Agent => "agent",
            Group::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vit" => Some(Group::Vit),
            "agent" => Some(Group::Agent),
            "shared" => Some(Group::Shared),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Owns every trainable tensor exactly once, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return config(format!("parameter {name} registered twice"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value });
        Ok(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self
            .id(name)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter {name}")))?;
        Ok(&mut self.params[i].value)
    }

    pub fn by_id(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over the listed groups.
    pub fn count(&self, groups: &[Group]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that `name` exists with the given shape.
    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<()> {
        let v = self.value(name)?;
        if v.shape() != shape {
            return config(format!("parameter {name} has shape {:?}, expected {shape:?}", v.shape()));
        }
        Ok(())
    }
}

/// Parameter registration helper applying the initialization rules:
/// truncated normal for projections and embeddings, zeros for biases,
/// ones for norm gains.
pub struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    pub fn normal(&mut self, name: &str, group: Group, shape: &[usize]) -> Result<String> {
        let std = self.std;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(trunc_normal(rng, std)));
        self.store.insert(name, group, t)?;
        Ok(name.to_string())
    }

    pub fn zeros(&mut self, name: &str, group: Group, shape: &[usize]) -> Result<String> {
        self.store.insert(name, group, Tensor::zeros(shape))?;
        Ok(name.to_string())
    }

    pub fn ones(&mut self, name: &str, group: Group, shape: &[usize]) -> Result<String> {
        self.store.insert(name, group, Tensor::ones(shape))?;
        Ok(name.to_string())
    }
}

/// Loads store parameters into a graph on first use. Each binder creates
/// its own leaves, so two binders over one store see the same values
/// through distinct leaves and receive separate gradients.
pub struct Binder<'s, T> {
    store: &'s ParamStore<T>,
    trainable: bool,
    vars: Vec<(usize, Var)>,
    lookup: HashMap<usize, Var>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            vars: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// A binder whose leaves for the given parameter ids already exist in
    /// the graph. Other parameters are bound lazily as usual.
    pub fn with_leaves(store: &'s ParamStore<T>, trainable: bool, leaves: impl IntoIterator<Item = (usize, Var)>) -> Self {
        let mut b = Self::new(store, trainable);
        for (id, v) in leaves {
            if b.lookup.insert(id, v).is_none() {
                b.vars.push((id, v));
            }
        }
        b
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.lookup.get(&id) {
            return Ok(v);
        }
        let value = self.store.by_id(id).value.clone();
        let v = if self.trainable { g.param(value) } else { g.constant(value) };
        self.lookup.insert(id, v);
        self.vars.push((id, v));
        Ok(v)
    }

    /// `(parameter id, leaf)` pairs in binding order.
    pub fn bound(&self) -> &[(usize, Var)] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Group::Vit, Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Group::Agent, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn two_binders_make_two_leaves() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Group::Shared, Tensor::ones(&[1])).unwrap();
        let mut g = Graph::new();
        let mut a = Binder::new(&s, true);
        let mut b = Binder::new(&s, true);
        let va = a.var(&mut g, "w").unwrap();
        let vb = b.var(&mut g, "w").unwrap();
        assert_ne!(va, vb);
        assert_eq!(a.var(&mut g, "w").unwrap(), va);
    }
}

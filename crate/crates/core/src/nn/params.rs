//! Named parameter storage.
//!
//! Layers refer to their weights by [`ParamId`]. A forward pass binds every
//! parameter onto a fresh tape with [`ParamStore::bind`]; frozen parameters
//! become constants and never receive gradients.

use std::collections::BTreeMap;
use std::ops::Index;

use crate::autograd::{Gradients, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

/// Tape handles for every parameter of a store, in id order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps handles already on a tape, in parameter id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err(
                "ParamStore::set",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Overwrites all values in id order.
    pub fn set_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(shape_err("ParamStore::set_values", format!("{} values for {} params", values.len(), self.params.len())));
        }
        for (i, v) in values.iter().enumerate() {
            self.set(ParamId(i), v.clone())?;
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks every parameter whose name matches one of the glob `patterns`
    /// as frozen. Returns how many were frozen.
    pub fn freeze(&mut self, patterns: &[String]) -> Result<usize> {
        let compiled = patterns
            .iter()
            .map(|p| glob::Pattern::new(p).map_err(|e| Error::Config(format!("freeze pattern {p:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut frozen = 0;
        for p in &mut self.params {
            if compiled.iter().any(|pat| pat.matches(&p.name)) {
                p.trainable = false;
                frozen += 1;
            }
        }
        Ok(frozen)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on `tape`; frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound(vars))
    }

    /// Per-parameter gradients in id order (zeros for frozen parameters).
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.0.iter().map(|&v| grads.wrt(v)).collect()
    }
}

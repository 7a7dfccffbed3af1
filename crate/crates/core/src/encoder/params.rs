//! Named parameter store and its binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Float> {
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Insertion-ordered parameters keyed by dotted name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Float> {
    map: IndexMap<String, Param<F>>,
}

impl<F: Float> Default for ParamSet<F> {
    fn default() -> Self {
        ParamSet { map: IndexMap::new() }
    }
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.map.insert(name.into(), Param { value, trainable: true });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.map
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<F>> {
        self.map.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.map
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    /// Sets `trainable` on every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, trainable: bool, pred: impl Fn(&str) -> bool) {
        for (k, p) in self.map.iter_mut() {
            if pred(k) {
                p.trainable = trainable;
            }
        }
    }

    /// SHA-256 over names, shapes and little-endian bytes of the selected
    /// parameters, in store order.
    pub fn digest_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.map {
            if !pred(k) {
                continue;
            }
            h.update(k.as_bytes());
            h.update([0u8]);
            for s in p.value.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn digest(&self) -> String {
        self.digest_where(|_| true)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Lazily places parameters onto a tape as leaves.
///
/// Trainable parameters become differentiable leaves unless the binding is
/// frozen; everything else is a constant.
pub struct Bound<'t, 'p, F: Float> {
    tape: &'t Tape<F>,
    params: &'p ParamSet<F>,
    frozen: bool,
    vars: RefCell<HashMap<String, Var<'t, F>>>,
}

impl<'t, 'p, F: Float> Bound<'t, 'p, F> {
    pub fn new(tape: &'t Tape<F>, params: &'p ParamSet<F>) -> Self {
        Bound { tape, params, frozen: false, vars: RefCell::new(HashMap::new()) }
    }

    /// Every parameter enters the tape as a constant.
    pub fn frozen(tape: &'t Tape<F>, params: &'p ParamSet<F>) -> Self {
        Bound { frozen: true, ..Self::new(tape, params) }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let p = self
            .params
            .param(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))?;
        let v = self.tape.leaf(p.value.clone(), p.trainable && !self.frozen);
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters touched so far, sorted.
    pub fn touched(&self) -> Vec<String> {
        let mut v: Vec<String> = self.vars.borrow().keys().cloned().collect();
        v.sort();
        v
    }

    /// Gradients for every bound trainable parameter, in store order. Bound
    /// parameters the loss does not reach get zeros.
    pub fn collect_grads(&self, grads: &Gradients<F>) -> IndexMap<String, Tensor<F>> {
        let vars = self.vars.borrow();
        self.params
            .iter()
            .filter(|(_, p)| p.trainable && !self.frozen)
            .filter_map(|(k, _)| vars.get(k).map(|&v| (k.to_string(), grads.get_or_zeros(v))))
            .collect()
    }
}

use std::collections::HashMap;

use crate::autodiff::tape::{Gradients, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub trainable: bool,
}

/// Named parameter storage in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            bail!(Contract, "parameter {name} registered twice");
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Marks exactly the parameters matching `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies tape gradients into every trainable parameter; parameters that
    /// were not bound, or did not reach the loss, get a zero gradient.
    pub fn absorb_grads(&mut self, binder: &Binder, grads: &Gradients<S>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let incoming = binder.bound[i].and_then(|v| grads.get(v));
            let shape = p.value.shape().to_vec();
            match (&mut p.grad, incoming) {
                (Some(acc), Some(g)) => {
                    for (a, &x) in acc.data_mut().iter_mut().zip(g) {
                        *a = *a + x;
                    }
                }
                (slot @ None, Some(g)) => {
                    *slot = Some(Tensor::new(shape, g.to_vec()).expect("grad shape"));
                }
                (slot @ None, None) => *slot = Some(Tensor::zeros(&shape)),
                (Some(_), None) => {}
            }
        }
    }

    /// FNV-1a over the raw bits of every parameter whose name satisfies `pred`.
    pub fn checksum(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| pred(&p.name)) {
            for b in p.name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
            bytes.clear();
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
            for &b in &bytes {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Lazily places parameters on one tape, at most once each.
#[derive(Debug)]
pub struct Binder {
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl Binder {
    pub fn new<S: Scalar>(params: &ParamStore<S>, grad_enabled: bool) -> Self {
        Self {
            bound: vec![None; params.len()],
            grad_enabled,
        }
    }

    pub fn bind<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        id: ParamId,
    ) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = params.get(id);
        let v = tape.leaf(p.value.clone(), self.grad_enabled && p.trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("base.w", Tensor::full(&[2, 2], 1.0), true).unwrap();
        s.insert("moe.w", Tensor::full(&[1, 2], 2.0), false).unwrap();
        s
    }

    #[test]
    fn names_are_unique() {
        let mut s = store();
        assert!(s.insert("base.w", Tensor::zeros(&[1, 1]), true).is_err());
        assert_eq!(s.id("moe.w").map(ParamId::index), Some(1));
        assert_eq!(s.trainable_count(), 4);
    }

    #[test]
    fn checksum_tracks_only_selected_values() {
        let mut s = store();
        let base = s.checksum(|n| n.starts_with("base"));
        let id = s.id("moe.w").unwrap();
        s.get_mut(id).value.data_mut()[0] = 5.0;
        assert_eq!(s.checksum(|n| n.starts_with("base")), base);
        let id = s.id("base.w").unwrap();
        s.get_mut(id).value.data_mut()[3] = 1.0 + f64::EPSILON;
        assert_ne!(s.checksum(|n| n.starts_with("base")), base);
    }

    #[test]
    fn frozen_params_bind_without_gradients() {
        let s = store();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&s, true);
        let w = binder.bind(&mut tape, &s, s.id("base.w").unwrap()).unwrap();
        let m = binder.bind(&mut tape, &s, s.id("moe.w").unwrap()).unwrap();
        assert_eq!(binder.bind(&mut tape, &s, s.id("base.w").unwrap()).unwrap(), w);
        assert!(tape.requires_grad(w));
        assert!(!tape.requires_grad(m));
        let no_grad = Binder::new(&s, false).bind(&mut tape, &s, s.id("base.w").unwrap()).unwrap();
        assert!(!tape.requires_grad(no_grad));
    }

    #[test]
    fn unreached_trainables_absorb_zero() {
        let mut s = store();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&s, true);
        let w = binder.bind(&mut tape, &s, s.id("base.w").unwrap()).unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        s.absorb_grads(&binder, &g);
        s.absorb_grads(&binder, &g);
        let base = s.get(s.id("base.w").unwrap());
        assert_eq!(base.grad.as_ref().unwrap().data(), &[2.0; 4]);
        assert!(s.get(s.id("moe.w").unwrap()).grad.is_none());
        s.zero_grads();
        assert!(s.iter().all(|(_, p)| p.grad.is_none()));
    }
}

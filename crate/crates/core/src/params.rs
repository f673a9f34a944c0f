//! Named parameter store shared by every trainable module.
//!
//! Parameters live in a sorted map so checkpoint layout, optimizer order
//! and momentum updates are all deterministic. Forward passes register
//! leaves on a [`Graph`] by name; [`harvest`] routes gradients back here.

use std::collections::BTreeMap;

use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t.with_grad());
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds each registered graph gradient into the matching parameter's
    /// grad slot, scaled (micro-batch averaging hooks in here).
    pub fn harvest(&mut self, graph: &Graph, scale: f64) {
        for (name, id) in graph.registered_params() {
            if let Some(g) = graph.grad(*id) {
                self.get_mut(name).accumulate_grad(g, scale);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.zero_grad();
        }
    }

    /// Momentum EMA: for every name under `online_prefix`, the twin under
    /// `momentum_prefix` becomes `m·momentum + (1−m)·online`.
    pub fn momentum_update(
        &mut self,
        online_prefix: &str,
        momentum_prefix: &str,
        m: f64,
    ) -> Result<(), TensorError> {
        let online: Vec<(String, Vec<f64>)> = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(online_prefix))
            .map(|(k, v)| (k.clone(), v.data.clone()))
            .collect();
        for (name, x) in online {
            let twin = format!("{momentum_prefix}{}", &name[online_prefix.len()..]);
            let y = self.map.get_mut(&twin).ok_or_else(|| {
                TensorError::Contract(format!("momentum twin {twin} missing for {name}"))
            })?;
            if y.data.len() != x.len() {
                return Err(TensorError::Contract(format!(
                    "momentum twin {twin} diverged in shape"
                )));
            }
            for (yv, xv) in y.data.iter_mut().zip(&x) {
                *yv = m * *yv + (1.0 - m) * xv;
            }
        }
        Ok(())
    }

    /// Copies every parameter under `from_prefix` onto its twin under
    /// `to_prefix`, bit-exact (momentum pair initialization).
    pub fn copy_prefix(&mut self, from_prefix: &str, to_prefix: &str) {
        let src: Vec<(String, Tensor)> = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(from_prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (name, t) in src {
            let twin = format!("{to_prefix}{}", &name[from_prefix.len()..]);
            self.map.insert(twin, t);
        }
    }
}

/// Registers store parameters on a graph, once per name. `trainable`
/// selects gradient leaves vs frozen inputs (momentum encoder, freeze
/// flags); tied weights resolve to the same node either way.
pub struct ParamGraph<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    trainable: bool,
    cache: BTreeMap<String, crate::tensor::NodeId>,
}

impl<'a> ParamGraph<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            cache: BTreeMap::new(),
        }
    }

    pub fn p(&mut self, name: &str) -> crate::tensor::NodeId {
        if let Some(&id) = self.cache.get(name) {
            return id;
        }
        let t = self.store.get(name);
        let id = if self.trainable {
            self.graph.param(name, t)
        } else {
            self.graph.input(t)
        };
        self.cache.insert(name.to_string(), id);
        id
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Flips the registration mode for subsequent lookups (one graph can
    /// mix a frozen encoder with a trainable fusion stack).
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
}

/// Plain gradient descent with momentum. Parameters matched by name; the
/// `skip_prefixes` list keeps EMA-only twins out of the update.
#[derive(Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
    skip_prefixes: Vec<String>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, skip_prefixes: Vec<String>) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
            skip_prefixes,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        let skip = self.skip_prefixes.clone();
        for (name, t) in store.iter_mut() {
            if skip.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let grad = match &t.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((vi, gi), di) in v.iter_mut().zip(&grad).zip(t.data.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *di -= self.lr * *vi;
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update_arithmetic() {
        let mut store = ParamStore::new();
        store.insert("online.w", Tensor::scalar(1.0));
        store.insert("momentum.w", Tensor::scalar(2.0));
        store.momentum_update("online.", "momentum.", 0.9).unwrap();
        assert!((store.get("momentum.w").data[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_edge_coefficients() {
        let mut store = ParamStore::new();
        store.insert("online.w", Tensor::scalar(1.0));
        store.insert("momentum.w", Tensor::scalar(2.0));
        store.momentum_update("online.", "momentum.", 1.0).unwrap();
        assert_eq!(store.get("momentum.w").data[0], 2.0);
        store.momentum_update("online.", "momentum.", 0.0).unwrap();
        assert_eq!(store.get("momentum.w").data[0], 1.0);
    }

    #[test]
    fn missing_twin_is_contract_error() {
        let mut store = ParamStore::new();
        store.insert("online.w", Tensor::scalar(1.0));
        assert!(store.momentum_update("online.", "momentum.", 0.5).is_err());
    }
}

//! Named parameter storage, graph binding and the AdamW optimizer.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Optimizer group a parameter belongs to. Frozen parameters never change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Frozen,
    Instruction,
    Projection,
    Hybrid,
}

impl ParamGroup {
    pub fn is_trainable(self) -> bool {
        self != ParamGroup::Frozen
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    groups: Vec<ParamGroup>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Mat, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        id
    }

    pub fn randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Mat::randn(rows, cols, std, rng), group)
    }

    pub fn zeros(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
    ) -> ParamId {
        self.add(name, Mat::zeros(rows, cols), group)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.groups[id.0] = group;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count_total(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.ids()
            .filter(|&id| self.group(id).is_trainable())
            .map(|id| self.get(id).len())
            .sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .map(|id| self.get(id).len())
            .sum()
    }
}

/// Binds parameters into a [`Graph`] lazily, once per graph.
///
/// Parameters whose group is not in `train` enter the graph as constants, so
/// no gradient work is done for them.
pub struct Binder<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    train: &'a [ParamGroup],
    bound: HashMap<ParamId, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, train: &'a [ParamGroup]) -> Self {
        Binder {
            graph: Graph::new(),
            store,
            train,
            bound: HashMap::new(),
        }
    }

    /// A binder that treats every parameter as constant.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let value = self.store.get(id).clone();
        let v = if self.train.contains(&self.store.group(id)) {
            self.graph.variable(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(id, v);
        v
    }

    /// The `Var` a parameter is bound to, if it was used.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    /// Gradients of every bound trainable parameter, sorted by id.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam with one learning rate per [`ParamGroup`].
pub struct AdamW {
    cfg: AdamWConfig,
    lr: HashMap<ParamGroup, f64>,
    moments: HashMap<ParamId, (Mat, Mat)>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, lr: &[(ParamGroup, f64)]) -> Self {
        AdamW {
            cfg,
            lr: lr.iter().copied().collect(),
            moments: HashMap::new(),
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in grads {
            let group = store.group(*id);
            let Some(&lr) = self.lr.get(&group) else {
                continue;
            };
            if !group.is_trainable() {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Mat::zeros(g.rows(), g.cols()), Mat::zeros(g.rows(), g.cols())));
            let p = store.get_mut(*id);
            let decay = 1.0 - lr * self.cfg.weight_decay;
            for (((pi, gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi = *pi * decay - lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

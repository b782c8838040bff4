use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ColumnStats, Graph, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named tensors of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Replace every tensor with the matching one from `other`, which must
    /// have the same names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform initialization in `(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization; running statistics are updated.
    Train,
    /// Running statistics only; every row is processed independently.
    Eval,
}

/// Batch statistics observed by one normalization layer during a
/// training-mode forward pass.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: ColumnStats,
}

/// State of one forward pass: the graph under construction plus the
/// bookkeeping that maps store parameters onto graph leaves.
pub struct ForwardCtx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    updates: Vec<NormUpdate>,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        ForwardCtx {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads: true,
            updates: Vec::new(),
            trace: None,
        }
    }

    /// A context that records no gradients, for inference.
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut ctx = Self::new(store, Mode::Eval);
        ctx.track_grads = false;
        ctx
    }

    /// Record the per-unit shape at each named stage of the forward pass.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The graph leaf for a parameter. Each parameter is bound once per
    /// pass, so every use shares one leaf and its gradient accumulates.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let value = entry.tensor.clone();
        let v = if self.track_grads && entry.trainable {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// The leaf a parameter was bound to during this pass, if it was used.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    pub(crate) fn record_norm(&mut self, update: NormUpdate) {
        self.updates.push(update);
    }

    pub fn norm_updates(&self) -> &[NormUpdate] {
        &self.updates
    }

    pub fn record(&mut self, stage: &str, shape: &[usize]) {
        if let Some(trace) = &mut self.trace {
            trace.push((stage.to_string(), shape.to_vec()));
        }
    }

    pub fn trace(&self) -> &[(String, Vec<usize>)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Gradients of every store entry after `graph.backward`, aligned with
    /// the store. Entries that were unused or are not trainable get `None`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v)))
            .collect()
    }
}

/// Fold training-mode batch statistics into the running estimates:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_norm_updates(store: &mut ParamStore, updates: &[NormUpdate], momentum: f64) {
    for u in updates {
        blend(store.get_mut(u.running_mean), &u.stats.mean, momentum);
        blend(store.get_mut(u.running_var), &u.stats.var, momentum);
    }
}

fn blend(running: &mut Tensor, batch: &[f64], momentum: f64) {
    for (r, b) in running.data_mut().iter_mut().zip(batch) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
}

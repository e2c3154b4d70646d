//! Parameterized layers built on the tape primitives.
//!
//! Parameters live in a [`ParamStore`] owned by the model. A [`Forward`]
//! pass binds parameters onto a fresh [`Tape`] lazily, the first time a layer
//! asks for them, and collects batch-norm statistic updates so the store can
//! be updated after the pass (evaluation never mutates the model).

mod attention;
mod init;
mod layers;
mod shrinkage;

pub use attention::{multi_head_attention, scaled_dot_product_attention, AttentionHeadSet};
pub use init::{he_normal, xavier_uniform};
pub use layers::{BatchNorm1d, Conv1d, Dense, FeedForward, LayerNorm, BN_MOMENTUM};
pub use shrinkage::{soft_threshold, ThresholdGenerator};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored and checkpointed
    /// but never receive gradients.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// One named tensor in a checkpoint, values row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.entries
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                values: e.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites every entry from `records`, which must list the same names and shapes.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.entries.len()
            )));
        }
        for (entry, rec) in self.entries.iter_mut().zip(records) {
            if entry.name != rec.name || entry.value.shape() != rec.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    rec.name,
                    rec.shape,
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = Tensor::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// A single forward (and optional backward) pass over a [`ParamStore`].
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Forward<'a> {
    /// `track_grads` makes trainable parameters gradient leaves.
    pub fn new(store: &'a ParamStore, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self
            .tape
            .leaf(entry.value.clone(), self.track_grads && entry.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound trainable parameter, in store order.
    /// Parameters the pass never touched are reported with zero gradient.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, e)| {
                let g = self.bound[id.0]
                    .and_then(|v| self.tape.grad(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; e.value.len()]);
                (id, g)
            })
            .collect()
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }
}

impl ParamStore {
    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var_unbiased) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

/// Per-class FIFO store of flattened generated latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    classes: BTreeMap<usize, VecDeque<Tensor>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory bank capacity must be positive"));
        }
        Ok(MemoryBank {
            capacity,
            classes: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, class_id: usize) -> usize {
        self.classes.get(&class_id).map_or(0, VecDeque::len)
    }

    pub fn total(&self) -> usize {
        self.classes.values().map(VecDeque::len).sum()
    }

    pub fn entries(&self, class_id: usize) -> Vec<&Tensor> {
        self.classes.get(&class_id).map(|q| q.iter().collect()).unwrap_or_default()
    }

    /// Appends the flattened latent, evicting the oldest entry past capacity.
    pub fn insert(&mut self, class_id: usize, latent: &Tensor) -> Result<()> {
        let flat = latent.clone().checked("bank_insert")?.flatten();
        let q = self.classes.entry(class_id).or_default();
        q.push_back(flat);
        if q.len() > self.capacity {
            q.pop_front();
        }
        Ok(())
    }

    /// Up to `n_cap` entries of `class_id`, uniformly without replacement.
    pub fn sample(&self, class_id: usize, n_cap: usize, rng: &mut RngState) -> Vec<Tensor> {
        let Some(q) = self.classes.get(&class_id) else {
            return Vec::new();
        };
        if q.len() <= n_cap {
            return q.iter().cloned().collect();
        }
        let mut idx = rng.sample_indices(q.len(), n_cap);
        idx.sort_unstable();
        idx.into_iter().map(|i| q[i].clone()).collect()
    }
}

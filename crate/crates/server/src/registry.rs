//! Published snapshots. Readers clone an `Arc` under a short read lock, so
//! a request keeps the snapshot it started with while a publish swaps in
//! a new one.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use crate::snapshot::{ApiError, ModelInfo, ModelSnapshot};

#[derive(Default)]
struct Inner {
    snapshots: BTreeMap<String, Arc<ModelSnapshot>>,
    active: Option<String>,
}

#[derive(Default)]
pub struct Registry {
    inner: RwLock<Inner>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the snapshot under its id and makes it the
    /// default for requests that name no model.
    pub fn publish(&self, snap: ModelSnapshot) -> String {
        let id = snap.id.clone();
        let snap = Arc::new(snap);
        let mut g = self.inner.write().expect("registry lock");
        g.snapshots.insert(id.clone(), snap);
        g.active = Some(id.clone());
        id
    }

    pub fn get(&self, id: Option<&str>) -> Result<Arc<ModelSnapshot>, ApiError> {
        let g = self.inner.read().expect("registry lock");
        let id = match id.filter(|s| !s.is_empty()) {
            Some(id) => id.to_string(),
            None => g
                .active
                .clone()
                .ok_or_else(|| ApiError::new(404, "unknown_model", "no model has been published"))?,
        };
        g.snapshots
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::new(404, "unknown_model", format!("no model {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("registry lock").snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        let g = self.inner.read().expect("registry lock");
        g.snapshots.values().map(|s| s.info()).collect()
    }

    pub fn active(&self) -> Option<String> {
        self.inner.read().expect("registry lock").active.clone()
    }
}

use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor2D;
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2D,
    pub frozen: bool,
}

/// Anything that owns named tensors the optimizer may update.
pub trait ParamSet {
    /// Visits `(name, value, frozen)` in a stable order.
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor2D, bool));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2D, bool));

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D>;
}

/// Flat name-indexed store for dense weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D) {
        let name = name.into();
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                value,
                frozen: false,
            },
        );
    }

    pub fn init_glorot<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        self.insert(name, Tensor2D::glorot(rows, cols, rng));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor2D::zeros(rows, cols));
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params.get(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params.get_mut(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.values_mut() {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }
}

impl ParamSet for ParamStore {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor2D, bool)) {
        for p in self.params.values() {
            f(&p.name, &p.value, p.frozen);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2D, bool)) {
        for p in self.params.values_mut() {
            f(&p.name, &mut p.value, p.frozen);
        }
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }
}

/// Accumulated gradient for one named tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf {
    Dense(Tensor2D),
    /// Row-sparse gradient, for lookup tables.
    Rows {
        rows: usize,
        cols: usize,
        entries: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            GradBuf::Dense(t) => t.get(i, j),
            GradBuf::Rows { cols, entries, .. } => {
                debug_assert!(j < *cols);
                entries.get(&i).map_or(0.0, |r| r[j])
            }
        }
    }

    pub fn to_dense(&self) -> Tensor2D {
        match self {
            GradBuf::Dense(t) => t.clone(),
            GradBuf::Rows {
                rows,
                cols,
                entries,
            } => {
                let mut t = Tensor2D::zeros(*rows, *cols);
                for (r, v) in entries {
                    t.row_mut(*r).copy_from_slice(v);
                }
                t
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            GradBuf::Dense(t) => t.is_finite(),
            GradBuf::Rows { entries, .. } => {
                entries.values().all(|r| r.iter().all(|x| x.is_finite()))
            }
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, GradBuf>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&GradBuf> {
        self.map.get(name)
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

    pub(crate) fn add_dense(&mut self, name: &str, g: &Tensor2D) {
        match self.map.get_mut(name) {
            Some(GradBuf::Dense(t)) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            Some(rows @ GradBuf::Rows { .. }) => {
                let mut t = rows.to_dense();
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
                *rows = GradBuf::Dense(t);
            }
            None => {
                self.map.insert(name.to_string(), GradBuf::Dense(g.clone()));
            }
        }
    }

    pub(crate) fn add_row(&mut self, name: &str, shape: (usize, usize), row: usize, g: &[f64], weight: f64) {
        let buf = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| GradBuf::Rows {
                rows: shape.0,
                cols: shape.1,
                entries: BTreeMap::new(),
            });
        match buf {
            GradBuf::Dense(t) => {
                for (a, b) in t.row_mut(row).iter_mut().zip(g) {
                    *a += weight * b;
                }
            }
            GradBuf::Rows { cols, entries, .. } => {
                let r = entries.entry(row).or_insert_with(|| vec![0.0; *cols]);
                for (a, b) in r.iter_mut().zip(g) {
                    *a += weight * b;
                }
            }
        }
    }

    /// Merges another gradient set into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (name, buf) in other.map {
            match buf {
                GradBuf::Dense(t) => self.add_dense(&name, &t),
                GradBuf::Rows {
                    rows,
                    cols,
                    entries,
                } => {
                    for (r, v) in entries {
                        self.add_row(&name, (rows, cols), r, &v, 1.0);
                    }
                }
            }
        }
    }
}

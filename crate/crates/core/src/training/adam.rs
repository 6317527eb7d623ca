use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GradBuf, Gradients, ParamSet, Tensor2D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Tensor2D,
    v: Tensor2D,
    step: u64,
    /// Rows that ever received a gradient; `None` means every row.
    active: Option<BTreeSet<usize>>,
}

/// Adam moments per parameter. A parameter's step count advances only on
/// steps where it receives a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub lr: f64,
    pub steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_config(lr, AdamConfig::default())
    }

    pub fn with_config(lr: f64, config: AdamConfig) -> Self {
        AdamState {
            config,
            lr,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// First and second moments of `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&Tensor2D, &Tensor2D)> {
        self.moments.get(name).map(|m| (&m.m, &m.v))
    }
}

/// One bias-corrected Adam update of every unfrozen parameter that has a
/// gradient. Rows of a lookup table that never received a gradient have
/// zero moments and are left alone, which matches a dense update exactly.
pub fn adam_step<P: ParamSet + ?Sized>(params: &mut P, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for name in grads.names() {
        if !grads.get(name).expect("listed").is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let cfg = state.config;
    let lr = state.lr;
    let moments = &mut state.moments;
    let mut shape_err = None;
    params.visit_params_mut(&mut |name, value, frozen| {
        if frozen || shape_err.is_some() {
            return;
        }
        let Some(g) = grads.get(name) else { return };
        let gshape = match g {
            GradBuf::Dense(t) => t.shape(),
            GradBuf::Rows { rows, cols, .. } => (*rows, *cols),
        };
        if gshape != value.shape() {
            shape_err = Some(Error::shape(
                "adam_step",
                format!("gradient of {name} is {gshape:?}, parameter is {:?}", value.shape()),
            ));
            return;
        }
        let mo = moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor2D::zeros(value.rows(), value.cols()),
            v: Tensor2D::zeros(value.rows(), value.cols()),
            step: 0,
            active: Some(BTreeSet::new()),
        });
        match g {
            GradBuf::Dense(_) => mo.active = None,
            GradBuf::Rows { entries, .. } => {
                if let Some(a) = mo.active.as_mut() {
                    a.extend(entries.keys().copied());
                }
            }
        }
        mo.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(mo.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(mo.step as i32);
        let cols = value.cols();
        let rows: Vec<usize> = match &mo.active {
            None => (0..value.rows()).collect(),
            Some(active) => active.iter().copied().collect(),
        };
        let (m, v, x) = (mo.m.data_mut(), mo.v.data_mut(), value.data_mut());
        for r in rows {
            let grow = match g {
                GradBuf::Dense(t) => Some(t.row(r)),
                GradBuf::Rows { entries, .. } => entries.get(&r).map(Vec::as_slice),
            };
            let base = r * cols;
            for j in 0..cols {
                let gj = grow.map_or(0.0, |g| g[j]);
                let k = base + j;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gj;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gj * gj;
                x[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            }
        }
    });
    if let Some(e) = shape_err {
        return Err(e);
    }
    state.steps += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grads_of(store: &ParamStore, f: impl for<'t> Fn(&'t ParamStore, &mut Tape<'t>) -> Var) -> Gradients {
        let mut tape = Tape::new();
        let out = f(store, &mut tape);
        tape.backward(out).unwrap()
    }

    use crate::numerics::Var;

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor2D::from_rows(&[[0.5, -0.5]]).unwrap());
        let g = grads_of(&store, |p, t| {
            let x = t.param_from(p, "x").unwrap();
            let c = t.constant(Tensor2D::from_rows(&[[3.0, -0.01]]).unwrap());
            let s = t.matmul_nt(x, c).unwrap();
            t.sum(s)
        });
        let mut st = AdamState::new(1e-3);
        adam_step(&mut store, &g, &mut st).unwrap();
        let x = &store.get("x").unwrap().value;
        // update is lr * g / (|g| + eps)
        assert!((x.get(0, 0) - (0.5 - 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((x.get(0, 1) - (-0.5 + 1e-3 * 0.01 / (0.01 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_and_frozen_are_no_ops() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor2D::from_rows(&[[0.5, -0.5]]).unwrap());
        store.insert("y", Tensor2D::from_rows(&[[2.0]]).unwrap());
        store.get_mut("y").unwrap().frozen = true;
        let before = store.clone();
        let mut g = Gradients::default();
        g.add_dense("x", &Tensor2D::zeros(1, 2));
        g.add_dense("y", &Tensor2D::filled(1, 1, 5.0));
        let mut st = AdamState::new(0.1);
        for _ in 0..5 {
            adam_step(&mut store, &g, &mut st).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2D::zeros(1, 1));
        let mut g = Gradients::default();
        g.add_dense("w", &Tensor2D::filled(1, 1, f64::NAN));
        match adam_step(&mut store, &g, &mut AdamState::new(0.1)) {
            Err(Error::NonFinite(m)) => assert!(m.contains('w')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sparse_rows_match_dense_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Tensor2D::uniform(6, 3, 1.0, &mut rng);
        let mut sparse = ParamStore::new();
        sparse.insert("t", init.clone());
        let mut dense = sparse.clone();
        let (mut s1, mut s2) = (AdamState::new(0.05), AdamState::new(0.05));
        for step in 0..30 {
            let mut gs = Gradients::default();
            let row = [step % 4, (step * 7) % 6];
            for &r in &row {
                let g: Vec<f64> = (0..3).map(|j| ((step + r + j) as f64).sin()).collect();
                gs.add_row("t", (6, 3), r, &g, 0.5);
            }
            let mut gd = Gradients::default();
            gd.add_dense("t", &gs.get("t").unwrap().to_dense());
            adam_step(&mut sparse, &gs, &mut s1).unwrap();
            adam_step(&mut dense, &gd, &mut s2).unwrap();
        }
        assert_eq!(sparse, dense);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut store = ParamStore::new();
            store.insert("a", Tensor2D::uniform(3, 3, 1.0, &mut rng));
            let mut st = AdamState::new(1e-2);
            for _ in 0..100 {
                let g = grads_of(&store, |p, t| {
                    let a = t.param_from(p, "a").unwrap();
                    let sq = t.matmul_nt(a, a).unwrap();
                    let r = t.relu(sq);
                    t.sum(r)
                });
                adam_step(&mut store, &g, &mut st).unwrap();
            }
            (store, st)
        };
        assert_eq!(run(), run());
    }
}

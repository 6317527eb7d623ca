//! Combining the four per-source text encodings into one vector, and the
//! `random_drop` source masking used while training fused models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::self_attention;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor2D, Var};
use crate::textprep::Source;

/// How source encodings are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseStrategy {
    /// Single-head attention across sources, then two linear layers.
    #[default]
    Attention,
    /// Element-wise maximum over sources.
    GlobalMaxPool,
    /// Element-wise sum of sources.
    ElementwiseAdd,
    /// Two fully connected + ReLU blocks over the concatenated sources.
    NeuralNet,
}

/// One encoding per source, in `Source::ALL` order. An absent source is
/// the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceEncodings {
    pub parts: [Vec<f64>; 4],
}

impl SourceEncodings {
    pub fn new(caption: Vec<f64>, body: Vec<f64>, headline: Vec<f64>, lead: Vec<f64>) -> Self {
        SourceEncodings {
            parts: [caption, body, headline, lead],
        }
    }

    pub fn zeros(d: usize) -> Self {
        SourceEncodings {
            parts: std::array::from_fn(|_| vec![0.0; d]),
        }
    }

    pub fn get(&self, source: Source) -> &[f64] {
        &self.parts[source.index()]
    }

    pub fn set(&mut self, source: Source, v: Vec<f64>) {
        self.parts[source.index()] = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
struct FuserNames {
    wq: String,
    wk: String,
    wv: String,
    l1: String,
    c1: String,
    l2: String,
    c2: String,
}

/// Fuser weights are stored in a [`ParamStore`] under the `fuser.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Fuser {
    strategy: FuseStrategy,
    d: usize,
    d_k: usize,
    names: FuserNames,
}

/// Output of [`Fuser::forward`]: the unit fused vector and, for the
/// attention strategy, the `4×4` component attention map.
pub struct Fused {
    pub vector: Var,
    pub map: Option<Var>,
}

impl Fuser {
    pub const PREFIX: &'static str = "fuser";

    pub fn new(strategy: FuseStrategy, d: usize, d_k: usize) -> Self {
        let n = |s: &str| format!("{}.{s}", Self::PREFIX);
        Fuser {
            strategy,
            d,
            d_k,
            names: FuserNames {
                wq: n("wq"),
                wk: n("wk"),
                wv: n("wv"),
                l1: n("l1"),
                c1: n("c1"),
                l2: n("l2"),
                c2: n("c2"),
            },
        }
    }

    pub fn strategy(&self) -> FuseStrategy {
        self.strategy
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn shapes(&self) -> Vec<(&str, (usize, usize))> {
        let (d, dk, n) = (self.d, self.d_k, &self.names);
        match self.strategy {
            FuseStrategy::Attention => vec![
                (&n.wq, (d, dk)),
                (&n.wk, (d, dk)),
                (&n.wv, (d, d)),
                (&n.l1, (4 * d, 4 * d)),
                (&n.c1, (1, 4 * d)),
                (&n.l2, (4 * d, d)),
                (&n.c2, (1, d)),
            ],
            FuseStrategy::NeuralNet => vec![
                (&n.l1, (4 * d, 4 * d)),
                (&n.c1, (1, 4 * d)),
                (&n.l2, (4 * d, d)),
                (&n.c2, (1, d)),
            ],
            FuseStrategy::GlobalMaxPool | FuseStrategy::ElementwiseAdd => Vec::new(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (name, (r, c)) in self.shapes() {
            if r == 1 {
                store.init_zeros(name, r, c);
            } else {
                store.init_glorot(name, r, c, rng);
            }
        }
    }

    pub fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        for (name, shape) in self.shapes() {
            let got = store.get(name)?.value.shape();
            if got != shape {
                return Err(Error::load(name, format!("shape {got:?}, expected {shape:?}")));
            }
        }
        Ok(())
    }

    /// `parts` are four `1×d` nodes in `Source::ALL` order.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, parts: &[Var; 4]) -> Result<Fused> {
        for &p in parts {
            if tape.value(p).shape() != (1, self.d) {
                return Err(Error::shape(
                    "fuse",
                    format!("source encoding {:?}, expected (1, {})", tape.value(p).shape(), self.d),
                ));
            }
        }
        let stacked = tape.stack_rows(parts)?;
        let (pre, map) = match self.strategy {
            FuseStrategy::Attention => {
                let wq = tape.param_from(store, &self.names.wq)?;
                let wk = tape.param_from(store, &self.names.wk)?;
                let wv = tape.param_from(store, &self.names.wv)?;
                let (att, map) = self_attention(tape, stacked, wq, wk, wv)?;
                let flat = tape.flatten(att);
                (self.two_layers(tape, store, flat, false)?, Some(map))
            }
            FuseStrategy::NeuralNet => {
                let flat = tape.flatten(stacked);
                (self.two_layers(tape, store, flat, true)?, None)
            }
            FuseStrategy::GlobalMaxPool => (tape.max_pool_rows(stacked)?, None),
            FuseStrategy::ElementwiseAdd => {
                let mean = tape.mean_rows(stacked)?;
                (tape.scale(mean, 4.0), None)
            }
        };
        let vector = tape.normalize_rows(pre);
        Ok(Fused { vector, map })
    }

    fn two_layers<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, final_relu: bool) -> Result<Var> {
        let l1 = tape.param_from(store, &self.names.l1)?;
        let c1 = tape.param_from(store, &self.names.c1)?;
        let l2 = tape.param_from(store, &self.names.l2)?;
        let c2 = tape.param_from(store, &self.names.c2)?;
        let h = tape.matmul(x, l1)?;
        let h = tape.add_row(h, c1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, l2)?;
        let o = tape.add_row(o, c2)?;
        Ok(if final_relu { tape.relu(o) } else { o })
    }

    /// Fuses concrete encodings; returns the vector and the component map
    /// when the strategy has one.
    pub fn fuse(&self, store: &ParamStore, enc: &SourceEncodings) -> Result<(Vec<f64>, Option<Tensor2D>)> {
        let mut tape = Tape::new();
        let parts = std::array::from_fn(|k| tape.constant(Tensor2D::row_vector(enc.parts[k].clone())));
        let out = self.forward(&mut tape, store, &parts)?;
        let map = out.map.map(|m| tape.value(m).clone());
        Ok((tape.value(out.vector).data().to_vec(), map))
    }
}

/// Which sources survive a draw of [`random_drop`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropMask {
    pub keep: [bool; 4],
    /// The source that was guaranteed to survive.
    pub preserved: Source,
}

impl DropMask {
    pub fn complete() -> Self {
        DropMask {
            keep: [true; 4],
            preserved: Source::Caption,
        }
    }

    pub fn keeps(&self, source: Source) -> bool {
        self.keep[source.index()]
    }

    /// Replaces dropped entries with their default (an empty string for text).
    pub fn apply<T: Default>(&self, parts: [T; 4]) -> [T; 4] {
        let mut i = 0;
        parts.map(|p| {
            let kept = self.keep[i];
            i += 1;
            if kept {
                p
            } else {
                T::default()
            }
        })
    }
}

/// Default probability of keeping a non-preserved source.
pub const KEEP_PROB: f64 = 0.7;

/// Preserves one uniformly chosen source; keeps each other source with
/// probability `keep_prob`.
pub fn random_drop<R: Rng + ?Sized>(rng: &mut R, keep_prob: f64) -> DropMask {
    let preserved = Source::ALL[rng.random_range(0..4)];
    let mut keep = [false; 4];
    for (k, s) in Source::ALL.iter().enumerate() {
        let draw = rng.random::<f64>();
        keep[k] = *s == preserved || draw < keep_prob;
    }
    DropMask { keep, preserved }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, l2_normalize, norm, GradCheckConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        l2_normalize(Tensor2D::uniform(1, d, 1.0, rng).data())
    }

    fn setup(strategy: FuseStrategy, d: usize, seed: u64) -> (Fuser, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Fuser::new(strategy, d, 3);
        let mut store = ParamStore::new();
        f.init(&mut store, &mut rng);
        for p in store.iter_mut() {
            if p.value.rows() == 1 {
                p.value = Tensor2D::uniform(1, p.value.cols(), 0.5, &mut rng);
            }
        }
        (f, store, rng)
    }

    #[test]
    fn output_is_unit_and_map_rows_sum_to_one() {
        let (f, store, mut rng) = setup(FuseStrategy::Attention, 5, 1);
        let enc = SourceEncodings::new(unit(&mut rng, 5), unit(&mut rng, 5), unit(&mut rng, 5), vec![0.0; 5]);
        let (v, map) = f.fuse(&store, &enc).unwrap();
        assert_eq!(v.len(), 5);
        assert!((norm(&v) - 1.0).abs() < 1e-12);
        let map = map.unwrap();
        assert_eq!(map.shape(), (4, 4));
        for r in map.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_inputs_give_closed_form() {
        let (f, store, _) = setup(FuseStrategy::Attention, 3, 2);
        let (v, _) = f.fuse(&store, &SourceEncodings::zeros(3)).unwrap();
        let c1 = &store.get("fuser.c1").unwrap().value;
        let relu: Vec<f64> = c1.data().iter().map(|x| x.max(0.0)).collect();
        let mut pre = Tensor2D::row_vector(relu).matmul(&store.get("fuser.l2").unwrap().value).unwrap();
        pre.add_assign(&store.get("fuser.c2").unwrap().value).unwrap();
        let expected = l2_normalize(pre.data());
        for (a, b) in v.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn d2_matches_unrolled_pipeline() {
        let (f, store, mut rng) = setup(FuseStrategy::Attention, 2, 3);
        let enc = SourceEncodings::new(unit(&mut rng, 2), unit(&mut rng, 2), unit(&mut rng, 2), unit(&mut rng, 2));
        let (v, _) = f.fuse(&store, &enc).unwrap();

        let g = |n: &str| store.get(n).unwrap().value.clone();
        let (wq, wk, wv) = (g("fuser.wq"), g("fuser.wk"), g("fuser.wv"));
        let x = &enc.parts;
        let proj = |w: &Tensor2D, r: &[f64]| -> Vec<f64> {
            (0..w.cols()).map(|j| r[0] * w.get(0, j) + r[1] * w.get(1, j)).collect()
        };
        let q: Vec<Vec<f64>> = x.iter().map(|r| proj(&wq, r)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| proj(&wk, r)).collect();
        let val: Vec<Vec<f64>> = x.iter().map(|r| proj(&wv, r)).collect();
        let mut flat = Vec::new();
        for qi in &q {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                flat.push((0..4).map(|j| e[j] / z * val[j][c]).sum::<f64>());
            }
        }
        let (l1, c1, l2, c2) = (g("fuser.l1"), g("fuser.c1"), g("fuser.l2"), g("fuser.c2"));
        let h: Vec<f64> = (0..8)
            .map(|j| ((0..8).map(|i| flat[i] * l1.get(i, j)).sum::<f64>() + c1.get(0, j)).max(0.0))
            .collect();
        let o: Vec<f64> = (0..2)
            .map(|j| (0..8).map(|i| h[i] * l2.get(i, j)).sum::<f64>() + c2.get(0, j))
            .collect();
        let n = (o[0] * o[0] + o[1] * o[1]).sqrt();
        assert!((v[0] - o[0] / n).abs() <= 1e-12 && (v[1] - o[1] / n).abs() <= 1e-12);
    }

    #[test]
    fn baseline_strategies() {
        let (f, store, _) = setup(FuseStrategy::GlobalMaxPool, 2, 4);
        let enc = SourceEncodings::new(vec![1.0, 0.0], vec![0.0, -1.0], vec![0.0, 0.0], vec![0.6, 0.8]);
        let (v, map) = f.fuse(&store, &enc).unwrap();
        assert!(map.is_none());
        let e = l2_normalize(&[1.0, 0.8]);
        assert!((v[0] - e[0]).abs() < 1e-12 && (v[1] - e[1]).abs() < 1e-12);

        let f = Fuser::new(FuseStrategy::ElementwiseAdd, 2, 3);
        let (v, _) = f.fuse(&store, &enc).unwrap();
        let e = l2_normalize(&[1.6, -0.2]);
        assert!((v[0] - e[0]).abs() < 1e-12 && (v[1] - e[1]).abs() < 1e-12);

        let (f, store, _) = setup(FuseStrategy::NeuralNet, 2, 5);
        let (v, _) = f.fuse(&store, &enc).unwrap();
        assert!(v.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn fuser_gradients() {
        for strategy in [FuseStrategy::Attention, FuseStrategy::NeuralNet] {
            for seed in 0..20 {
                let (f, mut store, mut rng) = setup(strategy, 3, 10 + seed);
                let enc: [Vec<f64>; 4] = std::array::from_fn(|k| {
                    if k == seed as usize % 4 {
                        vec![0.0; 3]
                    } else {
                        unit(&mut rng, 3)
                    }
                });
                let target = Tensor2D::uniform(1, 3, 1.0, &mut rng);
                let report = grad_check(&mut store, &GradCheckConfig::default(), |p, tape| {
                    let parts = std::array::from_fn(|k| tape.constant(Tensor2D::row_vector(enc[k].clone())));
                    let out = f.forward(tape, p, &parts)?;
                    let t = tape.constant(target.clone());
                    let s = tape.matmul_nt(out.vector, t)?;
                    Ok(tape.sum(s))
                })
                .unwrap();
                assert!(report.max_rel_error <= 1e-4, "{strategy:?} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn forced_keep_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            assert_eq!(random_drop(&mut rng, 1.0).keep, [true; 4]);
            let m = random_drop(&mut rng, 0.0);
            assert_eq!(m.keep.iter().filter(|k| **k).count(), 1);
            assert!(m.keeps(m.preserved));
        }
    }

    #[test]
    fn marginal_keep_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut kept = [0usize; 4];
        for _ in 0..n {
            let m = random_drop(&mut rng, KEEP_PROB);
            for (c, k) in kept.iter_mut().zip(m.keep) {
                *c += k as usize;
            }
        }
        for c in kept {
            let f = c as f64 / n as f64;
            assert!((f - 0.775).abs() <= 0.01, "{f}");
        }
    }

    #[test]
    fn apply_blanks_dropped_text() {
        let m = DropMask {
            keep: [true, false, true, false],
            preserved: Source::Caption,
        };
        let out = m.apply(["a".to_string(), "b".into(), "c".into(), "d".into()]);
        assert_eq!(out, ["a".to_string(), String::new(), "c".into(), String::new()]);
    }

    proptest! {
        #[test]
        fn never_drops_everything(seed in any::<u64>(), p in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                prop_assert!(random_drop(&mut rng, p).keep.iter().any(|k| *k));
            }
        }

        #[test]
        fn dropped_source_equals_zero_encoding(seed in 0u64..500, k in 0usize..4) {
            let (f, store, mut rng) = setup(FuseStrategy::Attention, 4, seed);
            let full: [Vec<f64>; 4] = std::array::from_fn(|_| unit(&mut rng, 4));
            let mut zeroed = full.clone();
            zeroed[k] = vec![0.0; 4];
            let mut keep = [true; 4];
            keep[k] = false;
            let masked = DropMask { keep, preserved: Source::ALL[(k + 1) % 4] }.apply(full);
            let a = f.fuse(&store, &SourceEncodings { parts: masked.map(|v| if v.is_empty() { vec![0.0; 4] } else { v }) }).unwrap().0;
            let b = f.fuse(&store, &SourceEncodings { parts: zeroed }).unwrap().0;
            prop_assert_eq!(a, b);
        }
    }
}

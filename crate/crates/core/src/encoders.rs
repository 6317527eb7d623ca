//! Text encoder (multi-head self-attention, point-wise CNN, max pooling
//! over words) and the linear image branch over precomputed features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor2D, Var};
use crate::textprep::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Word embedding width.
    pub w: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    /// Output encoding width.
    pub d: usize,
}

impl EncoderConfig {
    /// Small configuration suited to CPU training on synthetic corpora.
    pub fn desk() -> Self {
        EncoderConfig {
            w: 64,
            heads: 4,
            d_k: 16,
            d_v: 16,
            d_model: 64,
            d_hidden: 128,
            d: 64,
        }
    }

    /// The full-size configuration for `w`-dimensional word vectors.
    pub fn full_size(w: usize) -> Self {
        EncoderConfig {
            w,
            heads: 6,
            d_k: 64,
            d_v: 64,
            d_model: w,
            d_hidden: 2048,
            d: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.w {
            return Err(Error::Config(format!(
                "d_model ({}) must equal the embedding width w ({}) for the residual connection",
                self.d_model, self.w
            )));
        }
        if [self.w, self.heads, self.d_k, self.d_v, self.d_hidden, self.d].contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Per-head attention maps; `heads[k][(i, j)]` is the weight of input
/// token `j` in output position `i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMap {
    pub heads: Vec<Tensor2D>,
}

impl AttentionMap {
    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, |m| m.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `softmax((E Wq)(E Wk)ᵀ / sqrt(d_k)) (E Wv)`; returns the output and the map.
pub fn self_attention(tape: &mut Tape<'_>, e: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    if tape.value(e).rows() == 0 {
        return Err(Error::EmptySequence("self_attention"));
    }
    let d_k = tape.value(wq).cols();
    let q = tape.matmul(e, wq)?;
    let k = tape.matmul(e, wk)?;
    let v = tape.matmul(e, wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let map = tape.softmax_rows(scaled);
    let out = tape.matmul(map, v)?;
    Ok((out, map))
}

/// Concatenated heads projected by `wo`, plus the residual input.
pub fn multi_head(tape: &mut Tape<'_>, e: Var, heads: &[[Var; 3]], wo: Var) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(heads.len());
    let mut maps = Vec::with_capacity(heads.len());
    for [wq, wk, wv] in heads {
        let (o, m) = self_attention(tape, e, *wq, *wk, *wv)?;
        outs.push(o);
        maps.push(m);
    }
    let cat = tape.concat_cols(&outs)?;
    let proj = tape.matmul(cat, wo)?;
    let out = tape.add(proj, e)?;
    Ok((out, maps))
}

/// `ReLU(A W1 + b1) W2 + b2`, applied to every row independently.
pub fn pointwise_cnn(tape: &mut Tape<'_>, a: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul(a, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderNames {
    heads: Vec<[String; 3]>,
    wo: String,
    w1: String,
    b1: String,
    w2: String,
    b2: String,
}

/// A text encoder whose weights live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    prefix: String,
    names: EncoderNames,
}

/// Output of [`TextEncoder::forward`].
pub struct TextEncoding {
    /// `1×d`, unit norm, or exactly zero for empty input.
    pub vector: Var,
    pub maps: Vec<Var>,
}

impl TextEncoder {
    pub fn new(prefix: &str, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let names = EncoderNames {
            heads: (0..cfg.heads)
                .map(|h| {
                    [
                        format!("{prefix}.head{h}.wq"),
                        format!("{prefix}.head{h}.wk"),
                        format!("{prefix}.head{h}.wv"),
                    ]
                })
                .collect(),
            wo: format!("{prefix}.wo"),
            w1: format!("{prefix}.w1"),
            b1: format!("{prefix}.b1"),
            w2: format!("{prefix}.w2"),
            b2: format!("{prefix}.b2"),
        };
        Ok(TextEncoder {
            cfg,
            prefix: prefix.to_string(),
            names,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Glorot weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        for [q, k, v] in &self.names.heads {
            store.init_glorot(q, c.w, c.d_k, rng);
            store.init_glorot(k, c.w, c.d_k, rng);
            store.init_glorot(v, c.w, c.d_v, rng);
        }
        store.init_glorot(&self.names.wo, c.heads * c.d_v, c.d_model, rng);
        store.init_glorot(&self.names.w1, c.d_model, c.d_hidden, rng);
        store.init_zeros(&self.names.b1, 1, c.d_hidden);
        store.init_glorot(&self.names.w2, c.d_hidden, c.d, rng);
        store.init_zeros(&self.names.b2, 1, c.d);
    }

    /// Checks that `store` holds every weight with the configured shape.
    pub fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        let c = &self.cfg;
        let mut expected = Vec::new();
        for [q, k, v] in &self.names.heads {
            expected.push((q, (c.w, c.d_k)));
            expected.push((k, (c.w, c.d_k)));
            expected.push((v, (c.w, c.d_v)));
        }
        expected.push((&self.names.wo, (c.heads * c.d_v, c.d_model)));
        expected.push((&self.names.w1, (c.d_model, c.d_hidden)));
        expected.push((&self.names.b1, (1, c.d_hidden)));
        expected.push((&self.names.w2, (c.d_hidden, c.d)));
        expected.push((&self.names.b2, (1, c.d)));
        for (name, shape) in expected {
            let got = store.get(name)?.value.shape();
            if got != shape {
                return Err(Error::load(name.as_str(), format!("shape {got:?}, expected {shape:?}")));
            }
        }
        Ok(())
    }

    /// Embedding lookup, multi-head attention with residual, point-wise
    /// CNN, max pooling over words, and L2 normalization.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        table: &'a EmbeddingTable,
        tokens: &[String],
    ) -> Result<TextEncoding> {
        if table.dim() != self.cfg.w {
            return Err(Error::shape(
                "encode_text",
                format!("table width {} for encoder width {}", table.dim(), self.cfg.w),
            ));
        }
        if tokens.is_empty() {
            let zero = tape.constant(Tensor2D::zeros(1, self.cfg.d));
            return Ok(TextEncoding {
                vector: zero,
                maps: Vec::new(),
            });
        }
        let e = table.gather(tape, tokens)?;
        let mut heads = Vec::with_capacity(self.names.heads.len());
        for [q, k, v] in &self.names.heads {
            heads.push([
                tape.param_from(store, q)?,
                tape.param_from(store, k)?,
                tape.param_from(store, v)?,
            ]);
        }
        let wo = tape.param_from(store, &self.names.wo)?;
        let (a, maps) = multi_head(tape, e, &heads, wo)?;
        let w1 = tape.param_from(store, &self.names.w1)?;
        let b1 = tape.param_from(store, &self.names.b1)?;
        let w2 = tape.param_from(store, &self.names.w2)?;
        let b2 = tape.param_from(store, &self.names.b2)?;
        let c = pointwise_cnn(tape, a, w1, b1, w2, b2)?;
        let pooled = tape.max_pool_rows(c)?;
        let vector = tape.normalize_rows(pooled);
        Ok(TextEncoding { vector, maps })
    }

    /// Forward pass without keeping the tape; returns the encoding and maps.
    pub fn encode(
        &self,
        store: &ParamStore,
        table: &EmbeddingTable,
        tokens: &[String],
    ) -> Result<(Vec<f64>, AttentionMap)> {
        let mut tape = Tape::new();
        let enc = self.forward(&mut tape, store, table, tokens)?;
        let maps = AttentionMap {
            heads: enc.maps.iter().map(|&m| tape.value(m).clone()).collect(),
        };
        Ok((tape.value(enc.vector).data().to_vec(), maps))
    }
}

/// A precomputed image feature and its metadata entities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature {
    pub image_id: String,
    pub feature: Vec<f64>,
    pub metadata_entities: Vec<String>,
}

/// The trainable `d' × d` map applied to frozen image features.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageProjection {
    name: String,
    feature_dim: usize,
    d: usize,
}

impl ImageProjection {
    pub const NAME: &'static str = "image.proj";

    pub fn new(feature_dim: usize, d: usize) -> Self {
        ImageProjection {
            name: Self::NAME.to_string(),
            feature_dim,
            d,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_glorot(&self.name, self.feature_dim, self.d, rng);
    }

    /// Projects and normalizes a batch of features (`N×d'` to `N×d`).
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, features: Var) -> Result<Var> {
        let fd = tape.value(features).cols();
        if fd != self.feature_dim {
            return Err(Error::shape(
                "encode_image",
                format!("feature dim {fd}, projection expects {}", self.feature_dim),
            ));
        }
        let p = tape.param_from(store, &self.name)?;
        let projected = tape.matmul(features, p)?;
        Ok(tape.normalize_rows(projected))
    }

    pub fn encode(&self, store: &ParamStore, feature: &[f64]) -> Result<Vec<f64>> {
        encode_image(&store.get(&self.name)?.value, feature)
    }
}

/// `normalize(feature · proj)`.
pub fn encode_image(proj: &Tensor2D, feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != proj.rows() {
        return Err(Error::shape(
            "encode_image",
            format!("feature dim {}, projection expects {}", feature.len(), proj.rows()),
        ));
    }
    let f = Tensor2D::row_vector(feature.to_vec());
    let out = f.matmul(proj)?;
    Ok(crate::numerics::l2_normalize(out.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, grad_check, norm, GradCheckConfig, ParamSet};
    use crate::textprep::TableConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2D {
        Tensor2D::uniform(r, c, 1.0, rng)
    }

    fn close(a: &Tensor2D, b: &Tensor2D, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn single_token_attention_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let e = tape.constant(rand_t(&mut rng, 1, 4));
        let wq = tape.constant(rand_t(&mut rng, 4, 3));
        let wk = tape.constant(rand_t(&mut rng, 4, 3));
        let wv_t = rand_t(&mut rng, 4, 2);
        let wv = tape.constant(wv_t.clone());
        let (out, map) = self_attention(&mut tape, e, wq, wk, wv).unwrap();
        assert_eq!(tape.value(map).data(), &[1.0]);
        close(tape.value(out), &tape.value(e).matmul(&wv_t).unwrap(), 1e-15);
    }

    #[test]
    fn zero_query_weights_give_uniform_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let e = tape.constant(rand_t(&mut rng, 5, 4));
        let wq = tape.constant(Tensor2D::zeros(4, 3));
        let wk = tape.constant(rand_t(&mut rng, 4, 3));
        let wv = tape.constant(rand_t(&mut rng, 4, 2));
        let (_, map) = self_attention(&mut tape, e, wq, wk, wv).unwrap();
        assert!(tape.value(map).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn attention_matches_stepwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (e, wq, wk, wv) = (
            rand_t(&mut rng, 3, 4),
            rand_t(&mut rng, 4, 2),
            rand_t(&mut rng, 4, 2),
            rand_t(&mut rng, 4, 3),
        );
        // explicit Q, K, V and a hand-rolled softmax
        let mul = |a: &Tensor2D, b: &Tensor2D| {
            let mut c = Tensor2D::zeros(a.rows(), b.cols());
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    let mut s = 0.0;
                    for k in 0..a.cols() {
                        s += a.get(i, k) * b.get(k, j);
                    }
                    c.set(i, j, s);
                }
            }
            c
        };
        let (q, k, v) = (mul(&e, &wq), mul(&e, &wk), mul(&e, &wv));
        let mut m = Tensor2D::zeros(3, 3);
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / 2f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            for j in 0..3 {
                m.set(i, j, logits[j].exp() / z);
            }
        }
        let expected = mul(&m, &v);

        let mut tape = Tape::new();
        let vars: Vec<Var> = [e, wq, wk, wv].into_iter().map(|t| tape.constant(t)).collect();
        let (out, map) = self_attention(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
        close(tape.value(map), &m, 1e-12);
        close(tape.value(out), &expected, 1e-12);
    }

    #[test]
    fn multi_head_residual_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e_t = rand_t(&mut rng, 4, 6);
        let mut tape = Tape::new();
        let e = tape.constant(e_t.clone());
        let heads: Vec<[Var; 3]> = (0..2)
            .map(|_| {
                [
                    tape.constant(rand_t(&mut rng, 6, 3)),
                    tape.constant(rand_t(&mut rng, 6, 3)),
                    tape.constant(rand_t(&mut rng, 6, 3)),
                ]
            })
            .collect();
        let zero_wo = tape.constant(Tensor2D::zeros(6, 6));
        let (out, maps) = multi_head(&mut tape, e, &heads, zero_wo).unwrap();
        assert_eq!(tape.value(out), &e_t);
        assert_eq!(maps.len(), 2);

        let wo = tape.constant(rand_t(&mut rng, 6, 6));
        let (out, _) = multi_head(&mut tape, e, &heads, wo).unwrap();
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| e_t.row(i).to_vec()).collect();
        let ep = tape.constant(Tensor2D::from_rows(&rows).unwrap());
        let (outp, _) = multi_head(&mut tape, ep, &heads, wo).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in tape.value(outp).row(r).iter().zip(tape.value(out).row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_reduces_to_attention_times_wo_plus_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let e = tape.constant(rand_t(&mut rng, 3, 4));
        let h = [
            tape.constant(rand_t(&mut rng, 4, 2)),
            tape.constant(rand_t(&mut rng, 4, 2)),
            tape.constant(rand_t(&mut rng, 4, 2)),
        ];
        let wo_t = rand_t(&mut rng, 2, 4);
        let wo = tape.constant(wo_t.clone());
        let (out, _) = multi_head(&mut tape, e, &[h], wo).unwrap();
        let (att, _) = self_attention(&mut tape, e, h[0], h[1], h[2]).unwrap();
        let mut expected = tape.value(att).matmul(&wo_t).unwrap();
        expected.add_assign(tape.value(e)).unwrap();
        close(tape.value(out), &expected, 1e-15);
    }

    #[test]
    fn pointwise_cnn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let a = tape.constant(rand_t(&mut rng, 3, 4));
        let c = Tensor2D::row_vector(vec![0.5, -2.0]);
        let w1 = tape.constant(Tensor2D::zeros(4, 5));
        let b1 = tape.constant(Tensor2D::zeros(1, 5));
        let w2 = tape.constant(Tensor2D::zeros(5, 2));
        let b2 = tape.constant(c.clone());
        let out = pointwise_cnn(&mut tape, a, w1, b1, w2, b2).unwrap();
        for r in tape.value(out).iter_rows() {
            assert_eq!(r, c.data());
        }

        // negative pre-activations are cut
        let a = tape.constant(Tensor2D::from_rows(&[[1.0]]).unwrap());
        let w1 = tape.constant(Tensor2D::from_rows(&[[-1.0, 2.0]]).unwrap());
        let b1 = tape.constant(Tensor2D::zeros(1, 2));
        let w2 = tape.constant(Tensor2D::from_rows(&[[1.0], [1.0]]).unwrap());
        let b2 = tape.constant(Tensor2D::zeros(1, 1));
        let out = pointwise_cnn(&mut tape, a, w1, b1, w2, b2).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0]);
    }

    #[test]
    fn pointwise_cnn_matches_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, w1, b1, w2, b2) = (
            rand_t(&mut rng, 4, 3),
            rand_t(&mut rng, 3, 5),
            rand_t(&mut rng, 1, 5),
            rand_t(&mut rng, 5, 2),
            rand_t(&mut rng, 1, 2),
        );
        let mut tape = Tape::new();
        let v: Vec<Var> = [&a, &w1, &b1, &w2, &b2]
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let out = pointwise_cnn(&mut tape, v[0], v[1], v[2], v[3], v[4]).unwrap();
        for r in 0..4 {
            let hidden: Vec<f64> = (0..5)
                .map(|j| ((0..3).map(|k| a.get(r, k) * w1.get(k, j)).sum::<f64>() + b1.get(0, j)).max(0.0))
                .collect();
            for j in 0..2 {
                let o = (0..5).map(|k| hidden[k] * w2.get(k, j)).sum::<f64>() + b2.get(0, j);
                assert!((tape.value(out).get(r, j) - o).abs() <= 1e-12);
            }
        }
    }

    fn encoder_fixture() -> (TextEncoder, ParamStore, EmbeddingTable) {
        let cfg = EncoderConfig {
            w: 8,
            heads: 2,
            d_k: 4,
            d_v: 4,
            d_model: 8,
            d_hidden: 16,
            d: 6,
        };
        let enc = TextEncoder::new("text", cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        enc.init(&mut store, &mut rng);
        let table = EmbeddingTable::new(
            "de",
            8,
            &TableConfig {
                buckets: 128,
                subwords: true,
                seed: 3,
            },
        )
        .unwrap();
        (enc, store, table)
    }

    #[test]
    fn encode_text_norm_permutation_and_empty() {
        let (enc, store, table) = encoder_fixture();
        let toks: Vec<String> = ["bundesrat", "bern", "wahl", "zeitung"].iter().map(|s| s.to_string()).collect();
        let (v, maps) = enc.encode(&store, &table, &toks).unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-9);
        assert_eq!(maps.heads.len(), 2);
        for m in &maps.heads {
            for r in m.iter_rows() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let mut rev = toks.clone();
        rev.reverse();
        let (vr, _) = enc.encode(&store, &table, &rev).unwrap();
        for (a, b) in v.iter().zip(&vr) {
            assert!((a - b).abs() < 1e-9);
        }
        let (z, m) = enc.encode(&store, &table, &[]).unwrap();
        assert_eq!(z, vec![0.0; 6]);
        assert!(m.is_empty());
    }

    #[test]
    fn d_model_must_equal_w() {
        let mut cfg = EncoderConfig::desk();
        cfg.d_model = 32;
        assert!(matches!(TextEncoder::new("t", cfg), Err(Error::Config(_))));
    }

    #[test]
    fn image_encoding() {
        let f = vec![3.0, 4.0];
        assert_eq!(encode_image(&Tensor2D::identity(2), &f).unwrap(), vec![0.6, 0.8]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let proj = rand_t(&mut rng, 5, 3);
        let feat: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.4).collect();
        let out = encode_image(&proj, &feat).unwrap();
        assert!((norm(&out) - 1.0).abs() < 1e-12);
        let raw: Vec<f64> = (0..3).map(|j| (0..5).map(|i| feat[i] * proj.get(i, j)).sum()).collect();
        let n = dot(&raw, &raw).sqrt();
        for (a, b) in out.iter().zip(&raw) {
            assert!((a - b / n).abs() <= 1e-12);
        }
        assert!(matches!(encode_image(&proj, &[1.0]), Err(Error::Shape { .. })));
    }

    struct EncoderParams {
        store: ParamStore,
        table: EmbeddingTable,
    }

    impl ParamSet for EncoderParams {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor2D, bool)) {
            self.store.visit_params(f);
            self.table.visit_params(f);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2D, bool)) {
            self.store.visit_params_mut(f);
            self.table.visit_params_mut(f);
        }
        fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
            if name.starts_with("emb.") {
                self.table.param_mut(name)
            } else {
                self.store.param_mut(name)
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let words = ["wahl", "bern", "zug", "rat", "see"];
        for seed in 0..20u64 {
            let (enc, _, mut table) = encoder_fixture();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            enc.init(&mut store, &mut rng);
            // nonzero biases so the ReLU and pooling paths are generic
            for b in ["text.b1", "text.b2"] {
                let p = store.get_mut(b).unwrap();
                let (r, c) = p.value.shape();
                p.value = Tensor2D::uniform(r, c, 0.3, &mut rng);
            }
            table.extend_vocab(words[..2].iter().copied()).unwrap();
            let target = Tensor2D::uniform(1, 6, 1.0, &mut rng);
            let len = 2 + (seed as usize % 3);
            let toks: Vec<String> = (0..len).map(|i| words[(i + seed as usize) % 5].to_string()).collect();
            let mut params = EncoderParams { store, table };
            let enc2 = enc.clone();
            let report = grad_check(
                &mut params,
                &GradCheckConfig {
                    max_elements_per_param: 200,
                    ..Default::default()
                },
                move |p: &EncoderParams, tape| {
                    let out = enc2.forward(tape, &p.store, &p.table, &toks)?;
                    let t = tape.constant(target.clone());
                    let s = tape.matmul_nt(out.vector, t)?;
                    Ok(tape.sum(s))
                },
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
        }
    }
}

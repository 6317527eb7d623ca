//! The full retrieval model: per-language embedding tables, one text
//! encoder per enabled source, an optional fuser and the image projection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoders::{AttentionMap, EncoderConfig, ImageProjection, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{FuseStrategy, Fuser};
use crate::numerics::{l2_normalize, ParamSet, ParamStore, Tape, Tensor2D, Var};
use crate::objectives::{loss_on_tape, LossConfig};
use crate::textprep::{tokenize_with, EmbeddingTable, Source, Truncation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Image feature width `d'`.
    pub feature_dim: usize,
    /// Sources with an encoder. A single entry makes a single-source model.
    pub sources: Vec<Source>,
    /// How several sources are combined; ignored for a single source.
    #[serde(default)]
    pub fusion: FuseStrategy,
    #[serde(default)]
    pub truncation: Truncation,
}

impl ModelConfig {
    pub fn single(source: Source, encoder: EncoderConfig, feature_dim: usize) -> Self {
        ModelConfig {
            encoder,
            feature_dim,
            sources: vec![source],
            fusion: FuseStrategy::Attention,
            truncation: Truncation::default(),
        }
    }

    pub fn fused(fusion: FuseStrategy, encoder: EncoderConfig, feature_dim: usize) -> Self {
        ModelConfig {
            encoder,
            feature_dim,
            sources: Source::ALL.to_vec(),
            fusion,
            truncation: Truncation::default(),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.sources.len() > 1
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        match self.sources.len() {
            1 => Ok(()),
            4 if Source::ALL.iter().all(|s| self.sources.contains(s)) => Ok(()),
            _ => Err(Error::Config(
                "a model uses either one source or all four sources".into(),
            )),
        }
    }
}

/// Named groups of parameters that can be frozen together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Encoders,
    Fuser,
    Image,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Embeddings,
        ParamGroup::Encoders,
        ParamGroup::Fuser,
        ParamGroup::Image,
    ];
}

/// Tokens of one article, per source in `Source::ALL` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prepared {
    pub lang: String,
    pub tokens: [Vec<String>; 4],
    /// Row of the paired image in the corpus feature matrix.
    pub image_row: usize,
}

/// Result of encoding one article for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct TextQuery {
    pub vector: Vec<f64>,
    /// Attention maps per source (empty for sources without an encoder or
    /// without tokens).
    pub maps: [AttentionMap; 4],
    pub tokens: [Vec<String>; 4],
    /// Component-level map of the attention fuser.
    pub component: Option<Tensor2D>,
}

/// Encodings produced on a tape for a batch of articles.
pub struct TextForward {
    pub vector: Var,
    pub maps: [Vec<Var>; 4],
    pub component: Option<Var>,
}

pub(crate) const ENCODER_PREFIX: &str = "enc";

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    tables: BTreeMap<String, EmbeddingTable>,
    encoders: Vec<(Source, TextEncoder)>,
    fuser: Option<Fuser>,
    image: ImageProjection,
}

impl Model {
    /// A freshly initialized model over `tables`.
    pub fn new(config: ModelConfig, tables: Vec<EmbeddingTable>, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config, tables)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, e) in &model.encoders {
            e.init(&mut model.params, &mut rng);
        }
        if let Some(f) = &model.fuser {
            f.init(&mut model.params, &mut rng);
        }
        model.image.init(&mut model.params, &mut rng);
        Ok(model)
    }

    /// Structure without parameters, to be filled by a checkpoint.
    pub(crate) fn skeleton(config: ModelConfig, tables: Vec<EmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let mut map = BTreeMap::new();
        for t in tables {
            if t.dim() != config.encoder.w {
                return Err(Error::shape(
                    "model",
                    format!("table {} has width {}, encoder expects {}", t.language(), t.dim(), config.encoder.w),
                ));
            }
            if map.insert(t.language().to_string(), t).is_some() {
                return Err(Error::Config("two tables for one language".into()));
            }
        }
        let encoders = config
            .sources
            .iter()
            .map(|&s| Ok((s, TextEncoder::new(&format!("{ENCODER_PREFIX}.{s}"), config.encoder)?)))
            .collect::<Result<Vec<_>>>()?;
        let fuser = config
            .is_fused()
            .then(|| Fuser::new(config.fusion, config.encoder.d, config.encoder.d_k));
        let image = ImageProjection::new(config.feature_dim, config.encoder.d);
        Ok(Model {
            config,
            params: ParamStore::new(),
            tables: map,
            encoders,
            fuser,
            image,
        })
    }

    /// Verifies that every parameter is present with its configured shape.
    pub fn check_shapes(&self) -> Result<()> {
        for (_, e) in &self.encoders {
            e.check_shapes(&self.params)?;
        }
        if let Some(f) = &self.fuser {
            f.check_shapes(&self.params)?;
        }
        let shape = self.params.get(self.image.name())?.value.shape();
        if shape != (self.config.feature_dim, self.config.encoder.d) {
            return Err(Error::load(
                self.image.name(),
                format!("shape {shape:?}, expected {:?}", (self.config.feature_dim, self.config.encoder.d)),
            ));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.d
    }

    pub fn languages(&self) -> Vec<String> {
        self.tables.keys().cloned().collect()
    }

    pub fn tables(&self) -> impl Iterator<Item = &EmbeddingTable> {
        self.tables.values()
    }

    pub fn table(&self, lang: &str) -> Result<&EmbeddingTable> {
        self.tables.get(lang).ok_or_else(|| Error::Unknown {
            kind: "language",
            name: lang.to_string(),
        })
    }

    pub fn table_mut(&mut self, lang: &str) -> Result<&mut EmbeddingTable> {
        self.tables.get_mut(lang).ok_or_else(|| Error::Unknown {
            kind: "language",
            name: lang.to_string(),
        })
    }

    /// Adds or replaces the table for its language.
    pub fn set_table(&mut self, table: EmbeddingTable) -> Result<()> {
        if table.dim() != self.config.encoder.w {
            return Err(Error::load(
                format!("emb.{}", table.language()),
                format!("width {} for encoder width {}", table.dim(), self.config.encoder.w),
            ));
        }
        self.tables.insert(table.language().to_string(), table);
        Ok(())
    }

    pub fn remove_table(&mut self, lang: &str) -> Option<EmbeddingTable> {
        self.tables.remove(lang)
    }

    pub fn encoder(&self, source: Source) -> Option<&TextEncoder> {
        self.encoders.iter().find(|(s, _)| *s == source).map(|(_, e)| e)
    }

    pub fn fuser(&self) -> Option<&Fuser> {
        self.fuser.as_ref()
    }

    pub fn image_projection(&self) -> &ImageProjection {
        &self.image
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        match group {
            ParamGroup::Embeddings => self.tables.values_mut().for_each(|t| t.frozen = frozen),
            ParamGroup::Encoders => {
                self.params.set_frozen_prefix(&format!("{ENCODER_PREFIX}."), frozen);
            }
            ParamGroup::Fuser => {
                self.params.set_frozen_prefix(&format!("{}.", Fuser::PREFIX), frozen);
            }
            ParamGroup::Image => {
                self.params.set_frozen_prefix(ImageProjection::NAME, frozen);
            }
        }
    }

    /// Groups whose every parameter is frozen.
    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        let prefix = |g: ParamGroup| match g {
            ParamGroup::Encoders => format!("{ENCODER_PREFIX}."),
            ParamGroup::Fuser => format!("{}.", Fuser::PREFIX),
            _ => ImageProjection::NAME.to_string(),
        };
        ParamGroup::ALL
            .into_iter()
            .filter(|&g| match g {
                ParamGroup::Embeddings => !self.tables.is_empty() && self.tables.values().all(|t| t.frozen),
                _ => {
                    let p = prefix(g);
                    let mut members = self.params.iter().filter(|q| q.name.starts_with(&p)).peekable();
                    members.peek().is_some() && members.all(|q| q.frozen)
                }
            })
            .collect()
    }

    /// Tokenizes the four sources of every record.
    pub fn prepare(&self, corpus: &Corpus) -> Vec<Prepared> {
        let rows: std::collections::HashMap<&str, usize> = corpus
            .features
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        corpus
            .records
            .iter()
            .map(|r| Prepared {
                lang: r.lang.clone(),
                tokens: Source::ALL.map(|s| self.tokenize(r.text(s), s, &r.lang)),
                image_row: rows[r.image_id.as_str()],
            })
            .collect()
    }

    pub fn tokenize(&self, text: &str, source: Source, lang: &str) -> Vec<String> {
        tokenize_with(text, source, lang, &self.config.truncation).tokens
    }

    /// Records the text branch for one article.
    pub fn text_forward<'a>(&'a self, tape: &mut Tape<'a>, lang: &str, tokens: &[Vec<String>; 4]) -> Result<TextForward> {
        let table = self.table(lang)?;
        let mut maps: [Vec<Var>; 4] = Default::default();
        if let Some(fuser) = &self.fuser {
            let mut parts = Vec::with_capacity(4);
            for (s, enc) in &self.encoders {
                let out = enc.forward(tape, &self.params, table, &tokens[s.index()])?;
                maps[s.index()] = out.maps;
                parts.push((s.index(), out.vector));
            }
            parts.sort_by_key(|(i, _)| *i);
            let parts: [Var; 4] = std::array::from_fn(|k| parts[k].1);
            let fused = fuser.forward(tape, &self.params, &parts)?;
            return Ok(TextForward {
                vector: fused.vector,
                maps,
                component: fused.map,
            });
        }
        let (source, enc) = &self.encoders[0];
        let out = enc.forward(tape, &self.params, table, &tokens[source.index()])?;
        maps[source.index()] = out.maps;
        Ok(TextForward {
            vector: out.vector,
            maps,
            component: None,
        })
    }

    /// Records the loss of a batch of aligned (text, image feature) pairs.
    pub fn batch_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        texts: &[(&str, &[Vec<String>; 4])],
        features: Tensor2D,
        loss: &LossConfig,
    ) -> Result<Var> {
        if texts.len() != features.rows() {
            return Err(Error::shape(
                "batch_loss",
                format!("{} texts vs {} image features", texts.len(), features.rows()),
            ));
        }
        let mut rows = Vec::with_capacity(texts.len());
        for (lang, toks) in texts {
            rows.push(self.text_forward(tape, lang, toks)?.vector);
        }
        let t = tape.stack_rows(&rows)?;
        let f = tape.constant(features);
        let i = self.image.forward(tape, &self.params, f)?;
        let s = tape.matmul_nt(t, i)?;
        loss_on_tape(tape, s, loss)
    }

    /// Encodes pre-tokenized sources.
    pub fn encode_tokens(&self, lang: &str, tokens: [Vec<String>; 4]) -> Result<TextQuery> {
        let mut tape = Tape::new();
        let out = self.text_forward(&mut tape, lang, &tokens)?;
        let maps = out.maps.each_ref().map(|ms| AttentionMap {
            heads: ms.iter().map(|&m| tape.value(m).clone()).collect(),
        });
        Ok(TextQuery {
            vector: tape.value(out.vector).data().to_vec(),
            maps,
            component: out.component.map(|c| tape.value(c).clone()),
            tokens,
        })
    }

    /// Tokenizes and encodes article texts given in `Source::ALL` order.
    pub fn encode_text(&self, lang: &str, texts: [&str; 4]) -> Result<TextQuery> {
        self.table(lang)?;
        let tokens = std::array::from_fn(|k| self.tokenize(texts[k], Source::ALL[k], lang));
        self.encode_tokens(lang, tokens)
    }

    pub fn encode_image(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.image.encode(&self.params, feature)
    }

    /// Encodes every row of `features`.
    pub fn encode_images(&self, features: &Tensor2D) -> Result<Tensor2D> {
        let proj = &self.params.get(self.image.name())?.value;
        if features.cols() != proj.rows() {
            return Err(Error::shape(
                "encode_image",
                format!("feature dim {}, projection expects {}", features.cols(), proj.rows()),
            ));
        }
        let raw = features.matmul(proj)?;
        let mut out = Tensor2D::zeros(0, proj.cols());
        for r in raw.iter_rows() {
            out.push_row(&l2_normalize(r))?;
        }
        Ok(out)
    }
}

impl ParamSet for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor2D, bool)) {
        self.params.visit_params(f);
        for t in self.tables.values() {
            t.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2D, bool)) {
        self.params.visit_params_mut(f);
        for t in self.tables.values_mut() {
            t.visit_params_mut(f);
        }
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        if let Some(rest) = name.strip_prefix("emb.") {
            let lang = rest.rsplit_once('.')?.0;
            return self.tables.get_mut(lang)?.param_mut(name);
        }
        self.params.param_mut(name)
    }
}

//! Immutable model snapshots and the query logic served over them.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use nir_core::corpus::{load_corpus, Corpus, DanglingPolicy};
use nir_core::model::Model;
use nir_core::retrieval::{attention_scores, build_index, search, suggest_entities, EncodingIndex, Modality};
use nir_core::textprep::Source;
use nir_core::training::{load_checkpoint, Checkpoint};
use serde::{Deserialize, Serialize};

pub const DEFAULT_K: usize = 9;
pub const MAX_K: usize = 100;

/// A failure that maps to an HTTP status and a stable error code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(400, code, message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status, self.message)
    }
}

impl std::error::Error for ApiError {}

/// A model together with the encoded image store it searches.
#[derive(Debug)]
pub struct ModelSnapshot {
    pub id: String,
    pub model: Model,
    pub index: EncodingIndex,
    pub image_urls: HashMap<String, String>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub languages: Vec<String>,
    pub sources: Vec<Source>,
    pub fusion: Option<nir_core::fusion::FuseStrategy>,
    pub d: usize,
    pub index_size: usize,
}

impl ModelSnapshot {
    /// Encodes every image of `corpus`'s feature store with `model`.
    pub fn build(id: &str, model: Model, corpus: &Corpus) -> nir_core::Result<Self> {
        let features = &corpus.features;
        let encodings = model.encode_images(features.matrix())?;
        let entities = corpus.image_entities();
        let metadata = features
            .ids()
            .iter()
            .map(|i| entities.get(i).cloned().unwrap_or_default())
            .collect();
        let index = build_index(encodings, features.ids().to_vec(), metadata, Modality::Image)?;
        Ok(ModelSnapshot {
            id: id.to_string(),
            model,
            index,
            image_urls: corpus.image_urls(),
            checkpoint: None,
        })
    }

    /// Loads a checkpoint and a corpus from disk and builds the snapshot.
    pub fn load(id: &str, checkpoint: &Path, corpus: &Path, features: &Path) -> nir_core::Result<Self> {
        let Checkpoint { model, .. } = load_checkpoint(checkpoint)?;
        let corpus = load_corpus(corpus, features, DanglingPolicy::Warn)?;
        let mut snap = Self::build(id, model, &corpus)?;
        snap.checkpoint = Some(checkpoint.to_path_buf());
        Ok(snap)
    }

    pub fn info(&self) -> ModelInfo {
        let cfg = self.model.config();
        ModelInfo {
            id: self.id.clone(),
            languages: self.model.languages(),
            sources: cfg.sources.clone(),
            fusion: cfg.is_fused().then_some(cfg.fusion),
            d: self.model.dim(),
            index_size: self.index.len(),
        }
    }

    fn language(&self, lang: &str) -> Result<String, ApiError> {
        let langs = self.model.languages();
        if lang.is_empty() {
            return match langs.as_slice() {
                [only] => Ok(only.clone()),
                _ => Err(ApiError::bad_request(
                    "missing_language",
                    format!("model {} serves {:?}; set \"lang\"", self.id, langs),
                )),
            };
        }
        if langs.iter().any(|l| l == lang) {
            Ok(lang.to_string())
        } else {
            Err(ApiError::bad_request(
                "unknown_language",
                format!("model {} has no table for {lang:?}", self.id),
            ))
        }
    }

    pub fn search(&self, req: &SearchRequest) -> Result<SearchResponse, ApiError> {
        let k = req.k.unwrap_or(DEFAULT_K);
        if !(1..=MAX_K).contains(&k) {
            return Err(ApiError::bad_request("invalid_k", format!("k must be in 1..={MAX_K}, got {k}")));
        }
        let lang = self.language(&req.lang)?;
        let mut tokens: [Vec<String>; 4] = Source::ALL.map(|s| self.model.tokenize(req.text(s), s, &lang));
        if tokens.iter().all(Vec::is_empty) {
            return Err(ApiError::bad_request("empty_query", "every text source is empty"));
        }
        let sources = &self.model.config().sources;
        if let [only] = sources.as_slice() {
            // A single-source model reads its own source, or else the first
            // provided source in the order caption, body, headline, lead.
            let own = only.index();
            if tokens[own].is_empty() {
                let k = Source::ALL.iter().position(|s| !tokens[s.index()].is_empty()).expect("non-empty");
                tokens[own] = std::mem::take(&mut tokens[k]);
            }
        }
        let query = self
            .model
            .encode_tokens(&lang, tokens)
            .map_err(|e| ApiError::new(500, "internal", e.to_string()))?;
        let ranked = match search(&self.index, &query.vector, k, &req.entities) {
            Ok(r) => r,
            Err(nir_core::Error::EmptyQuery) => {
                return Err(ApiError::bad_request("empty_query", "the query encodes to the zero vector"))
            }
            Err(e) => return Err(ApiError::new(500, "internal", e.to_string())),
        };
        let mut attention = BTreeMap::new();
        for s in Source::ALL {
            let toks = &query.tokens[s.index()];
            let maps = &query.maps[s.index()];
            if toks.is_empty() || maps.is_empty() {
                continue;
            }
            let scores = attention_scores(maps);
            attention.insert(
                s,
                toks.iter()
                    .zip(scores)
                    .map(|(t, score)| TokenScore { token: t.clone(), score })
                    .collect(),
            );
        }
        Ok(SearchResponse {
            results: ranked
                .hits
                .into_iter()
                .map(|h| SearchHit {
                    image_url: self.image_urls.get(&h.id).cloned(),
                    image_id: h.id,
                    score: h.score,
                    entities: h.entities,
                })
                .collect(),
            attention,
            snapshot: self.id.clone(),
            candidates: ranked.candidates,
        })
    }

    pub fn entities(&self, req: &EntitiesRequest) -> Result<EntitiesResponse, ApiError> {
        self.language(&req.lang)?;
        let texts = Source::ALL.map(|s| req.text(s));
        let vocab = self.index.entity_vocabulary();
        Ok(EntitiesResponse {
            entities: suggest_entities(&texts, vocab.iter().map(String::as_str)),
            snapshot: self.id.clone(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchRequest {
    pub headline: String,
    pub lead: String,
    pub caption: String,
    pub body: String,
    pub lang: String,
    pub k: Option<usize>,
    pub model: Option<String>,
    pub entities: Vec<String>,
}

impl SearchRequest {
    pub fn text(&self, s: Source) -> &str {
        match s {
            Source::Caption => &self.caption,
            Source::Body => &self.body,
            Source::Headline => &self.headline,
            Source::Lead => &self.lead,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub image_id: String,
    pub score: f64,
    pub entities: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchHit>,
    pub attention: BTreeMap<Source, Vec<TokenScore>>,
    pub snapshot: String,
    /// Images that passed the entity filter.
    pub candidates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntitiesRequest {
    pub headline: String,
    pub lead: String,
    pub caption: String,
    pub body: String,
    pub lang: String,
    pub model: Option<String>,
}

impl EntitiesRequest {
    pub fn text(&self, s: Source) -> &str {
        match s {
            Source::Caption => &self.caption,
            Source::Body => &self.body,
            Source::Headline => &self.headline,
            Source::Lead => &self.lead,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntitiesResponse {
    pub entities: Vec<String>,
    pub snapshot: String,
}

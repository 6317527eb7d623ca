//! Article records, image feature files, train/validation splits and the
//! synthetic bilingual corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, Tensor2D};
use crate::textprep::{write_vec_file, EmbeddingTable, Source, TableConfig};

/// One article with its paired image. Missing text fields are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRecord {
    pub id: String,
    pub lang: String,
    pub headline: String,
    pub lead: String,
    pub caption: String,
    pub body: String,
    pub image_id: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

impl SampleRecord {
    pub fn text(&self, source: Source) -> &str {
        match source {
            Source::Caption => &self.caption,
            Source::Body => &self.body,
            Source::Headline => &self.headline,
            Source::Lead => &self.lead,
        }
    }

    pub fn text_mut(&mut self, source: Source) -> &mut String {
        match source {
            Source::Caption => &mut self.caption,
            Source::Body => &mut self.body,
            Source::Headline => &mut self.headline,
            Source::Lead => &mut self.lead,
        }
    }
}

/// Image features indexed by image id, stored as one `N×d'` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Tensor2D,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            ids: Vec::new(),
            index: HashMap::new(),
            matrix: Tensor2D::zeros(0, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Tensor2D {
        &self.matrix
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.matrix.row(i))
    }

    pub fn insert(&mut self, id: &str, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim() {
            return Err(Error::shape(
                "feature store",
                format!("feature of {} for dim {}", feature.len(), self.dim()),
            ));
        }
        if self.index.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.matrix.push_row(feature)
    }
}

const IMF_MAGIC: &[u8; 4] = b"IMF1";

pub fn encode_imf1(store: &FeatureStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.len() * (2 + 16 + 4 * store.dim()));
    out.extend_from_slice(IMF_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    for (i, id) in store.ids.iter().enumerate() {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in store.matrix.row(i) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_imf1(bytes: &[u8], path: &Path) -> Result<FeatureStore> {
    let err = |m: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: m,
    };
    if bytes.len() < 12 || &bytes[..4] != IMF_MAGIC {
        return Err(err("bad IMF1 magic".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut store = FeatureStore::new(dim);
    let mut pos = 12;
    let mut row = vec![0.0; dim];
    for k in 0..count {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| err(format!("record {k} truncated; header declares {count}")))?;
            *pos += n;
            Ok(s)
        };
        let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(&mut pos, len)?)
            .map_err(|_| err(format!("record {k}: id is not UTF-8")))?
            .to_string();
        let body = take(&mut pos, 4 * dim)?;
        for (r, c) in row.iter_mut().zip(body.chunks_exact(4)) {
            *r = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
        }
        store.insert(&id, &row).map_err(|e| err(format!("record {k}: {e}")))?;
    }
    if pos != bytes.len() {
        return Err(err(format!("{} trailing bytes after {count} records", bytes.len() - pos)));
    }
    Ok(store)
}

pub fn read_imf1(path: &Path) -> Result<FeatureStore> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_imf1(&bytes, path)
}

pub fn write_imf1(store: &FeatureStore, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_imf1(store))?;
    f.flush()?;
    Ok(())
}

/// Reads article JSONL; blank lines are skipped.
pub fn load_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// What to do with records whose image id has no feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DanglingPolicy {
    /// Skip the record and log a warning.
    #[default]
    Warn,
    Fail,
}

/// Records paired with the feature store their image ids resolve against.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<SampleRecord>,
    pub features: Arc<FeatureStore>,
    /// Records skipped at load time because their image had no feature.
    pub dangling: usize,
}

impl Corpus {
    pub fn new(records: Vec<SampleRecord>, features: Arc<FeatureStore>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| !features.contains(&r.image_id)) {
            return Err(Error::Contract(format!(
                "record {} references unknown image {}",
                r.id, r.image_id
            )));
        }
        Ok(Corpus {
            records,
            features,
            dangling: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn languages(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.lang.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn with_records(&self, records: Vec<SampleRecord>) -> Corpus {
        Corpus {
            records,
            features: Arc::clone(&self.features),
            dangling: 0,
        }
    }

    pub fn language(&self, lang: &str) -> Corpus {
        self.with_records(self.records.iter().filter(|r| r.lang == lang).cloned().collect())
    }

    pub fn feature(&self, record: &SampleRecord) -> &[f64] {
        self.features.get(&record.image_id).expect("image ids resolve by construction")
    }

    /// Metadata entities per image id, merged over every record of that image.
    pub fn image_entities(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.image_id.clone()).or_default().extend(r.entities.iter().cloned());
        }
        out.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()
    }

    /// The optional display URL per image id.
    pub fn image_urls(&self) -> HashMap<String, String> {
        self.records
            .iter()
            .filter_map(|r| r.image_url.clone().map(|u| (r.image_id.clone(), u)))
            .collect()
    }
}

pub fn load_corpus(jsonl: &Path, features: &Path, policy: DanglingPolicy) -> Result<Corpus> {
    let records = load_records(jsonl)?;
    let store = read_imf1(features)?;
    let mut kept = Vec::with_capacity(records.len());
    let mut dangling = 0;
    for r in records {
        if store.contains(&r.image_id) {
            kept.push(r);
            continue;
        }
        if policy == DanglingPolicy::Fail {
            return Err(Error::Contract(format!(
                "record {} references image {} missing from {}",
                r.id,
                r.image_id,
                features.display()
            )));
        }
        log::warn!("record {} references missing image {}; skipped", r.id, r.image_id);
        dangling += 1;
    }
    Ok(Corpus {
        records: kept,
        features: Arc::new(store),
        dangling,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    pub val_per_language: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seed: 0,
            val_per_language: 1200,
        }
    }
}

/// Samples `val_per_language` records of every language without
/// replacement; the rest is training data. Record order is preserved.
pub fn split_train_val(corpus: &Corpus, split: &SplitConfig) -> Result<(Corpus, Corpus)> {
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    let mut is_val = vec![false; corpus.len()];
    for lang in corpus.languages() {
        let idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.records[i].lang == lang).collect();
        if split.val_per_language > idx.len() {
            return Err(Error::Config(format!(
                "{} validation samples requested but language {lang} has {}",
                split.val_per_language,
                idx.len()
            )));
        }
        for &i in idx.choose_multiple(&mut rng, split.val_per_language) {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in corpus.records.iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(r.clone());
    }
    Ok((corpus.with_records(train), corpus.with_records(val)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub topics: usize,
    pub train_per_language: usize,
    pub val_per_language: usize,
    /// Keyword concepts per topic.
    pub vocab_per_topic: usize,
    /// Topic-neutral filler concepts.
    pub fillers: usize,
    /// Word vector width.
    pub w: usize,
    /// Image feature width.
    pub feature_dim: usize,
    /// Standard deviation of the per-coordinate image noise.
    pub noise: f64,
    /// Standard deviation of the per-language word vector perturbation.
    pub word_noise: f64,
    pub languages: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 20,
            train_per_language: 2000,
            val_per_language: 500,
            vocab_per_topic: 30,
            fillers: 300,
            w: 64,
            feature_dim: 128,
            noise: 0.1,
            word_noise: 0.05,
            languages: vec!["en".into(), "de".into()],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(Error::Config("synthetic corpus needs at least two topics".into()));
        }
        if self.vocab_per_topic < 3 {
            return Err(Error::Config("each topic needs at least three keywords".into()));
        }
        if self.languages.is_empty() || self.w == 0 || self.feature_dim == 0 {
            return Err(Error::Config("languages, w and feature_dim must be non-empty".into()));
        }
        let unique: HashSet<&String> = self.languages.iter().collect();
        if unique.len() != self.languages.len() {
            return Err(Error::Config("duplicate synthetic language".into()));
        }
        Ok(())
    }

    pub fn samples_per_language(&self) -> usize {
        self.train_per_language + self.val_per_language
    }
}

/// Latent structure behind a synthetic corpus, kept for oracle checks.
#[derive(Clone, Debug)]
pub struct SynthLatent {
    /// Unit topic directions in feature space.
    pub topics: Vec<Vec<f64>>,
    /// Unit keyword concepts, `keywords[topic][k]`.
    pub keywords: Vec<Vec<Vec<f64>>>,
    pub fillers: Vec<Vec<f64>>,
    /// Token string to concept, over every language.
    pub concept_of: HashMap<String, Vec<f64>>,
    /// Topic of every record, by record id.
    pub topic_of: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub corpus: Corpus,
    /// One aligned word table per language (subwords disabled).
    pub tables: Vec<EmbeddingTable>,
    pub latent: SynthLatent,
    pub config: SynthConfig,
}

impl SynthData {
    pub fn table(&self, lang: &str) -> Option<&EmbeddingTable> {
        self.tables.iter().find(|t| t.language() == lang)
    }

    /// The first `train_per_language` samples of each language for
    /// training, the remainder for validation.
    pub fn split(&self) -> (Corpus, Corpus) {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for r in &self.corpus.records {
            let n = seen.entry(r.lang.as_str()).or_default();
            if *n < self.config.train_per_language { &mut train } else { &mut val }.push(r.clone());
            *n += 1;
        }
        (self.corpus.with_records(train), self.corpus.with_records(val))
    }

    /// Writes `corpus.jsonl`, `features.imf1` and `<lang>.vec` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = vec![dir.join("corpus.jsonl"), dir.join("features.imf1")];
        write_records(&self.corpus.records, &paths[0])?;
        write_imf1(&self.corpus.features, &paths[1])?;
        for t in &self.tables {
            let p = dir.join(format!("{}.vec", t.language()));
            write_vec_file(t, &p)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    l2_normalize(&(0..n).map(|_| normal.sample(rng)).collect::<Vec<_>>())
}

fn mix(a: &[f64], b: &[f64], wa: f64, wb: f64) -> Vec<f64> {
    l2_normalize(&a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect::<Vec<_>>())
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn random_word<R: Rng + ?Sized>(rng: &mut R, taken: &mut HashSet<String>) -> String {
    loop {
        let len = rng.random_range(5..=9);
        let w: String = (0..len).map(|_| LETTERS[rng.random_range(0..26)] as char).collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// Generates a bilingual (or multilingual) corpus whose texts and images
/// share a latent keyword structure.
///
/// Each topic owns keyword concepts near its direction; each sample has a
/// topic and three keywords. Its image feature is the sum of the keyword
/// concepts plus Gaussian noise. Text sources mention different subsets of
/// the keywords among topic-neutral fillers: the caption two, the headline
/// one, the lead one or two, the body each with probability 0.7 plus
/// other words of the topic. Word vectors are a shared random projection
/// of the concept, so the per-language tables are aligned while the token
/// strings are disjoint.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dp = cfg.feature_dim;
    let topics: Vec<Vec<f64>> = (0..cfg.topics).map(|_| random_unit(&mut rng, dp)).collect();
    let keywords: Vec<Vec<Vec<f64>>> = topics
        .iter()
        .map(|t| {
            (0..cfg.vocab_per_topic)
                .map(|_| mix(t, &random_unit(&mut rng, dp), 0.6, 0.8))
                .collect()
        })
        .collect();
    let fillers: Vec<Vec<f64>> = (0..cfg.fillers).map(|_| random_unit(&mut rng, dp)).collect();
    let proj_scale = 1.0 / (cfg.w as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let proj: Vec<f64> = (0..cfg.w * dp).map(|_| normal.sample(&mut rng) * proj_scale).collect();
    let project = |z: &[f64]| -> Vec<f64> { (0..cfg.w).map(|r| dot(&proj[r * dp..(r + 1) * dp], z)).collect() };

    let mut taken = HashSet::new();
    let mut concept_of = HashMap::new();
    let mut tables = Vec::new();
    // lexicon[lang][topic][k] and filler words per language
    let mut lex_kw: Vec<Vec<Vec<String>>> = Vec::new();
    let mut lex_fill: Vec<Vec<String>> = Vec::new();
    let word_noise = Normal::new(0.0, cfg.word_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for lang in &cfg.languages {
        let mut table = EmbeddingTable::new(
            lang,
            cfg.w,
            &TableConfig {
                buckets: 1,
                subwords: false,
                seed: cfg.seed,
            },
        )?;
        let mut add = |z: &Vec<f64>, rng: &mut ChaCha8Rng, table: &mut EmbeddingTable| -> Result<String> {
            let word = random_word(rng, &mut taken);
            let v: Vec<f64> = project(z).into_iter().map(|x| x + word_noise.sample(rng)).collect();
            table.set_word(&word, &v)?;
            concept_of.insert(word.clone(), z.clone());
            Ok(word)
        };
        let mut kw = Vec::new();
        for topic in &keywords {
            kw.push(topic.iter().map(|z| add(z, &mut rng, &mut table)).collect::<Result<Vec<_>>>()?);
        }
        let fill = fillers.iter().map(|z| add(z, &mut rng, &mut table)).collect::<Result<Vec<_>>>()?;
        lex_kw.push(kw);
        lex_fill.push(fill);
        tables.push(table);
    }

    let mut store = FeatureStore::new(dp);
    let mut records = Vec::new();
    let mut topic_of = HashMap::new();
    let img_noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for (li, lang) in cfg.languages.iter().enumerate() {
        for n in 0..cfg.samples_per_language() {
            let topic = rng.random_range(0..cfg.topics);
            let picks: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.vocab_per_topic, 3).into_vec();
            let mut feature = vec![0.0; dp];
            for &k in &picks {
                for (f, z) in feature.iter_mut().zip(&keywords[topic][k]) {
                    *f += z;
                }
            }
            for f in feature.iter_mut() {
                *f += img_noise.sample(&mut rng);
            }
            let kw = &lex_kw[li][topic];
            let fill = &lex_fill[li];
            let words = |ks: &[usize]| -> Vec<String> { ks.iter().map(|&k| kw[k].clone()).collect() };
            let fillers = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<String> {
                let c = rng.random_range(lo..=hi);
                (0..c).map(|_| fill.choose(rng).expect("fillers").clone()).collect()
            };
            let sentence = |mut toks: Vec<String>, rng: &mut ChaCha8Rng| -> String {
                toks.shuffle(rng);
                toks.join(" ")
            };

            let mut order = picks.clone();
            order.shuffle(&mut rng);
            let mut cap = words(&order[..2]);
            cap.extend(fillers(&mut rng, 2, 4));
            let caption = sentence(cap, &mut rng);

            let mut head = words(&order[2..3]);
            head.extend(fillers(&mut rng, 0, 2));
            let headline = sentence(head, &mut rng);

            let n_lead = rng.random_range(1..=2);
            let mut lead_toks = words(&order[..n_lead]);
            lead_toks.extend(fillers(&mut rng, 4, 8));
            let lead = sentence(lead_toks, &mut rng);

            let mut body_toks: Vec<String> = picks
                .iter()
                .filter(|_| rng.random::<f64>() < 0.7)
                .map(|&k| kw[k].clone())
                .collect();
            for _ in 0..3 {
                body_toks.push(kw[rng.random_range(0..cfg.vocab_per_topic)].clone());
            }
            body_toks.extend(fillers(&mut rng, 12, 24));
            let body = sentence(body_toks, &mut rng);

            let id = format!("{lang}-{n:05}");
            let image_id = format!("img-{lang}-{n:05}");
            store.insert(&image_id, &feature)?;
            topic_of.insert(id.clone(), topic);
            records.push(SampleRecord {
                id,
                lang: lang.clone(),
                headline,
                lead,
                caption,
                body,
                image_id,
                entities: words(&picks),
                image_url: None,
            });
        }
    }

    Ok(SynthData {
        corpus: Corpus::new(records, Arc::new(store))?,
        tables,
        latent: SynthLatent {
            topics,
            keywords,
            fillers,
            concept_of,
            topic_of,
        },
        config: cfg.clone(),
    })
}

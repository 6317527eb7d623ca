//! Configurable jobs behind the command-line tool. Each job deserializes
//! from the JSON file given with `--config`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nir_core::corpus::{gen_synthetic, load_corpus, split_train_val, write_records, Corpus, DanglingPolicy, SplitConfig, SynthConfig};
use nir_core::encoders::EncoderConfig;
use nir_core::fusion::FuseStrategy;
use nir_core::model::{Model, ModelConfig};
use nir_core::objectives::MARGIN_GRID;
use nir_core::retrieval::{evaluate_with_sources, MetricsReport};
use nir_core::textprep::{load_vec_file, EmbeddingTable, Source, TableConfig, Truncation};
use nir_core::training::{
    load_checkpoint, save_checkpoint, train_fused, train_one_for_all, train_single_source,
    transfer_all_for_one, TrainConfig, TrainOutcome,
};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides every other seed setting.
pub const SEED_ENV: &str = "NIR_SEED";

/// `NIR_SEED`, then the command-line flag, then the configured value.
pub fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an integer")),
        Err(_) => Ok(flag.unwrap_or(configured)),
    }
}

/// Reads a JSON config, or the type's defaults when no file is given.
pub fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    #[default]
    Single,
    Fused,
    FusedScratch,
    OneForAll,
    Transfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    pub recipe: Recipe,
    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Validation records; when absent the corpus is split with `split`.
    pub val_corpus: Option<PathBuf>,
    pub split: SplitConfig,
    pub dangling: DanglingPolicy,
    /// `.vec` file per language.
    pub tables: BTreeMap<String, PathBuf>,
    pub table: TableConfig,
    pub source: Source,
    pub fusion: FuseStrategy,
    pub encoder: EncoderConfig,
    pub truncation: Truncation,
    /// Single-source checkpoints in caption, body, headline, lead order.
    pub singles: Vec<PathBuf>,
    /// Trained model to transfer from.
    pub base: Option<PathBuf>,
    pub extend_vocab: bool,
    pub train: TrainConfig,
    /// Margins tried by `sweep`.
    pub margins: Vec<f64>,
}

impl Default for TrainJob {
    fn default() -> Self {
        TrainJob {
            recipe: Recipe::Single,
            corpus: None,
            features: None,
            val_corpus: None,
            split: SplitConfig::default(),
            dangling: DanglingPolicy::Warn,
            tables: BTreeMap::new(),
            table: TableConfig::default(),
            source: Source::Caption,
            fusion: FuseStrategy::Attention,
            encoder: EncoderConfig::default(),
            truncation: Truncation::default(),
            singles: Vec::new(),
            base: None,
            extend_vocab: true,
            train: TrainConfig::default(),
            margins: MARGIN_GRID.to_vec(),
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| anyhow!("no {what} given"))
}

impl TrainJob {
    pub fn load_data(&self) -> Result<(Corpus, Option<Corpus>)> {
        let features = required(&self.features, "features file")?;
        let corpus = load_corpus(required(&self.corpus, "corpus")?, features, self.dangling)?;
        match &self.val_corpus {
            Some(v) => Ok((corpus, Some(load_corpus(v, features, self.dangling)?))),
            None if self.split.val_per_language == 0 => Ok((corpus, None)),
            None => {
                let (t, v) = split_train_val(&corpus, &self.split)?;
                Ok((t, Some(v)))
            }
        }
    }

    pub fn load_tables(&self) -> Result<Vec<EmbeddingTable>> {
        self.tables
            .iter()
            .map(|(lang, path)| {
                let vf = load_vec_file(path, lang, &self.table).with_context(|| format!("loading {}", path.display()))?;
                if !vf.duplicates.is_empty() {
                    log::warn!("{}: {} duplicate tokens", path.display(), vf.duplicates.len());
                }
                Ok(vf.table)
            })
            .collect()
    }

    fn model_config(&self, fused: bool, feature_dim: usize) -> ModelConfig {
        let mut cfg = if fused {
            ModelConfig::fused(self.fusion, self.encoder, feature_dim)
        } else {
            ModelConfig::single(self.source, self.encoder, feature_dim)
        };
        cfg.truncation = self.truncation;
        cfg
    }

    /// Runs the configured recipe.
    pub fn run(&self) -> Result<TrainOutcome> {
        let (train, val) = self.load_data()?;
        let val = val.as_ref();
        let dim = train.features.dim();
        let cfg = &self.train;
        let out = match self.recipe {
            Recipe::Single => {
                let model = Model::new(self.model_config(false, dim), self.load_tables()?, cfg.seed)?;
                nir_core::training::train_model(model, &train, val, cfg, &format!("single:{}", self.source))?
            }
            Recipe::FusedScratch => {
                let model = Model::new(self.model_config(true, dim), self.load_tables()?, cfg.seed)?;
                let cfg = TrainConfig {
                    fuser_only_epochs: 0,
                    ..cfg.clone()
                };
                nir_core::training::train_model(model, &train, val, &cfg, "fused-scratch")?
            }
            Recipe::Fused => {
                if self.singles.len() != 4 {
                    bail!("the fused recipe needs four single-source checkpoints, got {}", self.singles.len());
                }
                let models = self
                    .singles
                    .iter()
                    .map(|p| Ok(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.model))
                    .collect::<Result<Vec<_>>>()?;
                train_fused(&train, val, [&models[0], &models[1], &models[2], &models[3]], self.fusion, cfg)?
            }
            Recipe::OneForAll => {
                let tables = self
                    .load_tables()?
                    .into_iter()
                    .map(|mut t| {
                        t.frozen = true;
                        t
                    })
                    .collect();
                train_one_for_all(&train, val, self.model_config(false, dim), tables, cfg)?
            }
            Recipe::Transfer => {
                let base = load_checkpoint(required(&self.base, "base checkpoint")?)?.model;
                let mut tables = self.load_tables()?;
                if tables.len() != 1 {
                    bail!("transfer needs exactly one target-language table, got {}", tables.len());
                }
                let (out, added) = transfer_all_for_one(&base, tables.remove(0), &train, val, self.extend_vocab, cfg)?;
                log::info!("added {added} words to the target table");
                out
            }
        };
        Ok(out)
    }
}

/// Trains, then writes the checkpoint to `out`.
pub fn train(job: &TrainJob, out: &Path) -> Result<TrainOutcome> {
    let outcome = job.run()?;
    save_checkpoint(&outcome.checkpoint(), out).with_context(|| format!("writing {}", out.display()))?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub margin: f64,
    pub best_epoch: Option<usize>,
    pub r10_sum: Option<f64>,
}

/// Trains the configured single-source model once per margin.
pub fn sweep(job: &TrainJob) -> Result<Vec<SweepPoint>> {
    if job.recipe != Recipe::Single {
        bail!("sweep runs the single-source recipe");
    }
    let (train, val) = job.load_data()?;
    let val = val.ok_or_else(|| anyhow!("sweep needs validation data"))?;
    let tables = job.load_tables()?;
    let mut out = Vec::new();
    for &margin in &job.margins {
        let mut cfg = job.train.clone();
        cfg.loss.margin = margin;
        let o = train_single_source(&train, Some(&val), job.source, job.encoder, tables.clone(), &cfg)?;
        let point = SweepPoint {
            margin,
            best_epoch: o.best_epoch,
            r10_sum: o.best_val().map(|v| v.r10_sum()),
        };
        log::info!("margin {margin}: {:?}", point.r10_sum);
        out.push(point);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalJob {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Sources blanked before encoding.
    pub mask: Vec<Source>,
}

pub fn eval(job: &EvalJob) -> Result<MetricsReport> {
    let model = load_checkpoint(required(&job.checkpoint, "checkpoint")?)?.model;
    let corpus = load_corpus(
        required(&job.corpus, "corpus")?,
        required(&job.features, "features file")?,
        DanglingPolicy::Warn,
    )?;
    let keep = Source::ALL.map(|s| !job.mask.contains(&s));
    Ok(evaluate_with_sources(&model, &corpus, keep)?)
}

/// Writes a synthetic corpus plus `train.jsonl`, `val.jsonl` and a
/// `train.json` job that trains a caption model on it.
pub fn gen_synth(cfg: &SynthConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let data = gen_synthetic(cfg)?;
    let mut written = data.write_to(dir)?;
    let (train, val) = data.split();
    for (name, c) in [("train.jsonl", &train), ("val.jsonl", &val)] {
        let p = dir.join(name);
        write_records(&c.records, &p)?;
        written.push(p);
    }
    let job = TrainJob {
        corpus: Some(dir.join("train.jsonl")),
        features: Some(dir.join("features.imf1")),
        val_corpus: Some(dir.join("val.jsonl")),
        tables: cfg
            .languages
            .iter()
            .map(|l| (l.clone(), dir.join(format!("{l}.vec"))))
            .collect(),
        table: TableConfig {
            buckets: 1,
            subwords: false,
            seed: cfg.seed,
        },
        encoder: EncoderConfig {
            w: cfg.w,
            d_model: cfg.w,
            ..EncoderConfig::default()
        },
        train: TrainConfig {
            seed: cfg.seed,
            ..TrainConfig::default()
        },
        ..TrainJob::default()
    };
    let p = dir.join("train.json");
    std::fs::write(&p, serde_json::to_string_pretty(&job)?)?;
    written.push(p);
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSettings {
    pub addr: String,
    /// Published at startup when set.
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub id: Option<String>,
}

impl Default for ServeSettings {
    fn default() -> Self {
        ServeSettings {
            addr: "127.0.0.1:8080".into(),
            checkpoint: None,
            corpus: None,
            features: None,
            id: None,
        }
    }
}

//! Optimization: Adam, learning-rate schedules, the minibatch loop, the
//! single-source, fused and multilingual recipes, and checkpoint files.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use schedule::LrSchedule;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{random_drop, DropMask, FuseStrategy, KEEP_PROB};
use crate::model::{Model, ModelConfig, ParamGroup, Prepared};
use crate::numerics::{Tape, Tensor2D};
use crate::objectives::{LossConfig, LossKind};
use crate::retrieval::{evaluate_bidirectional, DirectionPair};
use crate::textprep::{EmbeddingTable, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Mask sources at random while training (fused models only).
    pub random_drop: bool,
    pub keep_prob: f64,
    /// Groups frozen for the whole run.
    pub freeze: Vec<ParamGroup>,
    /// Leading epochs during which only the fuser is trained.
    pub fuser_only_epochs: usize,
    /// Restricts training to these languages; empty means all.
    pub languages: Vec<String>,
    /// Keep the epoch with the best summed validation R@10 rather than the last.
    pub select_best: bool,
    /// Epoch records are appended here as JSON lines.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            batch_size: 128,
            epochs: 30,
            schedule: LrSchedule::single_source(),
            seed: 0,
            random_drop: false,
            keep_prob: KEEP_PROB,
            freeze: Vec::new(),
            fuser_only_epochs: 0,
            languages: Vec::new(),
            select_best: true,
            log_path: None,
        }
    }
}

impl TrainConfig {
    /// Ten epochs: one with only the fuser trained, then everything, with
    /// `random_drop` on.
    pub fn fused() -> Self {
        TrainConfig {
            epochs: 10,
            schedule: LrSchedule::fused(),
            random_drop: true,
            fuser_only_epochs: 1,
            ..Default::default()
        }
    }

    /// Default batch size for a loss: 256 for the hard-aware loss, else 128.
    pub fn default_batch_size(kind: LossKind) -> usize {
        match kind {
            LossKind::Hal => 256,
            _ => 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(Error::Config(format!("keep probability {} outside [0, 1]", self.keep_prob)));
        }
        self.loss.validate()?;
        self.schedule.validate(self.epochs)
    }

    fn frozen_at(&self, epoch: usize) -> Vec<ParamGroup> {
        let mut groups = self.freeze.clone();
        if epoch < self.fuser_only_epochs {
            groups.extend([ParamGroup::Embeddings, ParamGroup::Encoders, ParamGroup::Image]);
        }
        groups.sort_by_key(|g| *g as u8);
        groups.dedup();
        groups
    }
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub frozen: Vec<ParamGroup>,
    /// Mean loss per training sample.
    pub train_loss: f64,
    pub batches: usize,
    pub val: Option<DirectionPair>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned weights, `None` for the initialization.
    pub best_epoch: Option<usize>,
    pub config: TrainConfig,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: Some(self.config.clone()),
            history: self.history.clone(),
        }
    }

    pub fn best_val(&self) -> Option<&DirectionPair> {
        let e = self.best_epoch?;
        self.history.iter().rev().find(|r| r.epoch == e)?.val.as_ref()
    }
}

/// Single-language batches; languages are interleaved in proportion to
/// their batch counts. Batches with fewer than two pairs are dropped.
fn plan_batches(prepared: &[Prepared], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in prepared.iter().enumerate() {
        by_lang.entry(p.lang.as_str()).or_default().push(i);
    }
    let mut keyed = Vec::new();
    for (li, idx) in by_lang.values_mut().enumerate() {
        idx.shuffle(rng);
        let chunks: Vec<Vec<usize>> = idx
            .chunks(batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect();
        let n = chunks.len() as f64;
        for (k, c) in chunks.into_iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / n, li, c));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, c)| c).collect()
}

fn log_record(cfg: &TrainConfig, rec: &EpochRecord) -> Result<()> {
    if let Some(path) = &cfg.log_path {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        serde_json::to_writer(&mut f, rec)?;
        writeln!(f)?;
    }
    Ok(())
}

/// The minibatch loop shared by every recipe.
pub fn train_model(mut model: Model, train: &Corpus, val: Option<&Corpus>, cfg: &TrainConfig, stage: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = if cfg.languages.is_empty() {
        train.clone()
    } else {
        train.with_records(
            train
                .records
                .iter()
                .filter(|r| cfg.languages.contains(&r.lang))
                .cloned()
                .collect(),
        )
    };
    if train.len() < 2 {
        return Err(Error::Config("training corpus needs at least two samples".into()));
    }
    if train.features.dim() != model.config().feature_dim {
        return Err(Error::Config(format!(
            "corpus features have {} dimensions, model expects {}",
            train.features.dim(),
            model.config().feature_dim
        )));
    }
    for lang in train.languages() {
        model.table(&lang)?;
    }
    let prepared = model.prepare(&train);
    let used: Vec<usize> = model.config().sources.iter().map(|s| s.index()).collect();
    if prepared.iter().all(|p| used.iter().all(|&k| p.tokens[k].is_empty())) {
        return Err(Error::Config("every training text of the model's sources is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.schedule.lr_at(0));
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let features = train.features.matrix();
    let drop = cfg.random_drop && model.config().is_fused();

    for epoch in 0..cfg.epochs {
        let frozen = cfg.frozen_at(epoch);
        for g in ParamGroup::ALL {
            model.set_frozen(g, frozen.contains(&g));
        }
        adam.lr = cfg.schedule.lr_at(epoch);
        let mut total = 0.0;
        let mut samples = 0usize;
        let batches = plan_batches(&prepared, cfg.batch_size, &mut rng);
        for batch in &batches {
            let texts: Vec<(String, [Vec<String>; 4])> = batch
                .iter()
                .map(|&i| {
                    let p = &prepared[i];
                    let mask = if drop { random_drop(&mut rng, cfg.keep_prob) } else { DropMask::complete() };
                    (p.lang.clone(), mask.apply(p.tokens.clone()))
                })
                .collect();
            let rows: Vec<&[f64]> = batch.iter().map(|&i| features.row(prepared[i].image_row)).collect();
            let f = Tensor2D::from_rows(&rows)?;
            let grads = {
                let mut tape = Tape::new();
                let refs: Vec<(&str, &[Vec<String>; 4])> = texts.iter().map(|(l, t)| (l.as_str(), t)).collect();
                let loss = model.batch_loss(&mut tape, &refs, f, &cfg.loss)?;
                total += tape.value(loss).get(0, 0);
                tape.backward(loss)?
            };
            samples += batch.len();
            adam_step(&mut model, &grads, &mut adam)?;
        }
        let val_metrics = match val {
            Some(v) if !v.is_empty() => Some(evaluate_bidirectional(&model, v)?.overall),
            _ => None,
        };
        let rec = EpochRecord {
            stage: stage.to_string(),
            epoch,
            lr: adam.lr,
            frozen,
            train_loss: if samples > 0 { total / samples as f64 } else { 0.0 },
            batches: batches.len(),
            val: val_metrics.clone(),
        };
        log::info!(
            "{stage} epoch {epoch}: loss {:.4}, val R@10 sum {}",
            rec.train_loss,
            val_metrics.as_ref().map_or("-".to_string(), |m| format!("{:.3}", m.r10_sum()))
        );
        log_record(cfg, &rec)?;
        history.push(rec);
        if cfg.select_best {
            if let Some(m) = val_metrics {
                if best.as_ref().is_none_or(|b| m.r10_sum() > b.0) {
                    best = Some((m.r10_sum(), epoch, model.clone()));
                }
            }
        }
    }
    for g in ParamGroup::ALL {
        model.set_frozen(g, cfg.freeze.contains(&g));
    }
    let (model, best_epoch) = match best {
        Some((_, e, mut m)) => {
            for g in ParamGroup::ALL {
                m.set_frozen(g, cfg.freeze.contains(&g));
            }
            (m, Some(e))
        }
        None => (model, cfg.epochs.checked_sub(1)),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        config: cfg.clone(),
    })
}

/// Trains a model that reads only `source`.
pub fn train_single_source(
    train: &Corpus,
    val: Option<&Corpus>,
    source: Source,
    encoder: EncoderConfig,
    tables: Vec<EmbeddingTable>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = Model::new(
        ModelConfig::single(source, encoder, train.features.dim()),
        tables,
        cfg.seed,
    )?;
    train_model(model, train, val, cfg, &format!("single:{source}"))
}

/// A fused model assembled from four single-source models given in
/// `Source::ALL` order. Embedding tables and the image projection come
/// from the caption model; the fuser is freshly initialized.
pub fn fused_from_singles(singles: [&Model; 4], strategy: FuseStrategy, seed: u64) -> Result<Model> {
    let caption = singles[Source::Caption.index()];
    let base = caption.config();
    for (k, m) in singles.iter().enumerate() {
        let c = m.config();
        if c.sources != [Source::ALL[k]] {
            return Err(Error::load(
                format!("enc.{}", Source::ALL[k]),
                format!("checkpoint {k} encodes {:?}", c.sources),
            ));
        }
        if c.encoder != base.encoder || c.feature_dim != base.feature_dim {
            return Err(Error::load(
                format!("enc.{}", Source::ALL[k]),
                "encoder or feature dimensions differ from the caption model",
            ));
        }
    }
    let cfg = ModelConfig {
        sources: Source::ALL.to_vec(),
        fusion: strategy,
        ..base.clone()
    };
    let mut fused = Model::new(cfg, caption.tables().cloned().collect(), seed)?;
    for (k, m) in singles.iter().enumerate() {
        let prefix = format!("{}.", m.encoder(Source::ALL[k]).expect("checked above").prefix());
        for p in m.params.iter().filter(|p| p.name.starts_with(&prefix)) {
            fused.params.get_mut(&p.name)?.value = p.value.clone();
        }
    }
    let img = caption.image_projection().name();
    fused.params.get_mut(img)?.value = caption.params.get(img)?.value.clone();
    fused.check_shapes()?;
    Ok(fused)
}

/// Initializes from four single-source models and trains the fused model,
/// training only the fuser for `cfg.fuser_only_epochs` first.
pub fn train_fused(
    train: &Corpus,
    val: Option<&Corpus>,
    singles: [&Model; 4],
    strategy: FuseStrategy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = fused_from_singles(singles, strategy, cfg.seed)?;
    train_model(model, train, val, cfg, "fused")
}

/// Trains a fused model from random initialization.
pub fn train_fused_from_scratch(
    train: &Corpus,
    val: Option<&Corpus>,
    encoder: EncoderConfig,
    tables: Vec<EmbeddingTable>,
    strategy: FuseStrategy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = Model::new(
        ModelConfig::fused(strategy, encoder, train.features.dim()),
        tables,
        cfg.seed,
    )?;
    let cfg = TrainConfig {
        fuser_only_epochs: 0,
        ..cfg.clone()
    };
    train_model(model, train, val, &cfg, "fused-scratch")
}

/// One model over several languages whose aligned tables stay frozen.
pub fn train_one_for_all(
    train: &Corpus,
    val: Option<&Corpus>,
    model_config: ModelConfig,
    tables: Vec<EmbeddingTable>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if let Some(t) = tables.iter().find(|t| !t.frozen) {
        return Err(Error::Contract(format!(
            "table {} must be frozen for joint multilingual training",
            t.language()
        )));
    }
    let model = Model::new(model_config, tables, cfg.seed)?;
    let mut cfg = cfg.clone();
    if !cfg.freeze.contains(&ParamGroup::Embeddings) {
        cfg.freeze.push(ParamGroup::Embeddings);
    }
    train_model(model, train, val, &cfg, "one-for-all")
}

/// Moves a trained model to language B: its tables are replaced by
/// `table_b`, optionally extended with every token of `train_b`, and all
/// weights are finetuned. Returns the outcome and the number of words
/// added to the table.
pub fn transfer_all_for_one(
    source: &Model,
    table_b: EmbeddingTable,
    train_b: &Corpus,
    val_b: Option<&Corpus>,
    extend_vocab: bool,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, usize)> {
    let w = source.config().encoder.w;
    if table_b.dim() != w {
        return Err(Error::load(
            format!("emb.{}", table_b.language()),
            format!("width {} for a model with w = {w}", table_b.dim()),
        ));
    }
    let mut model = source.clone();
    for lang in model.languages() {
        model.remove_table(&lang);
    }
    let mut table = table_b;
    table.frozen = false;
    let mut added = 0;
    if extend_vocab {
        let lang = table.language().to_string();
        let mut tokens: Vec<String> = Vec::new();
        for r in train_b.records.iter().filter(|r| r.lang == lang) {
            for s in Source::ALL {
                tokens.extend(model.tokenize(r.text(s), s, &lang));
            }
        }
        added = table.extend_vocab(tokens.iter().map(String::as_str))?;
    }
    model.set_table(table)?;
    let cfg = TrainConfig {
        freeze: Vec::new(),
        fuser_only_epochs: 0,
        ..cfg.clone()
    };
    Ok((train_model(model, train_b, val_b, &cfg, "all-for-one")?, added))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SynthConfig};
    use crate::numerics::ParamSet;

    fn tiny_data() -> crate::corpus::SynthData {
        gen_synthetic(&SynthConfig {
            topics: 4,
            train_per_language: 60,
            val_per_language: 20,
            w: 8,
            feature_dim: 12,
            languages: vec!["en".into()],
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            w: 8,
            heads: 2,
            d_k: 4,
            d_v: 4,
            d_model: 8,
            d_hidden: 16,
            d: 8,
        }
    }

    fn snapshot(m: &Model) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        m.visit_params(&mut |n, t, _| out.push((n.to_string(), t.data().to_vec())));
        out
    }

    #[test]
    fn batches_are_single_language_and_interleaved() {
        let prepared: Vec<Prepared> = (0..30)
            .map(|i| Prepared {
                lang: if i < 20 { "de".into() } else { "fr".into() },
                ..Default::default()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = plan_batches(&prepared, 5, &mut rng);
        assert_eq!(b.len(), 6);
        let langs: Vec<&str> = b.iter().map(|c| prepared[c[0]].lang.as_str()).collect();
        assert_eq!(langs, ["de", "fr", "de", "de", "fr", "de"]);
        for c in &b {
            assert!(c.iter().all(|&i| prepared[i].lang == prepared[c[0]].lang));
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 0,
            schedule: LrSchedule::Constant { lr: 1e-3 },
            ..Default::default()
        };
        let out = train_single_source(&data.corpus, None, Source::Caption, tiny_encoder(), data.tables.clone(), &cfg).unwrap();
        let init = Model::new(
            ModelConfig::single(Source::Caption, tiny_encoder(), 12),
            data.tables.clone(),
            0,
        )
        .unwrap();
        assert_eq!(snapshot(&out.model), snapshot(&init));
    }

    #[test]
    fn loss_decreases_and_runs_are_deterministic() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            schedule: LrSchedule::Constant { lr: 3e-3 },
            select_best: false,
            ..Default::default()
        };
        let run = || train_single_source(&data.corpus, None, Source::Caption, tiny_encoder(), data.tables.clone(), &cfg).unwrap();
        let a = run();
        let losses: Vec<f64> = a.history.iter().map(|r| r.train_loss).collect();
        assert!(losses[2] < losses[0], "{losses:?}");
        let b = run();
        assert_eq!(snapshot(&a.model), snapshot(&b.model));
    }

    #[test]
    fn all_empty_source_is_a_config_error() {
        let data = tiny_data();
        let mut c = data.corpus.clone();
        for r in &mut c.records {
            r.headline.clear();
        }
        let r = train_single_source(&c, None, Source::Headline, tiny_encoder(), data.tables.clone(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn one_for_all_requires_frozen_tables() {
        let data = tiny_data();
        let cfg = ModelConfig::single(Source::Caption, tiny_encoder(), 12);
        let r = train_one_for_all(&data.corpus, None, cfg, data.tables.clone(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}

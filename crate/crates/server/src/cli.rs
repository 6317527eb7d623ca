//! The `nir` command line.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nir_core::corpus::SynthConfig;
use nir_core::textprep::Source;

use crate::api::{serve, AppState};
use crate::jobs::{self, read_config, resolve_seed, EvalJob, Recipe, ServeSettings, TrainJob};
use crate::registry::Registry;
use crate::snapshot::{ModelSnapshot, SearchRequest};

#[derive(Parser, Debug)]
#[command(name = "nir", version, about = "News image retrieval: training, evaluation and search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON file with the command's settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed (NIR_SEED takes precedence).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus, aligned word tables and a training job.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_per_language: Option<usize>,
        #[arg(long)]
        val_per_language: Option<usize>,
        /// Comma-separated language tags.
        #[arg(long, value_delimiter = ',')]
        languages: Vec<String>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum)]
        recipe: Option<Recipe>,
        #[arg(long)]
        source: Option<Source>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Bidirectional retrieval metrics of a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Sources to blank before encoding.
        #[arg(long, value_delimiter = ',')]
        mask: Vec<Source>,
    },
    /// Rank the images of a corpus for one article.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "")]
        headline: String,
        #[arg(long, default_value = "")]
        lead: String,
        #[arg(long, default_value = "")]
        caption: String,
        #[arg(long, default_value = "")]
        body: String,
        #[arg(long, default_value = "")]
        lang: String,
        #[arg(short, long)]
        k: Option<usize>,
        /// Entity required in the image metadata; repeatable.
        #[arg(long = "entity")]
        entities: Vec<String>,
    },
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the single-source recipe once per margin.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',')]
        margins: Vec<f64>,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Article records (JSON lines).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Image feature store (IMF1).
    #[arg(long)]
    pub features: Option<PathBuf>,
}

fn apply_data(job: &mut TrainJob, data: &DataArgs) {
    if data.corpus.is_some() {
        job.corpus = data.corpus.clone();
    }
    if data.features.is_some() {
        job.features = data.features.clone();
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            common,
            out,
            train_per_language,
            val_per_language,
            languages,
        } => {
            let mut cfg: SynthConfig = read_config(common.config.as_deref())?;
            cfg.seed = resolve_seed(common.seed, cfg.seed)?;
            if let Some(n) = train_per_language {
                cfg.train_per_language = n;
            }
            if let Some(n) = val_per_language {
                cfg.val_per_language = n;
            }
            if !languages.is_empty() {
                cfg.languages = languages;
            }
            for p in jobs::gen_synth(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train {
            common,
            data,
            out,
            recipe,
            source,
            epochs,
        } => {
            let mut job: TrainJob = read_config(common.config.as_deref())?;
            job.train.seed = resolve_seed(common.seed, job.train.seed)?;
            apply_data(&mut job, &data);
            if let Some(r) = recipe {
                job.recipe = r;
            }
            if let Some(s) = source {
                job.source = s;
            }
            if let Some(e) = epochs {
                job.train.epochs = e;
            }
            let outcome = jobs::train(&job, &out)?;
            print_json(&serde_json::json!({
                "checkpoint": out,
                "best_epoch": outcome.best_epoch,
                "val": outcome.best_val(),
            }))?;
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            mask,
        } => {
            let mut job: EvalJob = read_config(common.config.as_deref())?;
            job.checkpoint = checkpoint.or(job.checkpoint);
            job.corpus = data.corpus.or(job.corpus);
            job.features = data.features.or(job.features);
            if !mask.is_empty() {
                job.mask = mask;
            }
            print_json(&jobs::eval(&job)?)?;
        }
        Command::Search {
            common,
            checkpoint,
            data,
            headline,
            lead,
            caption,
            body,
            lang,
            k,
            entities,
        } => {
            let mut job: EvalJob = read_config(common.config.as_deref())?;
            job.corpus = data.corpus.or(job.corpus);
            job.features = data.features.or(job.features);
            let corpus = job.corpus.context("no corpus given")?;
            let features = job.features.context("no features file given")?;
            let snap = ModelSnapshot::load("cli", &checkpoint, &corpus, &features)?;
            let req = SearchRequest {
                headline,
                lead,
                caption,
                body,
                lang,
                k,
                model: None,
                entities,
            };
            print_json(&snap.search(&req)?)?;
        }
        Command::Serve {
            common,
            addr,
            checkpoint,
            data,
        } => {
            let mut s: ServeSettings = read_config(common.config.as_deref())?;
            if let Some(a) = addr {
                s.addr = a;
            }
            s.checkpoint = checkpoint.or(s.checkpoint);
            s.corpus = data.corpus.or(s.corpus);
            s.features = data.features.or(s.features);
            let registry = Arc::new(Registry::new());
            if let Some(ck) = &s.checkpoint {
                let corpus = s.corpus.as_ref().context("--checkpoint needs --corpus")?;
                let features = s.features.as_ref().context("--checkpoint needs --features")?;
                let id = s.id.clone().unwrap_or_else(|| "default".into());
                registry.publish(ModelSnapshot::load(&id, ck, corpus, features)?);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&s.addr)
                    .await
                    .with_context(|| format!("binding {}", s.addr))?;
                log::info!("listening on {}", listener.local_addr()?);
                serve(listener, AppState::new(registry)).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
        Command::Sweep { common, data, margins } => {
            let mut job: TrainJob = read_config(common.config.as_deref())?;
            job.train.seed = resolve_seed(common.seed, job.train.seed)?;
            apply_data(&mut job, &data);
            if !margins.is_empty() {
                job.margins = margins;
            }
            print_json(&jobs::sweep(&job)?)?;
        }
    }
    Ok(())
}

//! `eetm` — command-line driver for entity-aware embedded topic models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use eetm_core::corpus::{read_bow_jsonl, read_corpus_jsonl, write_corpus_jsonl, RawDocument};
use eetm_core::embedding::EmbeddingStore;
use eetm_core::eval::{aggregate_ci, document_completion_perplexity};
use eetm_core::linker::LinkerMode;
use eetm_core::model::sampler::{sample_detm, sample_etm, sample_lda, LdaParams, SyntheticCorpus};
use eetm_core::model::{train, DetmHyper, ModelKind, TrainedModel};
use eetm_core::pipeline::{
    embed, link_corpus, load_alias_table, model_report, parse_seeds, prepare_corpus, prepare_run, run_pipeline, run_seeds,
    save_prepared, AtStage, RunConfig, Stage, StageError,
};
use eetm_core::report::{render_table, to_stable_json, topic_report, transition_report, ReportMeta};
use eetm_core::{rng, Error, ErrorClass};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Parser)]
#[command(name = "eetm", version, about = "Entity-aware embedded topic models")]
struct Cli {
    /// log verbosity (error, warn, info, debug)
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Link, filter and split a corpus into bag-of-words files
    Prepare(ConfigArgs),
    /// Link a corpus and print the term sequences as JSON lines
    Link {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// output file (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prepare the corpus and fit a model
    Train(ConfigArgs),
    /// Document-completion perplexity of a checkpoint on a bag-of-words corpus
    Eval {
        #[arg(long)]
        model_path: PathBuf,
        /// bag-of-words JSON lines (e.g. test.jsonl written by `prepare`)
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top terms per topic (and per slice for dynamic models)
    Report {
        #[arg(long)]
        model_path: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_n: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// require a dynamic model and report topic transitions
        #[arg(long)]
        transitions: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean and 95% confidence half-width over several eval outputs
    Aggregate {
        /// glob of JSON files holding a "perplexity" field or a bare number
        #[arg(long)]
        inputs: String,
    },
    /// Full pipeline: prepare, link, embed, train, eval, report
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// independent training seeds, e.g. 1..8 or 1,2,3
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Write a synthetic corpus drawn from a generative model
    Sample(SampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleKind {
    Lda,
    Etm,
    Detm,
}

/// A run configuration file plus per-field overrides.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    linker: Option<LinkerMode>,
    #[arg(long)]
    link_threshold: Option<f64>,
    #[arg(long)]
    alias_table: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    max_doc_freq: Option<f64>,
    #[arg(long)]
    max_fallback: Option<f64>,
    #[arg(long)]
    slice_start: Option<i64>,
    #[arg(long)]
    slice_span: Option<i64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// number of topics
    #[arg(long)]
    k: Option<usize>,
    /// training seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> eetm_core::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            corpus => c.corpus,
            linker => c.linker,
            link_threshold => c.link_threshold,
            max_doc_freq => c.max_doc_freq,
            max_fallback => c.max_fallback,
            embeddings => c.embeddings,
            slice_span => c.slice_span,
            split_seed => c.split_seed,
            model => c.model,
            eval_seed => c.eval_seed,
            top_n => c.top_n,
            output_dir => c.output_dir,
            k => c.train.topics,
            seed => c.train.seed,
            hidden => c.train.hidden,
            batch_size => c.train.batch_size,
            max_epochs => c.train.max_epochs,
            patience => c.train.patience,
            lr => c.train.adam.lr,
            clip_norm => c.train.clip_norm,
        );
        // paths given on the command line are relative to the working directory
        let cwd_relative = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
            }
        };
        for (flag, target) in [
            (&self.corpus, &mut c.corpus),
            (&self.embeddings, &mut c.embeddings),
            (&self.output_dir, &mut c.output_dir),
        ] {
            if let Some(p) = flag {
                *target = cwd_relative(p);
            }
        }
        if let Some(p) = &self.alias_table {
            c.alias_table = Some(cwd_relative(p));
        }
        if let Some(p) = &self.stopwords {
            c.stopwords = Some(cwd_relative(p));
        }
        if self.embed_dim.is_some() {
            c.embed_dim = self.embed_dim;
        }
        if self.slice_start.is_some() {
            c.slice_start = self.slice_start;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, value_enum, default_value_t = SampleKind::Etm)]
    kind: SampleKind,
    #[arg(long, default_value_t = 3)]
    topics: usize,
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    /// documents (per slice for detm)
    #[arg(long, default_value_t = 500)]
    docs: usize,
    #[arg(long, default_value_t = 100)]
    doc_len: usize,
    #[arg(long, default_value_t = 5)]
    slices: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// corpus JSON lines to write
    #[arg(long)]
    out: PathBuf,
    /// also write the embedding matrix used (etm, detm)
    #[arg(long)]
    embeddings_out: Option<PathBuf>,
    /// also write the true topics as JSON
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new().parse_filters(level).format_timestamp(None).try_init();
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut o = std::io::stdout().lock();
            o.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                o.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn cmd_prepare(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let run = prepare_corpus(&cfg)?;
    let mut artifacts = BTreeMap::new();
    save_prepared(&run.prepared, &cfg.output(), &mut artifacts).at(Stage::Link)?;
    let v = &run.prepared.vocab;
    let s = &run.prepared.splits;
    let summary = serde_json::json!({
        "vocab_size": v.len(),
        "entities": v.n_entities(),
        "splits": [s.train.len(), s.valid.len(), s.test.len()],
        "slices": s.num_slices(),
        "dropped_documents": run.prepared.dropped,
        "artifacts": artifacts,
    });
    emit(&serde_json::to_string_pretty(&summary)?, None)
}

fn cmd_link(args: &ConfigArgs, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    if cfg.linker == LinkerMode::Dict && cfg.alias_table.is_none() {
        return Err(Error::Config("linker \"dict\" needs --alias-table".into()).into());
    }
    let docs = read_corpus_jsonl(&cfg.resolve(&cfg.corpus))?;
    let table = load_alias_table(&cfg)?;
    let linked = link_corpus(&docs, cfg.linker, table.as_ref(), cfg.link_threshold).at(Stage::Link)?;
    let mut text = String::new();
    for d in &linked {
        text.push_str(&serde_json::to_string(d)?);
        text.push('\n');
    }
    emit(&text, out)
}

fn cmd_train(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let run = prepare_run(&cfg)?;
    let out = cfg.output();
    let mut artifacts = BTreeMap::new();
    save_prepared(&run.prepared, &out, &mut artifacts).at(Stage::Link)?;
    let emb = embed(&cfg, &run.prepared.vocab).at(Stage::Embed)?;
    let model = train(cfg.model, &run.prepared.splits, emb.rho.view(), Some(&run.prepared.vocab), &cfg.train)
        .at(Stage::Train)?;
    let path = out.join("model.ckpt");
    model.save(&path).at(Stage::Train)?;
    let summary = serde_json::json!({
        "checkpoint": path,
        "best_epoch": model.log.best_epoch,
        "epochs": model.log.epochs.len(),
        "stopped_early": model.log.stopped_early,
        "best_valid_perplexity": model.log.epochs[model.log.best_epoch - 1].valid_perplexity,
    });
    emit(&serde_json::to_string_pretty(&summary)?, None)
}

fn cmd_eval(model_path: &Path, corpus: &Path, seed: u64, out: Option<&Path>) -> anyhow::Result<()> {
    let model = TrainedModel::load(model_path)?;
    let docs = read_bow_jsonl(corpus, Some(model.dims.vocab))?;
    let res = document_completion_perplexity(&model, &docs, seed)?;
    emit(&to_stable_json(&res)?, out)
}

fn cmd_report(model_path: &Path, top_n: usize, format: Format, transitions: bool, seed: u64) -> anyhow::Result<()> {
    let model = TrainedModel::load(model_path)?;
    let meta = ReportMeta {
        seed,
        corpus_hash: model.vocab_fingerprint.clone(),
    };
    let report = if transitions {
        transition_report(&model, top_n, &meta)?
    } else if model.is_dynamic() {
        model_report(&model, top_n, seed, &model.vocab_fingerprint)?
    } else {
        topic_report(&model, top_n, &meta)?
    };
    match format {
        Format::Json => emit(&to_stable_json(&report)?, None),
        Format::Table => emit(&render_table(&report), None),
    }
}

fn read_value(path: &Path) -> anyhow::Result<f64> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: invalid JSON: {e}", path.display())))?;
    let x = match &v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::Object(o) => o.get("perplexity").and_then(|p| p.as_f64()),
        _ => None,
    };
    x.ok_or_else(|| Error::Data(format!("{}: no \"perplexity\" value", path.display())).into())
}

fn cmd_aggregate(pattern: &str) -> anyhow::Result<()> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::Config(format!("invalid glob {pattern:?}: {e}")))?
        .collect::<Result<_, _>>()?;
    let values = paths.iter().map(|p| read_value(p)).collect::<anyhow::Result<Vec<f64>>>()?;
    let agg = aggregate_ci(&values)?;
    let out = serde_json::json!({ "mean": agg.mean, "ci95": agg.ci95, "n": agg.n });
    emit(&to_stable_json(&out)?, None)
}

fn cmd_run(args: &ConfigArgs, seeds: Option<&str>) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    match seeds {
        None => {
            let s = run_pipeline(&cfg)?;
            emit(&to_stable_json(&s.manifest)?, None)
        }
        Some(list) => {
            let seeds = parse_seeds(list)?;
            let (_, agg) = run_seeds(&cfg, &seeds)?;
            let out = serde_json::json!({ "mean": agg.mean, "ci95": agg.ci95, "n": agg.n, "values": agg.values });
            emit(&to_stable_json(&out)?, None)
        }
    }
}

fn token(v: usize) -> String {
    format!("t{v}")
}

fn cmd_sample(a: &SampleArgs) -> anyhow::Result<()> {
    if a.topics == 0 || a.vocab == 0 || a.docs == 0 || a.doc_len == 0 || a.embed_dim == 0 {
        return Err(Error::Config("topics, vocab, docs, doc-len and embed-dim must be positive".into()).into());
    }
    let mut r = rng::stream(a.seed, "cli-sample", 0);
    let rho = Array2::from_shape_fn((a.embed_dim, a.vocab), |_| r.sample::<f64, _>(StandardNormal));
    let corpus: SyntheticCorpus = match a.kind {
        SampleKind::Lda => {
            if a.embeddings_out.is_some() {
                bail!(Error::Config("--embeddings-out is only meaningful for etm and detm".into()));
            }
            let p = LdaParams::draw(a.topics, a.vocab, 0.1, 0.5, a.seed)?;
            sample_lda(&p, &vec![a.doc_len; a.docs], a.seed)?
        }
        SampleKind::Etm => {
            let alpha = Array2::from_shape_fn((a.topics, a.embed_dim), |_| r.sample::<f64, _>(StandardNormal));
            sample_etm(rho.view(), alpha.view(), &vec![a.doc_len; a.docs], a.seed)?
        }
        SampleKind::Detm => {
            sample_detm(rho.view(), DetmHyper::default(), a.slices, a.topics, a.docs, a.doc_len, a.seed)?.corpus
        }
    };
    let docs: Vec<RawDocument> = corpus
        .docs
        .iter()
        .enumerate()
        .map(|(i, d)| RawDocument {
            id: format!("doc{i}"),
            text: d.words.iter().map(|&v| token(v)).collect::<Vec<_>>().join(" "),
            year: d.slice.map(|t| 2000 + 5 * t as i64),
            gold_spans: Vec::new(),
        })
        .collect();
    write_corpus_jsonl(&a.out, &docs)?;
    if let Some(p) = &a.embeddings_out {
        let mut store = EmbeddingStore::new(a.embed_dim);
        for v in 0..a.vocab {
            store.insert(token(v), rho.column(v).to_vec())?;
        }
        store.save(p)?;
    }
    if let Some(p) = &a.truth_out {
        let beta: Vec<Vec<Vec<f64>>> = corpus
            .beta
            .iter()
            .map(|b| b.rows().into_iter().map(|r| r.to_vec()).collect())
            .collect();
        let vocab: Vec<String> = (0..a.vocab).map(token).collect();
        let truth = serde_json::json!({ "vocab": vocab, "beta": beta });
        fs::write(p, to_stable_json(&truth)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn classify(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<StageError>() {
            return e.source.class();
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.class();
        }
    }
    ErrorClass::Data
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

/// The error chain joined by ": ", skipping causes already spelled out by
/// the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(&cli.log);
    let result = match &cli.command {
        Command::Prepare(c) => cmd_prepare(c),
        Command::Link { cfg, out } => cmd_link(cfg, out.as_deref()),
        Command::Train(c) => cmd_train(c),
        Command::Eval {
            model_path,
            corpus,
            seed,
            out,
        } => cmd_eval(model_path, corpus, *seed, out.as_deref()),
        Command::Report {
            model_path,
            top_n,
            format,
            transitions,
            seed,
        } => cmd_report(model_path, *top_n, *format, *transitions, *seed),
        Command::Aggregate { inputs } => cmd_aggregate(inputs),
        Command::Run { cfg, seeds } => cmd_run(cfg, seeds.as_deref()),
        Command::Sample(a) => cmd_sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(classify(&e)))
        }
    }
}

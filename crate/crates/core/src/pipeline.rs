//! End-to-end runs: prepare → link → embed → train → eval → report.
//!
//! Every run writes its artifacts into `output_dir` together with a
//! `manifest.json` holding the SHA-256 of the configuration, of every input
//! file and of every artifact. Two runs of the same configuration produce
//! byte-identical manifests.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    assign_time_slice, build_vocabulary, hex_digest, read_corpus_jsonl, read_stopwords, split_corpus, to_bow,
    write_bow_jsonl, CorpusSplits, RawDocument, Term, Vocabulary,
};
use crate::embedding::{build_rho, store_key, EmbeddingMatrix, EmbeddingStore, DEFAULT_MAX_FALLBACK};
use crate::error::{Error, Result};
use crate::eval::{aggregate_ci, document_completion_perplexity, PerplexityResult, SeedAggregate};
use crate::linker::{link_document, AliasTable, LinkerMode};
use crate::model::{train, ModelKind, TrainConfig, TrainedModel};
use crate::par;
use crate::report::{render_table, to_stable_json, topic_report, transition_report, ReportMeta, TopicReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub linker: LinkerMode,
    pub link_threshold: f64,
    pub alias_table: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub embeddings: PathBuf,
    pub embed_dim: Option<usize>,
    pub max_doc_freq: f64,
    /// largest tolerated fraction of columns without a pretrained vector
    pub max_fallback: f64,
    /// first year of slice 0; defaults to the earliest year in the corpus
    pub slice_start: Option<i64>,
    pub slice_span: i64,
    pub split_seed: u64,
    pub split_ratios: [usize; 3],
    pub model: ModelKind,
    pub eval_seed: u64,
    pub top_n: usize,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    /// directory relative paths are resolved against
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            linker: LinkerMode::Dict,
            link_threshold: 0.5,
            alias_table: None,
            stopwords: None,
            embeddings: PathBuf::from("embeddings.txt"),
            embed_dim: None,
            max_doc_freq: 0.7,
            max_fallback: DEFAULT_MAX_FALLBACK,
            slice_start: None,
            slice_span: 5,
            split_seed: 0,
            split_ratios: [3, 1, 1],
            model: ModelKind::Etm,
            eval_seed: 0,
            top_n: 5,
            output_dir: PathBuf::from("out"),
            train: TrainConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML configuration; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    fn inputs(&self, with_embeddings: bool) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![("corpus", self.resolve(&self.corpus))];
        if with_embeddings {
            v.push(("embeddings", self.resolve(&self.embeddings)));
        }
        if let Some(a) = &self.alias_table {
            v.push(("alias_table", self.resolve(a)));
        }
        if let Some(s) = &self.stopwords {
            v.push(("stopwords", self.resolve(s)));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_inputs(true)
    }

    fn validate_inputs(&self, with_embeddings: bool) -> Result<()> {
        for (name, p) in self.inputs(with_embeddings) {
            if !p.is_file() {
                return Err(Error::Config(format!("{name} file {} does not exist", p.display())));
            }
        }
        if self.linker == LinkerMode::Dict && self.alias_table.is_none() {
            return Err(Error::Config("linker \"dict\" needs alias_table".into()));
        }
        if !(0.0..=1.0).contains(&self.link_threshold) {
            return Err(Error::Config(format!("link_threshold must lie in [0, 1], got {}", self.link_threshold)));
        }
        if !(self.max_doc_freq > 0.0 && self.max_doc_freq <= 1.0) {
            return Err(Error::Config(format!("max_doc_freq must lie in (0, 1], got {}", self.max_doc_freq)));
        }
        if !(0.0..=1.0).contains(&self.max_fallback) {
            return Err(Error::Config(format!("max_fallback must lie in [0, 1], got {}", self.max_fallback)));
        }
        if self.slice_span < 1 {
            return Err(Error::Config(format!("slice_span must be >= 1, got {}", self.slice_span)));
        }
        if self.split_ratios.contains(&0) {
            return Err(Error::Config(format!("split ratios must be positive, got {:?}", self.split_ratios)));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(to_stable_json(self)?.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Link,
    Embed,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Link => "link",
            Stage::Embed => "embed",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {} failed: {source}", .stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedDoc {
    pub id: String,
    pub year: Option<i64>,
    pub terms: Vec<Term>,
}

/// Links every document; results keep corpus order.
pub fn link_corpus(
    docs: &[RawDocument],
    mode: LinkerMode,
    table: Option<&AliasTable>,
    threshold: f64,
) -> Result<Vec<LinkedDoc>> {
    par::try_map(docs, |d| {
        d.validate()?;
        Ok(LinkedDoc {
            id: d.id.clone(),
            year: d.year,
            terms: link_document(d, mode, table, threshold)?,
        })
    })
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub splits: CorpusSplits,
    /// documents left empty by filtering
    pub dropped: usize,
}

/// Settings for turning linked documents into bag-of-words splits.
#[derive(Debug, Clone)]
pub struct PrepareOptions<'a> {
    pub stopwords: &'a HashSet<String>,
    pub max_doc_freq: f64,
    pub slice_start: Option<i64>,
    pub slice_span: i64,
    pub ratios: (usize, usize, usize),
    pub split_seed: u64,
}

/// Builds the vocabulary, assigns time slices and splits the corpus.
pub fn prepare(linked: &[LinkedDoc], opts: &PrepareOptions) -> Result<Prepared> {
    let seqs: Vec<Vec<Term>> = linked.iter().map(|d| d.terms.clone()).collect();
    let vocab = build_vocabulary(&seqs, opts.max_doc_freq, opts.stopwords)?;
    let start = opts.slice_start.or_else(|| linked.iter().filter_map(|d| d.year).min());
    let bows = par::try_map(linked, |d| {
        let slice = match (d.year, start) {
            (Some(y), Some(s)) => Some(assign_time_slice(y, s, opts.slice_span).map_err(|e| {
                Error::Data(format!("document {}: {e}", d.id))
            })?),
            _ => None,
        };
        Ok::<_, Error>(to_bow(&d.id, &d.terms, &vocab, slice))
    })?;
    let kept: Vec<_> = bows.into_iter().flatten().collect();
    let dropped = linked.len() - kept.len();
    let splits = split_corpus(kept, opts.ratios, opts.split_seed)?;
    Ok(Prepared { vocab, splits, dropped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSummary {
    pub size: usize,
    pub entities: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub model: ModelKind,
    pub linker: LinkerMode,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub vocabulary: VocabSummary,
    pub splits: [usize; 3],
    pub dropped_documents: usize,
    pub embedding_fallbacks: usize,
    pub perplexity: f64,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub eval: PerplexityResult,
    pub report: TopicReport,
    pub output_dir: PathBuf,
}

fn write(dir: &Path, name: &str, bytes: &[u8], artifacts: &mut BTreeMap<String, String>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    artifacts.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

fn record(dir: &Path, name: &str, artifacts: &mut BTreeMap<String, String>) -> Result<()> {
    artifacts.insert(name.to_string(), sha256_file(&dir.join(name))?);
    Ok(())
}

/// Inputs loaded and linked, vocabulary built and splits cut.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub prepared: Prepared,
    /// SHA-256 of every input file, keyed by role
    pub inputs: BTreeMap<String, String>,
}

/// Validates `cfg`, reads its inputs and runs the prepare and link stages.
/// The embedding file is checked and hashed too, since a full run needs it.
pub fn prepare_run(cfg: &RunConfig) -> std::result::Result<PreparedRun, StageError> {
    prepare_inputs(cfg, true)
}

/// As [`prepare_run`], without requiring the embedding file.
pub fn prepare_corpus(cfg: &RunConfig) -> std::result::Result<PreparedRun, StageError> {
    prepare_inputs(cfg, false)
}

fn prepare_inputs(cfg: &RunConfig, with_embeddings: bool) -> std::result::Result<PreparedRun, StageError> {
    use Stage::*;
    cfg.validate_inputs(with_embeddings).at(Prepare)?;
    let mut inputs = BTreeMap::new();
    for (name, p) in cfg.inputs(with_embeddings) {
        inputs.insert(name.to_string(), sha256_file(&p).at(Prepare)?);
    }
    let docs = read_corpus_jsonl(&cfg.resolve(&cfg.corpus)).at(Prepare)?;
    let stopwords = match &cfg.stopwords {
        Some(p) => read_stopwords(&cfg.resolve(p)).at(Prepare)?,
        None => HashSet::new(),
    };
    let table = load_alias_table(cfg).at(Prepare)?;
    log::info!("prepare: {} documents", docs.len());

    let linked = link_corpus(&docs, cfg.linker, table.as_ref(), cfg.link_threshold).at(Link)?;
    let [a, b, c] = cfg.split_ratios;
    let opts = PrepareOptions {
        stopwords: &stopwords,
        max_doc_freq: cfg.max_doc_freq,
        slice_start: cfg.slice_start,
        slice_span: cfg.slice_span,
        ratios: (a, b, c),
        split_seed: cfg.split_seed,
    };
    let prepared = prepare(&linked, &opts).at(Link)?;
    let (vocab, splits) = (&prepared.vocab, &prepared.splits);
    log::info!(
        "link: vocabulary of {} terms ({} entities), splits {}/{}/{}",
        vocab.len(),
        vocab.n_entities(),
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    );
    Ok(PreparedRun { prepared, inputs })
}

/// Alias table for the configured linker, if it uses one.
pub fn load_alias_table(cfg: &RunConfig) -> Result<Option<AliasTable>> {
    match (&cfg.alias_table, cfg.linker) {
        (Some(p), LinkerMode::Dict | LinkerMode::Gold) => Ok(Some(AliasTable::load(&cfg.resolve(p))?)),
        _ => Ok(None),
    }
}

/// Writes the vocabulary and the three bag-of-words splits into `dir`.
pub fn save_prepared(prepared: &Prepared, dir: &Path, artifacts: &mut BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    prepared.vocab.write(&dir.join("vocab.txt"))?;
    record(dir, "vocab.txt", artifacts)?;
    let s = &prepared.splits;
    for (name, docs) in [("train.jsonl", &s.train), ("valid.jsonl", &s.valid), ("test.jsonl", &s.test)] {
        write_bow_jsonl(&dir.join(name), docs)?;
        record(dir, name, artifacts)?;
    }
    Ok(())
}

/// Loads the embedding file restricted to the vocabulary and builds rho.
pub fn embed(cfg: &RunConfig, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    let keep: HashSet<String> = vocab.terms().iter().map(|t| store_key(t).to_string()).collect();
    let store = EmbeddingStore::load(&cfg.resolve(&cfg.embeddings), cfg.embed_dim, Some(&keep))?;
    let emb = build_rho(vocab, &store, cfg.max_fallback)?;
    log::info!("embed: L = {}, {} fallback columns", emb.dim(), emb.fallback_count());
    Ok(emb)
}

/// Runs the whole pipeline for one configuration.
///
/// Artifacts written before a failing stage are left in place.
pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<RunSummary, StageError> {
    use Stage::*;
    let PreparedRun { prepared, inputs } = prepare_run(cfg)?;
    let out = cfg.output();
    let mut artifacts = BTreeMap::new();
    save_prepared(&prepared, &out, &mut artifacts).at(Link)?;
    let (vocab, splits) = (&prepared.vocab, &prepared.splits);

    let emb = embed(cfg, vocab).at(Embed)?;

    let model = train(cfg.model, splits, emb.rho.view(), Some(vocab), &cfg.train).at(Train)?;
    model.save(&out.join("model.ckpt")).at(Train)?;
    record(&out, "model.ckpt", &mut artifacts).at(Train)?;
    log::info!("train: best epoch {} of {}", model.log.best_epoch, model.log.epochs.len());

    let eval = document_completion_perplexity(&model, &splits.test, cfg.eval_seed).at(Eval)?;
    let json = to_stable_json(&eval).at(Eval)?;
    write(&out, "eval.json", json.as_bytes(), &mut artifacts).at(Eval)?;
    log::info!("eval: test perplexity {:.4}", eval.perplexity);

    let report = model_report(&model, cfg.top_n, cfg.train.seed, &vocab.fingerprint()).at(Report)?;
    let json = to_stable_json(&report).at(Report)?;
    write(&out, "report.json", json.as_bytes(), &mut artifacts).at(Report)?;
    write(&out, "report.txt", render_table(&report).as_bytes(), &mut artifacts).at(Report)?;

    let manifest = Manifest {
        config_sha256: cfg.hash().at(Report)?,
        model: cfg.model,
        linker: cfg.linker,
        seed: cfg.train.seed,
        inputs,
        vocabulary: VocabSummary {
            size: vocab.len(),
            entities: vocab.n_entities(),
            fingerprint: vocab.fingerprint(),
        },
        splits: [splits.train.len(), splits.valid.len(), splits.test.len()],
        dropped_documents: prepared.dropped,
        embedding_fallbacks: emb.fallback_count(),
        perplexity: eval.perplexity,
        artifacts,
    };
    let mut json = to_stable_json(&manifest).at(Report)?;
    json.push('\n');
    let p = out.join("manifest.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e)).at(Report)?;
    Ok(RunSummary {
        manifest,
        eval,
        report,
        output_dir: out,
    })
}

/// Transition report for dynamic models, plain topic report otherwise.
pub fn model_report(model: &TrainedModel, top_n: usize, seed: u64, corpus_hash: &str) -> Result<TopicReport> {
    let meta = ReportMeta {
        seed,
        corpus_hash: corpus_hash.to_string(),
    };
    if model.is_dynamic() {
        transition_report(model, top_n, &meta)
    } else {
        topic_report(model, top_n, &meta)
    }
}

/// Runs one isolated pipeline per training seed (in parallel) under
/// `output_dir/seed-<s>` and aggregates the test perplexities.
pub fn run_seeds(
    cfg: &RunConfig,
    seeds: &[u64],
) -> std::result::Result<(Vec<RunSummary>, SeedAggregate), StageError> {
    let configs: Vec<RunConfig> = seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.train.seed = s;
            c.output_dir = cfg.output_dir.join(format!("seed-{s}"));
            c
        })
        .collect();
    let runs = par::try_map(&configs, run_pipeline)?;
    let values: Vec<f64> = runs.iter().map(|r| r.eval.perplexity).collect();
    let agg = aggregate_ci(&values).at(Stage::Eval)?;
    let out = cfg.output();
    let json = to_stable_json(&agg).at(Stage::Eval)?;
    let p = out.join("aggregate.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e)).at(Stage::Eval)?;
    Ok((runs, agg))
}

/// Parses `a..b` (inclusive) or a comma-separated list of seeds.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid seed list {s:?} (expected e.g. 1..8 or 1,2,3)"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

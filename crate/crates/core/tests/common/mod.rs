//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use eetm_core::corpus::{write_corpus_jsonl, RawDocument};
use eetm_core::embedding::EmbeddingStore;
use eetm_core::linker::LinkerMode;
use eetm_core::model::{ModelKind, TrainConfig};
use eetm_core::pipeline::RunConfig;
use eetm_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;

pub const DIM: usize = 16;
const CLUSTER_WORDS: usize = 15;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Writes a two-theme corpus where "apple" names a company in one theme and a
/// fruit in the other, together with an alias table, stopwords and
/// embeddings, into `dir`. Returns a config for the entity-aware run.
///
/// Company documents say "apple inc" ("inc" is a stopword), fruit documents
/// say "apple", so the word-only and entity-aware pipelines see the same
/// number of terms per document.
pub fn homograph_fixture(dir: &Path, seed: u64, n_docs: usize) -> RunConfig {
    let mut r = rng::stream(seed, "homograph-fixture", 0);
    let mut docs = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let tech = r.random_bool(0.5);
        let prefix = if tech { "tech" } else { "fruit" };
        let other = if tech { "fruit" } else { "tech" };
        let mentions_apple = r.random_bool(0.6);
        let mut words = Vec::new();
        while words.len() < 60 {
            let u: f64 = r.random();
            if mentions_apple && u < 0.2 {
                words.push(if tech { "apple inc" } else { "apple" }.to_string());
            } else if u < 0.93 {
                words.push(format!("{prefix}{}", r.random_range(0..CLUSTER_WORDS)));
            } else {
                words.push(format!("{other}{}", r.random_range(0..CLUSTER_WORDS)));
            }
        }
        docs.push(RawDocument {
            id: format!("d{i:04}"),
            text: words.join(" "),
            year: None,
            gold_spans: Vec::new(),
        });
    }
    write_corpus_jsonl(&dir.join("corpus.jsonl"), &docs).unwrap();
    fs::write(
        dir.join("aliases.tsv"),
        "apple inc\tApple Inc.\t0.95\napple\tApple (fruit)\t0.6\napple\tApple Inc.\t0.4\n",
    )
    .unwrap();
    fs::write(dir.join("stopwords.txt"), "inc\nthe\n").unwrap();

    // two well separated theme directions; words scatter around theirs
    let mut er = rng::stream(seed, "homograph-embeddings", 0);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| er.sample::<f64, _>(StandardNormal)).collect() };
    let c_tech = unit(normal(DIM));
    let c_fruit = unit(normal(DIM));
    let mut store = EmbeddingStore::new(DIM);
    for (prefix, c) in [("tech", &c_tech), ("fruit", &c_fruit)] {
        for j in 0..CLUSTER_WORDS {
            let noise = normal(DIM);
            let v: Vec<f64> = c.iter().zip(&noise).map(|(a, e)| 3.0 * a + 0.5 * e).collect();
            store.insert(format!("{prefix}{j}"), v).unwrap();
        }
    }
    let mid: Vec<f64> = c_tech.iter().zip(&c_fruit).map(|(a, b)| 3.0 * (a + b) / 2f64.sqrt()).collect();
    store.insert("apple", mid).unwrap();
    store.insert("ENTITY/Apple_Inc.", c_tech.iter().map(|x| 3.0 * x).collect()).unwrap();
    store.insert("ENTITY/Apple_(fruit)", c_fruit.iter().map(|x| 3.0 * x).collect()).unwrap();
    store.save(&dir.join("embeddings.txt")).unwrap();

    RunConfig {
        corpus: "corpus.jsonl".into(),
        linker: LinkerMode::Dict,
        alias_table: Some("aliases.tsv".into()),
        stopwords: Some("stopwords.txt".into()),
        embeddings: "embeddings.txt".into(),
        embed_dim: Some(DIM),
        split_seed: seed,
        model: ModelKind::Etm,
        eval_seed: seed,
        output_dir: "out-entity".into(),
        train: small_train(2, seed),
        base_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

/// The same run with linking switched off.
pub fn word_only(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        linker: LinkerMode::None,
        output_dir: PathBuf::from("out-words"),
        ..cfg.clone()
    }
}

/// Training settings sized for small test corpora.
pub fn small_train(topics: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        topics,
        hidden: 64,
        batch_size: 64,
        max_epochs: 400,
        patience: 10,
        seed,
        ..TrainConfig::default()
    }
}

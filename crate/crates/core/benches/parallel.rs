//! Rayon pool versus single-threaded execution of the hot paths.
//!
//! `cargo bench -p eetm-core` compares both; build with
//! `--no-default-features` to measure the pure sequential library.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eetm_core::corpus::BowDocument;
use eetm_core::eval::document_completion_perplexity;
use eetm_core::model::detm::{elbo_detm, DetmNoise};
use eetm_core::model::etm::{draw_doc_noise, elbo_etm};
use eetm_core::model::sampler::sample_etm;
use eetm_core::model::{DetmHyper, DetmParams, EtmParams, ModelDims, ModelKind, TrainedModel, TrainingLog};
use eetm_core::{par, rng};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use std::hint::black_box;

const V: usize = 2000;
const K: usize = 20;
const L: usize = 100;
const HIDDEN: usize = 128;
const SLICES: usize = 4;

fn fixture() -> (Array2<f64>, Array2<f64>, Vec<BowDocument>) {
    let mut r = rng::stream(0, "bench", 0);
    let rho = Array2::from_shape_fn((L, V), |_| 0.3 * r.sample::<f64, _>(StandardNormal));
    let alpha = Array2::from_shape_fn((K, L), |_| r.sample::<f64, _>(StandardNormal));
    let corpus = sample_etm(rho.view(), alpha.view(), &vec![200; 256], 0).unwrap();
    let mut docs = corpus.bow();
    for (i, d) in docs.iter_mut().enumerate() {
        d.slice = Some(i % SLICES);
    }
    (rho, alpha, docs)
}

fn modes<F: Fn() + Sync>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("rayon", par::threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(|| par::sequential(&f)));
    g.finish();
}

fn benches(c: &mut Criterion) {
    let (rho, alpha, docs) = fixture();
    let batch: Vec<&BowDocument> = docs.iter().collect();

    let etm = EtmParams::init(V, K, L, HIDDEN, 1);
    let noise = draw_doc_noise(&batch, K, 1, 0);
    modes(c, "etm_batch_elbo", || {
        black_box(elbo_etm(&batch, &etm, rho.view(), &noise).unwrap());
    });

    let detm = DetmParams::init(V, K, L, SLICES, HIDDEN, DetmHyper::default(), 1);
    let dnoise = DetmNoise::draw(&batch, &detm.layout, 1, 0);
    modes(c, "detm_batch_elbo", || {
        black_box(elbo_detm(&batch, &detm, rho.view(), &dnoise, 10_000).unwrap());
    });

    let model = TrainedModel {
        kind: ModelKind::Etm,
        dims: ModelDims { vocab: V, topics: K, embed: L, slices: 1, hidden: HIDDEN },
        hyper: None,
        beta: vec![etm.beta(rho.view()).unwrap()],
        params: etm.data.clone(),
        log: TrainingLog::default(),
        vocab_fingerprint: String::new(),
        vocab: Vec::new(),
    };
    modes(c, "completion_perplexity", || {
        black_box(document_completion_perplexity(&model, &docs, 0).unwrap());
    });

    modes(c, "etm_sampling", || {
        black_box(sample_etm(rho.view(), alpha.view(), &vec![200; 256], 3).unwrap());
    });
}

criterion_group!(parallel, benches);
criterion_main!(parallel);

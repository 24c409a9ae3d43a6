//! Minibatch stochastic variational inference with early stopping on
//! validation perplexity.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::detm::{elbo_detm, DetmHyper, DetmNoise, DetmParams};
use super::etm::{draw_doc_noise, elbo_etm, ElboOutput, EtmParams};
use super::optim::{clip_grad_norm, Adam, AdamConfig};
use super::{ModelDims, ModelKind, TrainedModel};
use crate::corpus::{BowDocument, CorpusSplits, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::document_completion_perplexity;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub topics: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// epochs without validation improvement tolerated before stopping
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub hyper: DetmHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            topics: 10,
            hidden: 256,
            batch_size: 256,
            max_epochs: 400,
            patience: 10,
            seed: 0,
            clip_norm: 2.0,
            adam: AdamConfig::default(),
            hyper: DetmHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.topics == 0 {
            return bad("topics");
        }
        if self.hidden == 0 {
            return bad("hidden");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm");
        }
        if !(self.adam.lr > 0.0 && self.adam.eps > 0.0) {
            return bad("learning rate and epsilon");
        }
        if !((0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// sum of minibatch ELBO estimates (an estimate of the full training ELBO)
    pub train_elbo: f64,
    pub valid_perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept
    pub best_epoch: usize,
    pub stopped_early: bool,
}

enum Model {
    Etm(EtmParams),
    Detm(DetmParams),
}

impl Model {
    fn data(&self) -> &[f64] {
        match self {
            Model::Etm(p) => &p.data,
            Model::Detm(p) => &p.data,
        }
    }

    fn data_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Model::Etm(p) => &mut p.data,
            Model::Detm(p) => &mut p.data,
        }
    }

    fn elbo(&self, batch: &[&BowDocument], rho: ArrayView2<f64>, n_train: usize, seed: u64, step: u64) -> Result<ElboOutput> {
        match self {
            Model::Etm(p) => {
                let noise = draw_doc_noise(batch, p.topics(), seed, step);
                elbo_etm(batch, p, rho, &noise)
            }
            Model::Detm(p) => {
                let noise = DetmNoise::draw(batch, &p.layout, seed, step);
                elbo_detm(batch, p, rho, &noise, n_train)
            }
        }
    }

    fn snapshot(&self, rho: ArrayView2<f64>, dims: ModelDims) -> Result<TrainedModel> {
        let (kind, beta, hyper) = match self {
            Model::Etm(p) => (ModelKind::Etm, vec![p.beta(rho)?], None),
            Model::Detm(p) => (
                ModelKind::Detm,
                (0..dims.slices).map(|t| p.beta(rho, t)).collect::<Result<Vec<_>>>()?,
                Some(p.hyper),
            ),
        };
        Ok(TrainedModel {
            kind,
            dims,
            hyper,
            params: self.data().to_vec(),
            beta,
            log: TrainingLog::default(),
            vocab_fingerprint: String::new(),
            vocab: Vec::new(),
        })
    }
}

/// Fits a model on `splits.train`, stopping on validation perplexity.
///
/// Each step maximizes the minibatch ELBO (averaged per document) with Adam
/// after clipping the gradient norm. After every epoch the validation
/// perplexity is computed; training stops once it has failed to improve for
/// more than `patience` consecutive epochs, and the parameters of the best
/// epoch are returned.
pub fn train(
    kind: ModelKind,
    splits: &CorpusSplits,
    rho: ArrayView2<f64>,
    vocab: Option<&Vocabulary>,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if splits.train.is_empty() || splits.valid.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let v = rho.ncols();
    if let Some(voc) = vocab {
        if voc.len() != v {
            return Err(Error::Shape(format!(
                "vocabulary has {} terms but rho has {v} columns",
                voc.len()
            )));
        }
    }
    for d in splits.train.iter().chain(&splits.valid) {
        if d.max_term_id().is_some_and(|m| m >= v) {
            return Err(Error::Shape(format!("document {} uses a term id outside rho", d.doc_id)));
        }
    }
    let slices = match kind {
        ModelKind::Etm => 1,
        ModelKind::Detm => {
            if let Some(d) = splits.train.iter().chain(&splits.valid).find(|d| d.slice.is_none()) {
                return Err(Error::Data(format!("document {} has no time slice", d.doc_id)));
            }
            splits.num_slices()
        }
    };
    let dims = ModelDims {
        vocab: v,
        topics: config.topics,
        embed: rho.nrows(),
        slices,
        hidden: config.hidden,
    };
    let mut model = match kind {
        ModelKind::Etm => Model::Etm(EtmParams::init(v, dims.topics, dims.embed, dims.hidden, config.seed)),
        ModelKind::Detm => Model::Detm(DetmParams::init(
            v,
            dims.topics,
            dims.embed,
            slices,
            dims.hidden,
            config.hyper,
            config.seed,
        )),
    };
    let mut adam = Adam::new(model.data().len(), config.adam);
    let n_train = splits.train.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut step: u64 = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng::stream(config.seed, "epoch-order", epoch as u64));
        let mut epoch_elbo = 0.0;
        let mut failed = 0;
        let mut n_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            n_batches += 1;
            step += 1;
            let batch: Vec<&BowDocument> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let out = match model.elbo(&batch, rho, n_train, config.seed, step) {
                Ok(o) if o.grad.iter().all(|g| g.is_finite()) => o,
                Ok(_) | Err(Error::Numerical(_)) => {
                    log::warn!("epoch {epoch}: skipped a minibatch with a non-finite ELBO");
                    failed += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            epoch_elbo += out.elbo;
            // gradient descent on -ELBO / |batch|
            let scale = -1.0 / batch.len() as f64;
            let mut grad: Vec<f64> = out.grad.iter().map(|g| g * scale).collect();
            clip_grad_norm(&mut grad, config.clip_norm);
            adam.step(model.data_mut(), &grad);
        }
        if failed == n_batches {
            return Err(Error::Numerical(format!(
                "ELBO was non-finite for every minibatch of epoch {epoch} (lr {}, clip {})",
                config.adam.lr, config.clip_norm
            )));
        }
        let snap = model.snapshot(rho, dims)?;
        let ppl = document_completion_perplexity(&snap, &splits.valid, config.seed)?.perplexity;
        if !ppl.is_finite() {
            return Err(Error::Numerical(format!("validation perplexity is {ppl} at epoch {epoch}")));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_elbo: epoch_elbo,
            valid_perplexity: ppl,
        });
        log::debug!("epoch {epoch}: elbo {epoch_elbo:.4} valid ppl {ppl:.4}");
        if best.as_ref().is_none_or(|(b, _)| ppl < *b) {
            best = Some((ppl, model.data().to_vec()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }

    let (_, params) = best.expect("at least one epoch ran");
    *model.data_mut() = params;
    let mut out = model.snapshot(rho, dims)?;
    out.log = log;
    if let Some(voc) = vocab {
        out.vocab_fingerprint = voc.fingerprint();
        out.vocab = voc.terms().iter().map(|t| t.surface().to_string()).collect();
    }
    Ok(out)
}

//! Generative topic models and their variational training.

pub mod checkpoint;
pub mod detm;
pub mod doc;
pub mod encoder;
pub mod etm;
pub mod math;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::BowDocument;
use crate::error::{Error, Result};
pub use detm::{DetmHyper, DetmParams};
use encoder::{normalized_input, EncoderLayout};
pub use etm::{EtmParams, ElboOutput};
use math::softmax;
pub use train::{train, EpochRecord, TrainConfig, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Etm,
    Detm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Etm => "etm",
            ModelKind::Detm => "detm",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "etm" => Ok(ModelKind::Etm),
            "detm" => Ok(ModelKind::Detm),
            other => Err(Error::Config(format!("unknown model {other:?} (expected etm or detm)"))),
        }
    }
}

/// Shapes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub topics: usize,
    pub embed: usize,
    pub slices: usize,
    pub hidden: usize,
}

/// A fitted model: parameters, topic snapshot and training history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub hyper: Option<DetmHyper>,
    pub params: Vec<f64>,
    /// one K x V matrix per slice; a single matrix for static models
    pub beta: Vec<Array2<f64>>,
    pub log: TrainingLog,
    pub vocab_fingerprint: String,
    /// vocabulary surfaces in id order
    pub vocab: Vec<String>,
}

impl TrainedModel {
    fn encoder(&self) -> EncoderLayout {
        let d = self.dims;
        match self.kind {
            ModelKind::Etm => etm::EtmLayout::new(d.vocab, d.topics, d.embed, d.hidden).enc,
            ModelKind::Detm => detm::DetmLayout::new(d.vocab, d.topics, d.embed, d.slices, d.hidden).enc,
        }
    }

    /// Checks internal consistency: parameter count, beta shapes and rows.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let expected = match self.kind {
            ModelKind::Etm => etm::EtmLayout::new(d.vocab, d.topics, d.embed, d.hidden).total,
            ModelKind::Detm => detm::DetmLayout::new(d.vocab, d.topics, d.embed, d.slices, d.hidden).total,
        };
        if self.params.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameters stored but {expected} expected",
                self.params.len()
            )));
        }
        let n_beta = if self.kind == ModelKind::Etm { 1 } else { d.slices };
        if self.beta.len() != n_beta || self.beta.iter().any(|b| b.dim() != (d.topics, d.vocab)) {
            return Err(Error::Shape("topic snapshot has the wrong shape".into()));
        }
        if !self.vocab.is_empty() && self.vocab.len() != d.vocab {
            return Err(Error::Shape("stored vocabulary does not match V".into()));
        }
        Ok(())
    }

    pub fn is_dynamic(&self) -> bool {
        self.kind == ModelKind::Detm
    }

    pub fn num_slices(&self) -> usize {
        self.beta.len()
    }

    /// Topics used for a document of the given slice.
    pub fn beta_for(&self, slice: Option<usize>) -> Result<&Array2<f64>> {
        match self.kind {
            ModelKind::Etm => Ok(&self.beta[0]),
            ModelKind::Detm => {
                let t = slice.ok_or_else(|| Error::Data("dynamic model needs a time slice".into()))?;
                self.beta
                    .get(t)
                    .ok_or_else(|| Error::Data(format!("slice {t} out of range {}", self.beta.len())))
            }
        }
    }

    /// Encoder mean and log-variance for a bag of words.
    pub fn encode(&self, doc: &BowDocument) -> Result<(Vec<f64>, Vec<f64>)> {
        let enc = self.encoder();
        let input = match self.kind {
            ModelKind::Etm => normalized_input(&doc.counts),
            ModelKind::Detm => {
                let t = doc
                    .slice
                    .ok_or_else(|| Error::Data(format!("document {} has no time slice", doc.doc_id)))?;
                if t >= self.dims.slices {
                    return Err(Error::Data(format!("slice {t} out of range {}", self.dims.slices)));
                }
                let lay = detm::DetmLayout::new(self.dims.vocab, self.dims.topics, self.dims.embed, self.dims.slices, self.dims.hidden);
                detm::detm_input(doc, self.dims.vocab, lay.eta_mean.row(&self.params, t))
            }
        };
        let pass = enc.forward(&self.params, &input)?;
        Ok((pass.mu, pass.logvar))
    }

    /// Point estimate of the topic proportions: `softmax(mu)`.
    pub fn infer_theta(&self, doc: &BowDocument) -> Result<Vec<f64>> {
        Ok(softmax(&self.encode(doc)?.0))
    }
}

//! Embedded topic model: point-estimated topic embeddings, amortized
//! logistic-normal topic proportions.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::doc::{document_pass, DocPass};
use super::encoder::{normalized_input, EncoderLayout};
use super::math::{beta_matrix, softmax_backward};
use super::params::{Block, LayoutBuilder};
use crate::corpus::BowDocument;
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EtmLayout {
    /// K x L topic embeddings
    pub alpha: Block,
    pub enc: EncoderLayout,
    pub total: usize,
}

impl EtmLayout {
    pub fn new(vocab: usize, topics: usize, embed: usize, hidden: usize) -> Self {
        let mut b = LayoutBuilder::default();
        let alpha = b.block(topics, embed);
        let enc = EncoderLayout::new(&mut b, vocab, hidden, topics);
        EtmLayout {
            alpha,
            enc,
            total: b.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtmParams {
    pub layout: EtmLayout,
    pub data: Vec<f64>,
}

impl EtmParams {
    pub fn zeros(vocab: usize, topics: usize, embed: usize, hidden: usize) -> Self {
        let layout = EtmLayout::new(vocab, topics, embed, hidden);
        EtmParams {
            data: vec![0.0; layout.total],
            layout,
        }
    }

    pub fn init(vocab: usize, topics: usize, embed: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(vocab, topics, embed, hidden);
        let mut r = rng::stream(seed, "etm-init", 0);
        let bound = 1.0 / (embed as f64).sqrt();
        for x in p.layout.alpha.slice_mut(&mut p.data) {
            *x = r.random_range(-bound..bound);
        }
        p.layout.enc.init(&mut p.data, &mut r);
        p
    }

    pub fn topics(&self) -> usize {
        self.layout.enc.topics
    }

    pub fn vocab(&self) -> usize {
        self.layout.enc.input
    }

    pub fn alpha(&self) -> ArrayView2<'_, f64> {
        self.layout.alpha.view(&self.data)
    }

    pub fn beta(&self, rho: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_rho(rho, self.vocab(), self.layout.alpha.cols)?;
        beta_matrix(rho, self.alpha())
    }
}

pub(crate) fn check_rho(rho: ArrayView2<f64>, vocab: usize, embed: usize) -> Result<()> {
    if rho.ncols() != vocab || rho.nrows() != embed {
        return Err(Error::Shape(format!(
            "rho is {}x{} but the model expects {embed}x{vocab}",
            rho.nrows(),
            rho.ncols()
        )));
    }
    Ok(())
}

/// ELBO estimate with its gradient with respect to the flat parameters.
#[derive(Debug, Clone)]
pub struct ElboOutput {
    pub elbo: f64,
    pub recon: f64,
    pub kl_local: f64,
    pub kl_global: f64,
    pub grad: Vec<f64>,
}

/// Standard-normal draws for each document, keyed on `(seed, doc_id, step)`.
pub fn draw_doc_noise(batch: &[&BowDocument], topics: usize, seed: u64, step: u64) -> Vec<Vec<f64>> {
    par::map(batch, |d| {
        let mut r = rng::doc_stream(seed, &d.doc_id, step);
        (0..topics).map(|_| r.sample(StandardNormal)).collect()
    })
}

/// Folds the `d elbo / d beta` contributions of one document into `g`.
pub(crate) fn add_beta_grad(g: &mut Array2<f64>, doc: &BowDocument, pass: &DocPass) {
    let k_topics = g.nrows();
    for (i, &v) in doc.counts.keys().enumerate() {
        for k in 0..k_topics {
            g[[k, v]] += pass.d_beta[i * k_topics + k];
        }
    }
}

/// Pulls a gradient on `beta = softmax_rows(alpha rho)` back to `alpha`.
pub(crate) fn beta_grad_to_alpha(beta: &Array2<f64>, g: &Array2<f64>, rho: ArrayView2<f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(beta.raw_dim());
    for ((b, gr), mut out) in beta
        .axis_iter(Axis(0))
        .zip(g.axis_iter(Axis(0)))
        .zip(dz.axis_iter_mut(Axis(0)))
    {
        let d = softmax_backward(b.as_slice().expect("contiguous"), gr.as_slice().expect("contiguous"));
        out.assign(&ndarray::ArrayView1::from(&d));
    }
    dz.dot(&rho.t())
}

/// ELBO of a minibatch under fixed noise draws.
///
/// `sum_d [recon_d - KL(q(delta_d) || N(0, I))]`; gradients cover the
/// topic embeddings and every encoder weight.
pub fn elbo_etm(
    batch: &[&BowDocument],
    params: &EtmParams,
    rho: ArrayView2<f64>,
    noise: &[Vec<f64>],
) -> Result<ElboOutput> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if noise.len() != batch.len() {
        return Err(Error::Shape("one noise vector per document required".into()));
    }
    let k_topics = params.topics();
    let beta = params.beta(rho)?;
    let zeros = vec![0.0; k_topics];
    let enc = &params.layout.enc;
    let items: Vec<(&BowDocument, &Vec<f64>)> = batch.iter().copied().zip(noise).collect();
    let passes = par::try_map(&items, |(doc, eps)| {
        let input = normalized_input(&doc.counts);
        let pass = document_pass(enc, &params.data, &input, doc, beta.view(), eps, &zeros, 1.0)?;
        Ok::<_, Error>((input, pass))
    })?;

    let mut grad = vec![0.0; params.data.len()];
    let mut g_beta = Array2::zeros(beta.raw_dim());
    let (mut recon, mut kl) = (0.0, 0.0);
    for ((doc, _), (input, pass)) in items.iter().zip(&passes) {
        recon += pass.recon;
        kl += pass.kl;
        enc.accumulate(&mut grad, input, &pass.enc, &pass.d_pre, &pass.d_mu, &pass.d_logvar);
        add_beta_grad(&mut g_beta, doc, pass);
    }
    let d_alpha = beta_grad_to_alpha(&beta, &g_beta, rho);
    for (g, d) in params.layout.alpha.slice_mut(&mut grad).iter_mut().zip(d_alpha.iter()) {
        *g += d;
    }
    let elbo = recon - kl;
    if !elbo.is_finite() {
        return Err(Error::Numerical("non-finite ELBO".into()));
    }
    Ok(ElboOutput {
        elbo,
        recon,
        kl_local: kl,
        kl_global: 0.0,
        grad,
    })
}

//! Per-document ELBO term shared by the static and dynamic models.
//!
//! For one document with counts `x`, encoder output `(mu, logvar)`, noise
//! `eps` and topics `beta`:
//!
//! ```text
//! delta = mu + exp(logvar / 2) * eps,  theta = softmax(delta)
//! recon = sum_v x_v ln max(theta^T beta[:, v], 1e-12)
//! kl    = KL(N(mu, diag exp(logvar)) || N(prior_mean, prior_var I))
//! ```
//!
//! The pass returns `recon - kl` together with everything the caller needs to
//! fold this document's gradient into the batch gradient.

use ndarray::ArrayView2;

use super::encoder::{EncoderLayout, EncoderPass};
use super::math::{log_var_floor, softmax, softmax_backward, PROB_FLOOR};
use crate::corpus::BowDocument;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DocPass {
    pub recon: f64,
    pub kl: f64,
    pub enc: EncoderPass,
    pub d_pre: Vec<f64>,
    pub d_mu: Vec<f64>,
    pub d_logvar: Vec<f64>,
    /// `d elbo / d beta[k, v]` for the document's terms, `n_terms x K`
    /// in count order.
    pub d_beta: Vec<f64>,
    /// `d elbo / d prior_mean`
    pub d_prior_mean: Vec<f64>,
    pub theta: Vec<f64>,
}

impl DocPass {
    pub fn elbo(&self) -> f64 {
        self.recon - self.kl
    }
}

#[allow(clippy::too_many_arguments)]
pub fn document_pass(
    enc: &EncoderLayout,
    data: &[f64],
    input: &[(usize, f64)],
    doc: &BowDocument,
    beta: ArrayView2<f64>,
    eps: &[f64],
    prior_mean: &[f64],
    prior_var: f64,
) -> Result<DocPass> {
    let k_topics = enc.topics;
    let pass = enc.forward(data, input)?;
    let floor = log_var_floor();

    let mut delta = vec![0.0; k_topics];
    let mut sd = vec![0.0; k_topics];
    for k in 0..k_topics {
        let lv = pass.logvar[k].max(floor);
        sd[k] = (0.5 * lv).exp();
        delta[k] = pass.mu[k] + sd[k] * eps[k];
    }
    let theta = softmax(&delta);

    let mut recon = 0.0;
    let mut d_theta = vec![0.0; k_topics];
    let mut d_beta = Vec::with_capacity(doc.counts.len() * k_topics);
    for (&v, &c) in &doc.counts {
        if v >= beta.ncols() {
            return Err(Error::Shape(format!(
                "document {} uses term id {v} outside a vocabulary of {}",
                doc.doc_id,
                beta.ncols()
            )));
        }
        let x = c as f64;
        let p: f64 = (0..k_topics).map(|k| theta[k] * beta[[k, v]]).sum();
        let g = if p > PROB_FLOOR {
            recon += x * p.ln();
            x / p
        } else {
            recon += x * PROB_FLOOR.ln();
            0.0
        };
        for k in 0..k_topics {
            d_theta[k] += g * beta[[k, v]];
            d_beta.push(g * theta[k]);
        }
    }
    let d_delta = softmax_backward(&theta, &d_theta);

    let mut kl = 0.0;
    let mut d_mu = vec![0.0; k_topics];
    let mut d_logvar = vec![0.0; k_topics];
    let mut d_prior_mean = vec![0.0; k_topics];
    let ln_prior = prior_var.ln();
    for k in 0..k_topics {
        let clamped = pass.logvar[k] < floor;
        let lv = pass.logvar[k].max(floor);
        let var = lv.exp();
        let diff = pass.mu[k] - prior_mean[k];
        kl += 0.5 * (var / prior_var + diff * diff / prior_var - 1.0 + ln_prior - lv);
        d_mu[k] = d_delta[k] - diff / prior_var;
        d_prior_mean[k] = diff / prior_var;
        if !clamped {
            d_logvar[k] = d_delta[k] * 0.5 * sd[k] * eps[k] - 0.5 * (var / prior_var - 1.0);
        }
    }
    let d_pre = enc.backward(data, &pass, &d_mu, &d_logvar);
    Ok(DocPass {
        recon,
        kl,
        enc: pass,
        d_pre,
        d_mu,
        d_logvar,
        d_beta,
        d_prior_mean,
        theta,
    })
}

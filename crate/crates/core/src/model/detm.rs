//! Dynamic embedded topic model.
//!
//! Topic embeddings `alpha_k^(t)` and proportion means `eta_t` follow
//! Gaussian random walks across time slices. Both get mean-field diagonal
//! Gaussian posteriors; each document's proportions get an amortized
//! logistic-normal posterior whose encoder also sees the current mean of
//! `eta_{t_d}`.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::doc::document_pass;
use super::encoder::{normalized_input, EncoderLayout};
use super::etm::{add_beta_grad, beta_grad_to_alpha, check_rho, ElboOutput};
use super::math::{beta_matrix, log_var_floor};
use super::params::{Block, LayoutBuilder};
use crate::corpus::BowDocument;
use crate::error::{Error, Result};
use crate::{par, rng};

/// Prior variances of the random walks (`sigma2` for topic embeddings,
/// `delta2` for proportion means) and of the per-document proportions
/// around their slice mean (`gamma2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetmHyper {
    pub sigma2: f64,
    pub delta2: f64,
    pub gamma2: f64,
}

impl Default for DetmHyper {
    fn default() -> Self {
        DetmHyper {
            sigma2: 0.005,
            delta2: 0.005,
            gamma2: 1.0,
        }
    }
}

impl DetmHyper {
    pub fn validate(&self) -> Result<()> {
        if self.sigma2 > 0.0 && self.delta2 > 0.0 && self.gamma2 > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("prior variances must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetmLayout {
    pub slices: usize,
    pub topics: usize,
    pub embed: usize,
    pub vocab: usize,
    /// (T*K) x L, row `t*K + k`
    pub alpha_mean: Block,
    pub alpha_logvar: Block,
    /// T x K
    pub eta_mean: Block,
    pub eta_logvar: Block,
    /// input is V normalized counts followed by K entries of eta
    pub enc: EncoderLayout,
    pub total: usize,
}

impl DetmLayout {
    pub fn new(vocab: usize, topics: usize, embed: usize, slices: usize, hidden: usize) -> Self {
        let mut b = LayoutBuilder::default();
        let alpha_mean = b.block(slices * topics, embed);
        let alpha_logvar = b.block(slices * topics, embed);
        let eta_mean = b.block(slices, topics);
        let eta_logvar = b.block(slices, topics);
        let enc = EncoderLayout::new(&mut b, vocab + topics, hidden, topics);
        DetmLayout {
            slices,
            topics,
            embed,
            vocab,
            alpha_mean,
            alpha_logvar,
            eta_mean,
            eta_logvar,
            enc,
            total: b.total(),
        }
    }

    /// K x L block of alpha means for slice `t`.
    pub fn alpha_slice(&self, t: usize) -> Block {
        Block {
            offset: self.alpha_mean.offset + t * self.topics * self.embed,
            rows: self.topics,
            cols: self.embed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetmParams {
    pub layout: DetmLayout,
    pub hyper: DetmHyper,
    pub data: Vec<f64>,
}

impl DetmParams {
    pub fn zeros(vocab: usize, topics: usize, embed: usize, slices: usize, hidden: usize, hyper: DetmHyper) -> Self {
        let layout = DetmLayout::new(vocab, topics, embed, slices, hidden);
        DetmParams {
            data: vec![0.0; layout.total],
            layout,
            hyper,
        }
    }

    pub fn init(
        vocab: usize,
        topics: usize,
        embed: usize,
        slices: usize,
        hidden: usize,
        hyper: DetmHyper,
        seed: u64,
    ) -> Self {
        let mut p = Self::zeros(vocab, topics, embed, slices, hidden, hyper);
        let mut r = rng::stream(seed, "detm-init", 0);
        let lay = p.layout;
        let bound = 1.0 / (embed as f64).sqrt();
        let base: Vec<f64> = (0..topics * embed).map(|_| r.random_range(-bound..bound)).collect();
        for t in 0..slices {
            lay.alpha_slice(t).slice_mut(&mut p.data).copy_from_slice(&base);
        }
        lay.alpha_logvar.slice_mut(&mut p.data).fill(hyper.sigma2.ln());
        lay.eta_logvar.slice_mut(&mut p.data).fill(hyper.delta2.ln());
        lay.enc.init(&mut p.data, &mut r);
        p
    }

    pub fn eta_mean(&self, t: usize) -> &[f64] {
        self.layout.eta_mean.row(&self.data, t)
    }

    /// Topics of slice `t` from the variational means.
    pub fn beta(&self, rho: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        check_rho(rho, self.layout.vocab, self.layout.embed)?;
        if t >= self.layout.slices {
            return Err(Error::Data(format!("slice {t} out of range {}", self.layout.slices)));
        }
        beta_matrix(rho, self.layout.alpha_slice(t).view(&self.data))
    }
}

/// Fixed noise for one ELBO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DetmNoise {
    /// per document, K draws
    pub docs: Vec<Vec<f64>>,
    /// T*K*L draws for the topic-embedding sample
    pub alpha: Vec<f64>,
}

impl DetmNoise {
    pub fn draw(batch: &[&BowDocument], layout: &DetmLayout, seed: u64, step: u64) -> Self {
        let docs = super::etm::draw_doc_noise(batch, layout.topics, seed, step);
        let mut r = rng::stream(seed, "detm-alpha-noise", step);
        let alpha = (0..layout.alpha_mean.len()).map(|_| r.sample(StandardNormal)).collect();
        DetmNoise { docs, alpha }
    }
}

/// Encoder input: normalized counts, then the slice's eta mean.
pub(crate) fn detm_input(doc: &BowDocument, vocab: usize, eta: &[f64]) -> Vec<(usize, f64)> {
    let mut input = normalized_input(&doc.counts);
    input.extend(eta.iter().enumerate().map(|(k, &e)| (vocab + k, e)));
    input
}

/// KL terms of one random-walk chain family.
///
/// `mean`/`logvar` hold `T` rows of width `w`. Returns the KL summed over
/// slices and accumulates `scale * dKL` (negated, since this is subtracted
/// from the ELBO) into the gradient.
fn chain_kl(
    mean: &[f64],
    logvar: &[f64],
    slices: usize,
    width: usize,
    prior_var: f64,
    scale: f64,
    d_mean: &mut [f64],
    d_logvar: &mut [f64],
) -> f64 {
    let floor = log_var_floor();
    let ln_prior = prior_var.ln();
    let mut kl = 0.0;
    for t in 0..slices {
        for i in 0..width {
            let j = t * width + i;
            let clamped = logvar[j] < floor;
            let lv = logvar[j].max(floor);
            let var = lv.exp();
            if t == 0 {
                kl += 0.5 * (var + mean[j] * mean[j] - 1.0 - lv);
                d_mean[j] -= scale * mean[j];
                if !clamped {
                    d_logvar[j] -= scale * 0.5 * (var - 1.0);
                }
            } else {
                let p = j - width;
                let p_clamped = logvar[p] < floor;
                let var_prev = logvar[p].max(floor).exp();
                let diff = mean[j] - mean[p];
                kl += 0.5 * (var / prior_var + diff * diff / prior_var - 1.0 + ln_prior - lv)
                    + var_prev / (2.0 * prior_var);
                d_mean[j] -= scale * diff / prior_var;
                d_mean[p] += scale * diff / prior_var;
                if !clamped {
                    d_logvar[j] -= scale * 0.5 * (var / prior_var - 1.0);
                }
                if !p_clamped {
                    d_logvar[p] -= scale * var_prev / (2.0 * prior_var);
                }
            }
        }
    }
    kl
}

/// ELBO of a minibatch under fixed noise; global KL terms are scaled by
/// `batch.len() / n_train`.
pub fn elbo_detm(
    batch: &[&BowDocument],
    params: &DetmParams,
    rho: ArrayView2<f64>,
    noise: &DetmNoise,
    n_train: usize,
) -> Result<ElboOutput> {
    let lay = &params.layout;
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    check_rho(rho, lay.vocab, lay.embed)?;
    if noise.docs.len() != batch.len() || noise.alpha.len() != lay.alpha_mean.len() {
        return Err(Error::Shape("noise does not match batch and parameters".into()));
    }
    let mut needed = vec![false; lay.slices];
    for d in batch {
        match d.slice {
            Some(t) if t < lay.slices => needed[t] = true,
            Some(t) => {
                return Err(Error::Data(format!(
                    "document {} has slice {t} but the model has {}",
                    d.doc_id, lay.slices
                )))
            }
            None => {
                return Err(Error::Data(format!(
                    "document {} has no time slice",
                    d.doc_id
                )))
            }
        }
    }
    let hyper = params.hyper;
    let floor = log_var_floor();
    let data = &params.data;
    let am = lay.alpha_mean.slice(data);
    let alv = lay.alpha_logvar.slice(data);
    let alpha_sd: Vec<f64> = alv.iter().map(|&s| (0.5 * s.max(floor)).exp()).collect();
    let sample: Vec<f64> = (0..am.len()).map(|i| am[i] + alpha_sd[i] * noise.alpha[i]).collect();
    let block = lay.topics * lay.embed;
    let betas: Vec<Option<Array2<f64>>> = (0..lay.slices)
        .map(|t| {
            needed[t]
                .then(|| {
                    let a = ArrayView2::from_shape((lay.topics, lay.embed), &sample[t * block..(t + 1) * block])
                        .expect("slice block");
                    beta_matrix(rho, a)
                })
                .transpose()
        })
        .collect::<Result<_>>()?;

    let enc = &lay.enc;
    let items: Vec<(&BowDocument, &Vec<f64>)> = batch.iter().copied().zip(&noise.docs).collect();
    let passes = par::try_map(&items, |(doc, eps)| {
        let t = doc.slice.expect("checked above");
        let eta = params.eta_mean(t);
        let input = detm_input(doc, lay.vocab, eta);
        let beta = betas[t].as_ref().expect("needed slice");
        let pass = document_pass(enc, data, &input, doc, beta.view(), eps, eta, hyper.gamma2)?;
        Ok::<_, Error>((input, pass))
    })?;

    let mut grad = vec![0.0; data.len()];
    let mut g_beta: Vec<Option<Array2<f64>>> = betas
        .iter()
        .map(|b| b.as_ref().map(|b| Array2::zeros(b.raw_dim())))
        .collect();
    let (mut recon, mut kl_local) = (0.0, 0.0);
    for ((doc, _), (input, pass)) in items.iter().zip(&passes) {
        let t = doc.slice.expect("checked above");
        recon += pass.recon;
        kl_local += pass.kl;
        enc.accumulate(&mut grad, input, &pass.enc, &pass.d_pre, &pass.d_mu, &pass.d_logvar);
        add_beta_grad(g_beta[t].as_mut().expect("needed slice"), doc, pass);
        let row = lay.eta_mean.offset + t * lay.topics;
        for k in 0..lay.topics {
            grad[row + k] += pass.d_prior_mean[k] + enc.input_grad(data, &pass.d_pre, lay.vocab + k);
        }
    }

    for t in 0..lay.slices {
        let (Some(beta), Some(g)) = (&betas[t], &g_beta[t]) else {
            continue;
        };
        let d_sample = beta_grad_to_alpha(beta, g, rho);
        for (i, d) in d_sample.iter().enumerate() {
            let j = t * block + i;
            grad[lay.alpha_mean.offset + j] += d;
            if alv[j] >= floor {
                grad[lay.alpha_logvar.offset + j] += d * 0.5 * alpha_sd[j] * noise.alpha[j];
            }
        }
    }

    let scale = batch.len() as f64 / n_train.max(1) as f64;
    let (gm, rest) = grad.split_at_mut(lay.alpha_logvar.offset);
    let kl_alpha = chain_kl(
        am,
        alv,
        lay.slices,
        block,
        hyper.sigma2,
        scale,
        &mut gm[lay.alpha_mean.range()],
        &mut rest[..lay.alpha_logvar.len()],
    );
    let (gm, rest) = grad.split_at_mut(lay.eta_logvar.offset);
    let kl_eta = chain_kl(
        lay.eta_mean.slice(data),
        lay.eta_logvar.slice(data),
        lay.slices,
        lay.topics,
        hyper.delta2,
        scale,
        &mut gm[lay.eta_mean.range()],
        &mut rest[..lay.eta_logvar.len()],
    );
    let kl_global = scale * (kl_alpha + kl_eta);
    let elbo = recon - kl_local - kl_global;
    if !elbo.is_finite() {
        return Err(Error::Numerical("non-finite ELBO".into()));
    }
    Ok(ElboOutput {
        elbo,
        recon,
        kl_local,
        kl_global,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::math::{gaussian_kl, VAR_FLOOR};
    use rand_distr::Distribution;

    fn toy(slices: usize, seed: u64) -> (DetmParams, Array2<f64>, Vec<BowDocument>) {
        let (v, k, l) = (10, 3, 4);
        let mut p = DetmParams::init(v, k, l, slices, 5, DetmHyper { sigma2: 0.3, delta2: 0.2, gamma2: 0.7 }, seed);
        let mut r = rng::seeded(seed + 50);
        // spread the means so every term of the KL matters
        for x in p.layout.alpha_mean.slice_mut(&mut p.data) {
            *x += 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut r);
        }
        for x in p.layout.eta_mean.slice_mut(&mut p.data) {
            *x = 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut r);
        }
        for x in p.layout.alpha_logvar.slice_mut(&mut p.data) {
            *x = -1.0 + 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut r);
        }
        for x in p.layout.eta_logvar.slice_mut(&mut p.data) {
            *x = -0.5 + 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut r);
        }
        let rho = Array2::from_shape_fn((l, v), |_| StandardNormal.sample(&mut r));
        let docs = (0..5)
            .map(|d| {
                let ids: Vec<usize> = (0..(2 + d * 3)).map(|i| (i * 3 + d) % v).collect();
                BowDocument::from_ids(format!("doc{d}"), &ids, Some(d % slices))
            })
            .collect();
        (p, rho, docs)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (p, rho, docs) = toy(3, 7);
        let batch: Vec<&BowDocument> = docs.iter().collect();
        let noise = DetmNoise::draw(&batch, &p.layout, 4, 2);
        let out = elbo_detm(&batch, &p, rho.view(), &noise, 20).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..p.data.len() {
            let mut plus = p.clone();
            plus.data[i] += h;
            let mut minus = p.clone();
            minus.data[i] -= h;
            let fd = (elbo_detm(&batch, &plus, rho.view(), &noise, 20).unwrap().elbo
                - elbo_detm(&batch, &minus, rho.view(), &noise, 20).unwrap().elbo)
                / (2.0 * h);
            let err = (fd - out.grad[i]).abs() / fd.abs().max(out.grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    /// Global KL recomputed from `gaussian_kl` with floored variances.
    fn expected_global_kl(p: &DetmParams) -> f64 {
        let lay = p.layout;
        let h = p.hyper;
        let floored = |s: &[f64]| -> Vec<f64> { s.iter().map(|s| s.exp().max(VAR_FLOOR)).collect() };
        let chain = |m: &[f64], v: &[f64], w: usize, prior: f64| -> f64 {
            let mut kl = gaussian_kl(&m[..w], &v[..w], &vec![0.0; w], &vec![1.0; w]).unwrap();
            for t in 1..m.len() / w {
                let (cur, prev) = (t * w..(t + 1) * w, (t - 1) * w..t * w);
                kl += gaussian_kl(&m[cur.clone()], &v[cur], &m[prev.clone()], &vec![prior; w]).unwrap()
                    + v[prev].iter().sum::<f64>() / (2.0 * prior);
            }
            kl
        };
        let am = lay.alpha_mean.slice(&p.data);
        let av = floored(lay.alpha_logvar.slice(&p.data));
        let em = lay.eta_mean.slice(&p.data);
        let ev = floored(lay.eta_logvar.slice(&p.data));
        chain(am, &av, lay.topics * lay.embed, h.sigma2) + chain(em, &ev, lay.topics, h.delta2)
    }

    #[test]
    fn chain_kl_matches_closed_form() {
        let (p, rho, docs) = toy(3, 3);
        let batch: Vec<&BowDocument> = docs.iter().collect();
        let noise = DetmNoise::draw(&batch, &p.layout, 0, 0);
        let out = elbo_detm(&batch, &p, rho.view(), &noise, 4 * batch.len()).unwrap();
        let expect = 0.25 * expected_global_kl(&p);
        assert!((out.kl_global - expect).abs() < 1e-9, "{} vs {expect}", out.kl_global);
    }

    #[test]
    fn vanishing_variances_are_floored() {
        let (mut p, rho, docs) = toy(2, 5);
        let lay = p.layout;
        let base: Vec<f64> = lay.alpha_slice(0).slice(&p.data).to_vec();
        lay.alpha_slice(1).slice_mut(&mut p.data).copy_from_slice(&base);
        lay.alpha_logvar.slice_mut(&mut p.data).fill(-200.0);
        lay.eta_logvar.slice_mut(&mut p.data).fill(-200.0);
        let batch: Vec<&BowDocument> = docs.iter().collect();
        let noise = DetmNoise::draw(&batch, &lay, 0, 0);
        let out = elbo_detm(&batch, &p, rho.view(), &noise, batch.len()).unwrap();
        assert!(out.elbo.is_finite());
        let expect = expected_global_kl(&p);
        assert!((out.kl_global - expect).abs() < 1e-9 * expect.abs().max(1.0));
        assert!(lay.alpha_logvar.slice(&out.grad).iter().all(|g| *g == 0.0));
        assert!(lay.eta_logvar.slice(&out.grad).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn missing_or_bad_slice_is_an_error() {
        let (p, rho, mut docs) = toy(2, 1);
        docs[0].slice = None;
        let batch: Vec<&BowDocument> = docs.iter().collect();
        let noise = DetmNoise::draw(&batch, &p.layout, 0, 0);
        assert!(elbo_detm(&batch, &p, rho.view(), &noise, 5).is_err());
        docs[0].slice = Some(9);
        let batch: Vec<&BowDocument> = docs.iter().collect();
        assert!(elbo_detm(&batch, &p, rho.view(), &noise, 5).is_err());
    }
}

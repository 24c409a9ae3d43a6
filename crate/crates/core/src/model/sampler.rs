//! Forward samplers for LDA, ETM and D-ETM, used to build synthetic corpora
//! with known ground truth.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{weighted::WeightedAliasIndex, Distribution, Gamma, StandardNormal};

use super::detm::DetmHyper;
use super::math::{beta_matrix, softmax};
use crate::corpus::BowDocument;
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq)]
pub struct LdaParams {
    /// K x V, rows on the simplex
    pub beta: Array2<f64>,
    /// Dirichlet concentration of the topics
    pub alpha_beta: f64,
    /// Dirichlet concentration of the proportions
    pub eta_theta: f64,
}

impl LdaParams {
    /// Draws the topics themselves from `Dirichlet(alpha_beta)`.
    pub fn draw(topics: usize, vocab: usize, alpha_beta: f64, eta_theta: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "lda-topics", 0);
        let mut beta = Array2::zeros((topics, vocab));
        for mut row in beta.axis_iter_mut(Axis(0)) {
            let draw = dirichlet(alpha_beta, vocab, &mut r)?;
            row.assign(&ndarray::ArrayView1::from(&draw));
        }
        let p = LdaParams {
            beta,
            alpha_beta,
            eta_theta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_beta > 0.0 && self.eta_theta > 0.0) {
            return Err(Error::Config("Dirichlet concentrations must be positive".into()));
        }
        for (k, row) in self.beta.axis_iter(Axis(0)).enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0) {
                return Err(Error::Data(format!("topic {k} is not a distribution (sum {s})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDoc {
    pub words: Vec<usize>,
    pub topics: Vec<usize>,
    pub theta: Vec<f64>,
    pub slice: Option<usize>,
}

impl SyntheticDoc {
    pub fn to_bow(&self, id: impl Into<String>) -> BowDocument {
        BowDocument::from_ids(id, &self.words, self.slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub docs: Vec<SyntheticDoc>,
    /// one K x V matrix per slice (a single entry for static models)
    pub beta: Vec<Array2<f64>>,
}

impl SyntheticCorpus {
    /// Bag-of-words documents with ids `doc{i}`.
    pub fn bow(&self) -> Vec<BowDocument> {
        self.docs
            .iter()
            .enumerate()
            .map(|(i, d)| d.to_bow(format!("doc{i}")))
            .collect()
    }
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
fn dirichlet(concentration: f64, n: usize, r: &mut rng::Rng) -> Result<Vec<f64>> {
    let g = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::Config(format!("Dirichlet concentration {concentration}: {e}")))?;
    loop {
        let draw: Vec<f64> = (0..n).map(|_| g.sample(r)).collect();
        let sum: f64 = draw.iter().sum();
        // all-zero draws underflow for tiny concentrations; redraw
        if sum > 0.0 && sum.is_finite() {
            return Ok(draw.into_iter().map(|x| x / sum).collect());
        }
    }
}

fn categorical(p: &[f64]) -> Result<WeightedAliasIndex<f64>> {
    WeightedAliasIndex::new(p.to_vec()).map_err(|e| Error::Numerical(format!("categorical: {e}")))
}

/// Draws topic assignments and words given a document's proportions.
fn emit(theta: Vec<f64>, beta: &[WeightedAliasIndex<f64>], len: usize, slice: Option<usize>, r: &mut rng::Rng) -> Result<SyntheticDoc> {
    let z = categorical(&theta)?;
    let mut words = Vec::with_capacity(len);
    let mut topics = Vec::with_capacity(len);
    for _ in 0..len {
        let k = z.sample(r);
        topics.push(k);
        words.push(beta[k].sample(r));
    }
    Ok(SyntheticDoc {
        words,
        topics,
        theta,
        slice,
    })
}

fn topic_samplers(beta: &Array2<f64>) -> Result<Vec<WeightedAliasIndex<f64>>> {
    beta.axis_iter(Axis(0))
        .map(|row| categorical(row.as_slice().expect("contiguous")))
        .collect()
}

/// LDA: `theta_d ~ Dir(eta_theta)`, `z ~ Cat(theta_d)`, `w ~ Cat(beta_z)`.
pub fn sample_lda(params: &LdaParams, doc_lengths: &[usize], seed: u64) -> Result<SyntheticCorpus> {
    params.validate()?;
    let k = params.beta.nrows();
    let samplers = topic_samplers(&params.beta)?;
    let docs = par::try_map(&(0..doc_lengths.len()).collect::<Vec<_>>(), |&d| {
        let mut r = rng::stream(seed, "lda-doc", d as u64);
        let theta: Vec<f64> = if k == 1 {
            vec![1.0]
        } else {
            dirichlet(params.eta_theta, k, &mut r)?
        };
        emit(theta, &samplers, doc_lengths[d], None, &mut r)
    })?;
    Ok(SyntheticCorpus {
        docs,
        beta: vec![params.beta.clone()],
    })
}

/// ETM: `theta_d = softmax(delta_d)`, `delta_d ~ N(0, I)`, topics from
/// `softmax(rho^T alpha_k)`.
pub fn sample_etm(rho: ArrayView2<f64>, alpha: ArrayView2<f64>, doc_lengths: &[usize], seed: u64) -> Result<SyntheticCorpus> {
    let beta = beta_matrix(rho, alpha)?;
    let k = beta.nrows();
    let samplers = topic_samplers(&beta)?;
    let docs = par::try_map(&(0..doc_lengths.len()).collect::<Vec<_>>(), |&d| {
        let mut r = rng::stream(seed, "etm-doc", d as u64);
        let delta: Vec<f64> = (0..k).map(|_| r.sample(StandardNormal)).collect();
        emit(softmax(&delta), &samplers, doc_lengths[d], None, &mut r)
    })?;
    Ok(SyntheticCorpus {
        docs,
        beta: vec![beta],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetmSample {
    /// per slice, K x L topic embeddings
    pub alpha: Vec<Array2<f64>>,
    /// T x K proportion means
    pub eta: Array2<f64>,
    pub corpus: SyntheticCorpus,
}

/// D-ETM prior sampler. Variances may be zero (degenerate walks).
///
/// Slice 0 draws `alpha_k ~ N(0, I)` and `eta ~ N(0, I)`; later slices add
/// `N(0, sigma2 I)` and `N(0, delta2 I)` steps. Each document of slice `t`
/// gets `theta = softmax(eta_t + gamma * eps)`.
pub fn sample_detm(
    rho: ArrayView2<f64>,
    hyper: DetmHyper,
    slices: usize,
    topics: usize,
    docs_per_slice: usize,
    doc_len: usize,
    seed: u64,
) -> Result<DetmSample> {
    if slices == 0 || topics == 0 {
        return Err(Error::Config("need at least one slice and one topic".into()));
    }
    if hyper.sigma2 < 0.0 || hyper.delta2 < 0.0 || hyper.gamma2 < 0.0 {
        return Err(Error::Config("prior variances must be non-negative".into()));
    }
    let embed = rho.nrows();
    let mut r = rng::stream(seed, "detm-chains", 0);
    let (s_sd, d_sd) = (hyper.sigma2.sqrt(), hyper.delta2.sqrt());
    let mut alpha = Vec::with_capacity(slices);
    let mut eta = Array2::zeros((slices, topics));
    alpha.push(Array2::from_shape_fn((topics, embed), |_| r.sample::<f64, _>(StandardNormal)));
    for k in 0..topics {
        eta[[0, k]] = r.sample(StandardNormal);
    }
    for t in 1..slices {
        let step = Array2::from_shape_fn((topics, embed), |_| s_sd * r.sample::<f64, _>(StandardNormal));
        alpha.push(&alpha[t - 1] + &step);
        for k in 0..topics {
            let e: f64 = r.sample(StandardNormal);
            eta[[t, k]] = eta[[t - 1, k]] + d_sd * e;
        }
    }
    let beta: Vec<Array2<f64>> = alpha
        .iter()
        .map(|a| beta_matrix(rho, a.view()))
        .collect::<Result<_>>()?;
    let samplers: Vec<Vec<WeightedAliasIndex<f64>>> = beta.iter().map(topic_samplers).collect::<Result<_>>()?;
    let g_sd = hyper.gamma2.sqrt();
    let n = slices * docs_per_slice;
    let docs = par::try_map(&(0..n).collect::<Vec<_>>(), |&d| {
        let t = d / docs_per_slice;
        let mut r = rng::stream(seed, "detm-doc", d as u64);
        let logits: Vec<f64> = (0..topics)
            .map(|k| eta[[t, k]] + g_sd * r.sample::<f64, _>(StandardNormal))
            .collect();
        emit(softmax(&logits), &samplers[t], doc_len, Some(t), &mut r)
    })?;
    Ok(DetmSample {
        alpha,
        eta,
        corpus: SyntheticCorpus { docs, beta },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    fn empirical(words: &[usize], v: usize) -> Vec<f64> {
        let mut c = vec![0.0; v];
        for &w in words {
            c[w] += 1.0;
        }
        c.iter().map(|x| x / words.len() as f64).collect()
    }

    fn mixture(theta: &[f64], beta: &Array2<f64>) -> Vec<f64> {
        (0..beta.ncols())
            .map(|v| (0..beta.nrows()).map(|k| theta[k] * beta[[k, v]]).sum())
            .collect()
    }

    fn random_rho(l: usize, v: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_fn((l, v), |_| r.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn lda_single_topic_matches_beta() {
        let p = LdaParams::draw(1, 20, 0.5, 1.0, 3).unwrap();
        let c = sample_lda(&p, &[100_000], 1).unwrap();
        assert!(c.docs[0].topics.iter().all(|&z| z == 0));
        let e = empirical(&c.docs[0].words, 20);
        assert!(tv(&e, p.beta.row(0).as_slice().unwrap()) < 0.01);
    }

    #[test]
    fn lda_large_concentration_gives_uniform_theta() {
        let p = LdaParams::draw(4, 10, 1.0, 1e6, 3).unwrap();
        let c = sample_lda(&p, &[1, 1, 1], 2).unwrap();
        for d in &c.docs {
            assert!(d.theta.iter().all(|t| (t - 0.25).abs() < 0.01));
        }
    }

    #[test]
    fn lda_document_matches_mixture() {
        let p = LdaParams::draw(5, 30, 0.3, 0.5, 8).unwrap();
        let c = sample_lda(&p, &[100_000], 9).unwrap();
        let d = &c.docs[0];
        assert!(tv(&empirical(&d.words, 30), &mixture(&d.theta, &p.beta)) < 0.01);
    }

    #[test]
    fn etm_degenerate_and_mixture() {
        let rho = random_rho(4, 25, 1);
        let same = Array2::from_shape_fn((3, 4), |(_, l)| l as f64 * 0.3 - 0.4);
        let c = sample_etm(rho.view(), same.view(), &[50_000], 5).unwrap();
        let b1 = c.beta[0].row(0).to_vec();
        assert!(tv(&empirical(&c.docs[0].words, 25), &b1) < 0.02);

        let one = Array2::from_shape_fn((1, 4), |(_, l)| l as f64);
        let c = sample_etm(rho.view(), one.view(), &[3, 3], 5).unwrap();
        assert!(c.docs.iter().all(|d| d.theta == vec![1.0]));

        let alpha = random_rho(3, 4, 2);
        let c = sample_etm(rho.view(), alpha.view(), &[10_000; 4], 6).unwrap();
        for d in &c.docs {
            assert!(tv(&empirical(&d.words, 25), &mixture(&d.theta, &c.beta[0])) < 0.02);
        }
    }

    #[test]
    fn detm_zero_walk_variance_freezes_topics() {
        let rho = random_rho(5, 12, 3);
        let h = DetmHyper { sigma2: 0.0, delta2: 0.0, gamma2: 1.0 };
        let s = sample_detm(rho.view(), h, 4, 3, 2, 10, 1).unwrap();
        for t in 1..4 {
            assert_eq!(s.alpha[t], s.alpha[0]);
            assert_eq!(s.corpus.beta[t], s.corpus.beta[0]);
            assert_eq!(s.eta.row(t), s.eta.row(0));
        }
    }

    #[test]
    fn detm_degenerate_proportions() {
        let rho = random_rho(5, 12, 3);
        let h = DetmHyper { sigma2: 0.1, delta2: 0.0, gamma2: 0.0 };
        let s = sample_detm(rho.view(), h, 3, 4, 5, 3, 2).unwrap();
        let first = &s.corpus.docs[0].theta;
        assert!(s.corpus.docs.iter().all(|d| &d.theta == first));
        assert_eq!(s.corpus.docs.len(), 15);
        assert_eq!(s.corpus.docs[14].slice, Some(2));
    }

    #[test]
    fn samplers_are_deterministic() {
        let rho = random_rho(5, 12, 3);
        let h = DetmHyper::default();
        assert_eq!(
            sample_detm(rho.view(), h, 3, 2, 4, 6, 11).unwrap(),
            sample_detm(rho.view(), h, 3, 2, 4, 6, 11).unwrap()
        );
        let seq = par::sequential(|| sample_detm(rho.view(), h, 3, 2, 4, 6, 11).unwrap());
        assert_eq!(seq, sample_detm(rho.view(), h, 3, 2, 4, 6, 11).unwrap());
    }
}

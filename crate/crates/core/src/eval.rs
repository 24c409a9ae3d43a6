//! Held-out perplexity, multi-seed aggregation and topic recovery scoring.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::BowDocument;
use crate::error::{Error, Result};
use crate::model::math::PROB_FLOOR;
use crate::model::TrainedModel;
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub id: String,
    pub log_likelihood: f64,
    pub n_tokens: u32,
    pub ll_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub perplexity: f64,
    pub n_tokens: u64,
    pub per_doc: Vec<DocScore>,
}

/// Splits a document's tokens into an observed half and a held-out half.
///
/// Tokens are laid out in term-id order and ranked by a hash of
/// `(seed, doc_id, token index)`; the first `floor(n/2)` form the observed
/// half.
pub fn completion_split(doc: &BowDocument, seed: u64) -> (BowDocument, BowDocument) {
    let doc_key = rng::fnv1a(doc.doc_id.as_bytes());
    let tokens: Vec<usize> = doc
        .counts
        .iter()
        .flat_map(|(&v, &c)| std::iter::repeat_n(v, c as usize))
        .collect();
    let mut order: Vec<(u64, usize)> = (0..tokens.len())
        .map(|i| (rng::combine(&[seed, doc_key, i as u64]), i))
        .collect();
    order.sort_unstable();
    let half = tokens.len() / 2;
    let pick = |range: &[(u64, usize)]| {
        let mut counts = BTreeMap::new();
        for &(_, i) in range {
            *counts.entry(tokens[i]).or_insert(0u32) += 1;
        }
        BowDocument::from_counts(doc.doc_id.clone(), counts, doc.slice)
    };
    (pick(&order[..half]), pick(&order[half..]))
}

/// Log-likelihood of `counts` under the mixture `theta^T beta`.
pub fn mixture_log_likelihood(theta: &[f64], beta: &Array2<f64>, counts: &BTreeMap<usize, u32>) -> f64 {
    counts
        .iter()
        .map(|(&v, &c)| {
            let p: f64 = theta.iter().enumerate().map(|(k, t)| t * beta[[k, v]]).sum();
            c as f64 * p.max(PROB_FLOOR).ln()
        })
        .sum()
}

/// Document-completion perplexity.
///
/// For every document the proportions are inferred from the observed half
/// (encoder mean, no sampling) and the held-out half is scored.
pub fn document_completion_perplexity(model: &TrainedModel, docs: &[BowDocument], seed: u64) -> Result<PerplexityResult> {
    let scored = par::try_map(docs, |doc| {
        if doc.n_tokens < 2 {
            log::warn!("document {} has fewer than 2 tokens; skipped", doc.doc_id);
            return Ok(None);
        }
        if doc.max_term_id().is_some_and(|m| m >= model.dims.vocab) {
            return Err(Error::Shape(format!(
                "document {} uses a term id outside a vocabulary of {}",
                doc.doc_id, model.dims.vocab
            )));
        }
        let (observed, held_out) = completion_split(doc, seed);
        let theta = model.infer_theta(&observed)?;
        let beta = model.beta_for(doc.slice)?;
        let ll = mixture_log_likelihood(&theta, beta, &held_out.counts);
        Ok::<_, Error>(Some(DocScore {
            id: doc.doc_id.clone(),
            log_likelihood: ll,
            n_tokens: held_out.n_tokens,
            ll_per_token: ll / held_out.n_tokens as f64,
        }))
    })?;
    let per_doc: Vec<DocScore> = scored.into_iter().flatten().collect();
    let n_tokens: u64 = per_doc.iter().map(|d| d.n_tokens as u64).sum();
    if n_tokens == 0 {
        return Err(Error::Data("no document has at least 2 tokens to score".into()));
    }
    let total: f64 = per_doc.iter().map(|d| d.log_likelihood).sum();
    Ok(PerplexityResult {
        perplexity: (-total / n_tokens as f64).exp(),
        n_tokens,
        per_doc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

/// Mean and 95% normal-approximation half-width `1.96 s / sqrt(n)` with the
/// sample standard deviation `s`.
pub fn aggregate_ci(values: &[f64]) -> Result<SeedAggregate> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 values to aggregate, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(SeedAggregate {
        mean,
        ci95: 1.96 * var.sqrt() / (n as f64).sqrt(),
        n,
        values: values.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// `matching[i]` is the learned topic assigned to true topic `i`
    pub matching: Vec<usize>,
    pub mean_tv: f64,
    pub per_topic_tv: Vec<f64>,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Matches learned topics to true ones with minimum total TV distance.
pub fn topic_recovery_score(true_beta: &Array2<f64>, learned_beta: &Array2<f64>) -> Result<RecoveryScore> {
    if true_beta.dim() != learned_beta.dim() {
        return Err(Error::Shape(format!(
            "true topics are {:?} but learned are {:?}",
            true_beta.dim(),
            learned_beta.dim()
        )));
    }
    let k = true_beta.nrows();
    let cost = Array2::from_shape_fn((k, k), |(i, j)| {
        let a = true_beta.row(i);
        let b = learned_beta.row(j);
        0.5 * a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>()
    });
    let matching = hungarian(&cost);
    let per_topic_tv: Vec<f64> = matching.iter().enumerate().map(|(i, &j)| cost[[i, j]]).collect();
    let mean_tv = if k == 0 { 0.0 } else { per_topic_tv.iter().sum::<f64>() / k as f64 };
    Ok(RecoveryScore {
        matching,
        mean_tv,
        per_topic_tv,
    })
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
/// potentials, O(n^3)). Returns the column assigned to each row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

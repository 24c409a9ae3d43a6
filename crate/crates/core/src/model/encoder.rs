//! One-hidden-layer amortized inference network: normalized counts (plus an
//! optional dense tail) to the mean and log-variance of a diagonal Gaussian.

use rand::Rng as _;

use super::math::{sigmoid, softplus};
use super::params::{Block, LayoutBuilder};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayout {
    pub input: usize,
    pub hidden: usize,
    pub topics: usize,
    /// input x hidden, one row per input coordinate
    pub w1: Block,
    pub b1: Block,
    /// topics x hidden
    pub w_mu: Block,
    pub b_mu: Block,
    pub w_lv: Block,
    pub b_lv: Block,
}

impl EncoderLayout {
    pub fn new(b: &mut LayoutBuilder, input: usize, hidden: usize, topics: usize) -> Self {
        EncoderLayout {
            input,
            hidden,
            topics,
            w1: b.block(input, hidden),
            b1: b.block(1, hidden),
            w_mu: b.block(topics, hidden),
            b_mu: b.block(1, topics),
            w_lv: b.block(topics, hidden),
            b_lv: b.block(1, topics),
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init(&self, data: &mut [f64], rng: &mut Rng) {
        let fill = |block: &Block, fan_in: usize, data: &mut [f64], rng: &mut Rng| {
            let r = 1.0 / (fan_in as f64).sqrt();
            for x in block.slice_mut(data) {
                *x = rng.random_range(-r..r);
            }
        };
        fill(&self.w1, self.input, data, rng);
        fill(&self.b1, self.input, data, rng);
        fill(&self.w_mu, self.hidden, data, rng);
        fill(&self.b_mu, self.hidden, data, rng);
        fill(&self.w_lv, self.hidden, data, rng);
        fill(&self.b_lv, self.hidden, data, rng);
    }

    /// Forward pass on a sparse input given as `(index, value)` pairs.
    pub fn forward(&self, data: &[f64], input: &[(usize, f64)]) -> Result<EncoderPass> {
        let mut pre = self.b1.slice(data).to_vec();
        for &(j, x) in input {
            if j >= self.input {
                return Err(Error::Shape(format!(
                    "encoder input index {j} out of range {}",
                    self.input
                )));
            }
            for (a, w) in pre.iter_mut().zip(self.w1.row(data, j)) {
                *a += x * w;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&a| softplus(a)).collect();
        let head = |w: &Block, b: &Block| -> Vec<f64> {
            (0..self.topics)
                .map(|k| {
                    b.slice(data)[k]
                        + w.row(data, k)
                            .iter()
                            .zip(&hidden)
                            .map(|(a, h)| a * h)
                            .sum::<f64>()
                })
                .collect()
        };
        let mu = head(&self.w_mu, &self.b_mu);
        let logvar = head(&self.w_lv, &self.b_lv);
        if mu.iter().chain(&logvar).any(|x| !x.is_finite()) {
            return Err(Error::Numerical("encoder produced a non-finite output".into()));
        }
        Ok(EncoderPass {
            pre,
            hidden,
            mu,
            logvar,
        })
    }

    /// Backpropagates output gradients through the network.
    pub fn backward(&self, data: &[f64], pass: &EncoderPass, d_mu: &[f64], d_logvar: &[f64]) -> Vec<f64> {
        let mut d_hidden = vec![0.0; self.hidden];
        for k in 0..self.topics {
            let wm = self.w_mu.row(data, k);
            let wl = self.w_lv.row(data, k);
            for h in 0..self.hidden {
                d_hidden[h] += d_mu[k] * wm[h] + d_logvar[k] * wl[h];
            }
        }
        d_hidden
            .iter()
            .zip(&pass.pre)
            .map(|(g, &a)| g * sigmoid(a))
            .collect()
    }

    /// Accumulates the weight gradients of one document into `grad`.
    ///
    /// `d_pre` is the gradient at the hidden pre-activation returned by
    /// [`EncoderLayout::backward`].
    pub fn accumulate(
        &self,
        grad: &mut [f64],
        input: &[(usize, f64)],
        pass: &EncoderPass,
        d_pre: &[f64],
        d_mu: &[f64],
        d_logvar: &[f64],
    ) {
        for &(j, x) in input {
            let row = self.w1.offset + j * self.hidden;
            for (g, d) in grad[row..row + self.hidden].iter_mut().zip(d_pre) {
                *g += x * d;
            }
        }
        for (g, d) in self.b1.slice_mut(grad).iter_mut().zip(d_pre) {
            *g += d;
        }
        for k in 0..self.topics {
            let rm = self.w_mu.offset + k * self.hidden;
            let rl = self.w_lv.offset + k * self.hidden;
            for h in 0..self.hidden {
                grad[rm + h] += d_mu[k] * pass.hidden[h];
                grad[rl + h] += d_logvar[k] * pass.hidden[h];
            }
            grad[self.b_mu.offset + k] += d_mu[k];
            grad[self.b_lv.offset + k] += d_logvar[k];
        }
    }

    /// Gradient with respect to input coordinate `j`.
    pub fn input_grad(&self, data: &[f64], d_pre: &[f64], j: usize) -> f64 {
        self.w1.row(data, j).iter().zip(d_pre).map(|(w, d)| w * d).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPass {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Normalized counts as sparse encoder input.
pub fn normalized_input(counts: &std::collections::BTreeMap<usize, u32>) -> Vec<(usize, f64)> {
    let n: u32 = counts.values().sum();
    counts
        .iter()
        .map(|(&v, &c)| (v, c as f64 / n as f64))
        .collect()
}

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Lower bound on every variational variance.
pub const VAR_FLOOR: f64 = 1e-6;

/// `ln(VAR_FLOOR)`; log-variances below this are clamped.
pub fn log_var_floor() -> f64 {
    VAR_FLOOR.ln()
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Backward pass of softmax: given `p = softmax(z)` and `g = dL/dp`,
/// returns `dL/dz`.
pub fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// KL divergence between diagonal Gaussians `N(mu_q, var_q) || N(mu_p, var_p)`.
pub fn gaussian_kl(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if var_q.len() != n || mu_p.len() != n || var_p.len() != n {
        return Err(Error::Shape("gaussian_kl arguments differ in length".into()));
    }
    let mut kl = 0.0;
    for i in 0..n {
        if !(var_q[i] > 0.0 && var_p[i] > 0.0) {
            return Err(Error::Numerical(format!(
                "gaussian_kl needs positive variances (got {} and {})",
                var_q[i], var_p[i]
            )));
        }
        let d = mu_p[i] - mu_q[i];
        kl += 0.5 * (var_q[i] / var_p[i] + d * d / var_p[i] - 1.0 + (var_p[i] / var_q[i]).ln());
    }
    Ok(kl)
}

/// Topic-word distributions: row k is `softmax(rho^T alpha_k)`.
pub fn beta_matrix(rho: ArrayView2<f64>, alpha: ArrayView2<f64>) -> Result<Array2<f64>> {
    if alpha.ncols() != rho.nrows() {
        return Err(Error::Shape(format!(
            "topic embeddings have dimension {} but rho has {} rows",
            alpha.ncols(),
            rho.nrows()
        )));
    }
    let mut logits = alpha.dot(&rho);
    for mut row in logits.axis_iter_mut(Axis(0)) {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    Ok(logits)
}

/// Word distribution of a single topic embedding.
pub fn compute_beta(rho: ArrayView2<f64>, alpha_k: &[f64]) -> Result<Vec<f64>> {
    let a = ArrayView2::from_shape((1, alpha_k.len()), alpha_k).expect("contiguous");
    Ok(beta_matrix(rho, a)?.into_raw_vec_and_offset().0)
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

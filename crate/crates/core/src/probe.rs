//! Multinomial logistic regression on frozen video embeddings, solved by
//! deterministic full-batch gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// L2 penalty on the weights (biases are not penalized).
    pub l2: f64,
    pub max_iter: usize,
    /// Stop when the gradient norm falls below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `[D, C]`.
    pub w: Tensor,
    pub b: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl LinearProbe {
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let (d, c) = (self.w.shape()[0], self.w.shape()[1]);
        if x.rank() != 2 || x.last_dim() != d {
            return Err(Error::Dimension(format!("probe input {:?} for width {d}", x.shape())));
        }
        let mut out = Vec::with_capacity(x.rows() * c);
        for i in 0..x.rows() {
            let mut z = self.b.clone();
            for (k, &xv) in x.row(i).iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += xv * self.w.data()[k * c + j];
                }
            }
            out.extend(softmax_slice(&z));
        }
        Tensor::new(vec![x.rows(), c], out)
    }

    pub fn weight_norm(&self) -> f64 {
        self.w.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fits a `classes`-way probe to rows of `x` with labels `y`.
pub fn linear_probe(x: &Tensor, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    if x.rank() != 2 || x.rows() != y.len() || y.is_empty() || classes == 0 {
        return Err(Error::Dimension(format!(
            "probe on {:?} with {} labels and {classes} classes",
            x.shape(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Range(format!("label {bad} of {classes}")));
    }
    let (n, d, c) = (x.rows(), x.last_dim(), classes);
    let mut warnings = Vec::new();
    for k in 0..c {
        if !y.contains(&k) {
            warnings.push(format!("class {k} has no probe samples"));
        }
    }
    if (1..n).all(|i| x.row(i) == x.row(0)) {
        warnings.push("all probe inputs are identical".to_string());
    }
    let max_sq = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    // Step 1/L for the smoothness constant of the penalized softmax loss.
    let step = 1.0 / (0.5 * (max_sq + 1.0) + cfg.l2);
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        for i in 0..n {
            let xi = x.row(i);
            let mut z = b.clone();
            for (k, &xv) in xi.iter().enumerate() {
                for j in 0..c {
                    z[j] += xv * w[k * c + j];
                }
            }
            let mut p = softmax_slice(&z);
            p[y[i]] -= 1.0;
            for j in 0..c {
                gb[j] += p[j] / n as f64;
            }
            for (k, &xv) in xi.iter().enumerate() {
                for j in 0..c {
                    gw[k * c + j] += xv * p[j] / n as f64;
                }
            }
        }
        for (g, wv) in gw.iter_mut().zip(&w) {
            *g += cfg.l2 * wv;
        }
        let norm = gw.iter().chain(&gb).map(|v| v * v).sum::<f64>().sqrt();
        if norm < cfg.tol {
            converged = true;
            break;
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= step * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= step * g;
        }
        iterations += 1;
    }
    Ok(LinearProbe {
        w: Tensor::new(vec![d, c], w)?,
        b,
        iterations,
        converged,
        warnings,
    })
}

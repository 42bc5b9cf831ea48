//! Open-set recognition by Weibull calibration of activation distances:
//! per-class tail models attenuate the top activations and the removed
//! mass becomes an explicit unknown score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{argmax, threshold_postprocess};
use crate::tensor::{l2_norm, softmax_slice, Tensor};

/// Two-parameter Weibull distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weibull {
    pub shape: f64,
    pub scale: f64,
}

impl Weibull {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        1.0 - (-(x / self.scale).powf(self.shape)).exp()
    }

    /// Maximum-likelihood fit. `None` for degenerate samples (fewer than two
    /// values, non-positive values, or no spread).
    pub fn fit(samples: &[f64]) -> Option<Self> {
        if samples.len() < 2 || samples.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return None;
        }
        let max = samples.iter().cloned().fold(f64::MIN, f64::max);
        let min = samples.iter().cloned().fold(f64::MAX, f64::min);
        if (max - min) <= 1e-12 * max {
            return None;
        }
        // Work on x / max so powers stay in (0, 1].
        let xs: Vec<f64> = samples.iter().map(|x| x / max).collect();
        let logs: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let mean_log = logs.iter().sum::<f64>() / xs.len() as f64;
        // Profile score in the shape; increasing, with a single root.
        let score = |k: f64| {
            let (mut num, mut den) = (0.0, 0.0);
            for (x, l) in xs.iter().zip(&logs) {
                let p = x.powf(k);
                num += p * l;
                den += p;
            }
            num / den - 1.0 / k - mean_log
        };
        let (mut lo, mut hi) = (1e-3f64, 1e4f64);
        if score(lo) > 0.0 || score(hi) < 0.0 {
            return None;
        }
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if score(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let k = (lo * hi).sqrt();
        let mean_pow = xs.iter().map(|x| x.powf(k)).sum::<f64>() / xs.len() as f64;
        let scale = max * mean_pow.powf(1.0 / k);
        (scale > 0.0 && scale.is_finite()).then_some(Weibull { shape: k, scale })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenMaxConfig {
    /// Number of largest distances per class used for the tail fit.
    pub tail: usize,
    /// Number of top activations revised; capped at the class count.
    pub revise: usize,
    /// Threshold used for classes without a tail model.
    pub fallback_threshold: f64,
}

impl Default for OpenMaxConfig {
    fn default() -> Self {
        Self {
            tail: 20,
            revise: 10,
            fallback_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub mean: Vec<f64>,
    /// `None` when the class fell back to the threshold rule.
    pub weibull: Option<Weibull>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxModel {
    pub classes: Vec<ClassModel>,
    pub tail: usize,
    pub revise: usize,
    pub fallback_threshold: f64,
    /// Classes that use the threshold rule, with the reason.
    pub fallbacks: Vec<(usize, String)>,
}

/// Fits per-class means and Weibull tails on correctly classified samples.
pub fn openmax_fit(activations: &Tensor, y: &[usize], cfg: &OpenMaxConfig) -> Result<OpenMaxModel> {
    if activations.rank() != 2 || activations.rows() != y.len() {
        return Err(Error::Dimension(format!(
            "activations {:?} for {} labels",
            activations.shape(),
            y.len()
        )));
    }
    if cfg.tail < 2 {
        return Err(Error::Config(format!("tail size {} below 2", cfg.tail)));
    }
    let c = activations.last_dim();
    let mut classes = Vec::with_capacity(c);
    let mut fallbacks = Vec::new();
    for class in 0..c {
        let rows: Vec<&[f64]> = (0..y.len())
            .filter(|&i| y[i] == class && argmax(activations.row(i)) == class)
            .map(|i| activations.row(i))
            .collect();
        let mut mean = vec![0.0; c];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        if !rows.is_empty() {
            mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        }
        let weibull = if rows.len() < cfg.tail {
            fallbacks.push((class, format!("{} correct samples, tail needs {}", rows.len(), cfg.tail)));
            None
        } else {
            let mut d: Vec<f64> = rows.iter().map(|r| distance(r, &mean)).collect();
            d.sort_by(|a, b| b.total_cmp(a));
            d.truncate(cfg.tail);
            let fit = Weibull::fit(&d);
            if fit.is_none() {
                fallbacks.push((class, "degenerate tail distances".to_string()));
            }
            fit
        };
        classes.push(ClassModel { mean, weibull });
    }
    Ok(OpenMaxModel {
        classes,
        tail: cfg.tail,
        revise: cfg.revise.min(c),
        fallback_threshold: cfg.fallback_threshold,
        fallbacks,
    })
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2_norm(&diff)
}

/// Revised class probabilities (`C` known entries then the unknown entry)
/// and the decision.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenMaxOutput {
    pub probs: Vec<f64>,
    pub prediction: Option<usize>,
}

/// Revises one activation vector. `fused` (the summed branch
/// probabilities) decides predictions of fallback classes.
pub fn openmax_postprocess(model: &OpenMaxModel, activation: &[f64], fused: &[f64]) -> Result<OpenMaxOutput> {
    let c = model.classes.len();
    if activation.len() != c || fused.len() != c {
        return Err(Error::Dimension(format!(
            "activation of {} and fused scores of {} for {c} classes",
            activation.len(),
            fused.len()
        )));
    }
    let floor = activation.iter().cloned().fold(f64::INFINITY, f64::min);
    let v: Vec<f64> = activation.iter().map(|a| a - floor).collect();
    let mut ranked: Vec<usize> = (0..c).collect();
    ranked.sort_by(|&a, &b| activation[b].total_cmp(&activation[a]).then(a.cmp(&b)));
    let k = model.revise;
    let mut revised = v.clone();
    let mut unknown = 0.0;
    for (r, &j) in ranked.iter().take(k).enumerate() {
        let cm = &model.classes[j];
        let cdf = match cm.weibull {
            Some(w) => w.cdf(distance(activation, &cm.mean)),
            None => 0.0,
        };
        let weight = 1.0 - (k - r) as f64 / k as f64 * cdf;
        revised[j] = v[j] * weight;
        unknown += v[j] * (1.0 - weight);
    }
    let mut scores = revised;
    scores.push(unknown);
    let probs = softmax_slice(&scores);
    let top = argmax(&scores);
    let prediction = if top == c {
        None
    } else if model.classes[top].weibull.is_none() {
        threshold_postprocess(fused, model.fallback_threshold).filter(|&p| p == top)
    } else {
        Some(top)
    };
    Ok(OpenMaxOutput { probs, prediction })
}

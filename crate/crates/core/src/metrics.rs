//! Classification metrics: top-k accuracy, per-bucket accuracy, threshold
//! rejection and the open-set F-measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splits::{Bucket, ShotPartition};
use crate::tensor::Tensor;

fn check(scores: &Tensor, y: &[usize]) -> Result<usize> {
    if scores.rank() != 2 || scores.rows() != y.len() {
        return Err(Error::Dimension(format!(
            "scores {:?} for {} labels",
            scores.shape(),
            y.len()
        )));
    }
    let c = scores.last_dim();
    if let Some(&bad) = y.iter().find(|&&l| l >= c) {
        return Err(Error::Range(format!("label {bad} of {c}")));
    }
    Ok(c)
}

/// Rank of `class` in `row` when sorting by descending score, ties by
/// ascending class index.
fn rank_of(row: &[f64], class: usize) -> usize {
    let s = row[class];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < class))
        .count()
}

/// Highest-scoring class, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predictions(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|i| argmax(scores.row(i))).collect()
}

pub fn topk_accuracy(scores: &Tensor, y: &[usize], k: usize) -> Result<f64> {
    let c = check(scores, y)?;
    if k == 0 || k > c {
        return Err(Error::Range(format!("top-{k} over {c} classes")));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let hits = y
        .iter()
        .enumerate()
        .filter(|&(i, &l)| rank_of(scores.row(i), l) < k)
        .count();
    Ok(hits as f64 / y.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub accuracy: f64,
    pub samples: usize,
}

/// Top-1 accuracy per shot bucket; an empty bucket is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub many: Option<BucketAccuracy>,
    pub medium: Option<BucketAccuracy>,
    pub few: Option<BucketAccuracy>,
    pub overall: f64,
}

/// `partition` holds labels of the score columns.
pub fn subset_accuracy(scores: &Tensor, y: &[usize], partition: &ShotPartition) -> Result<SubsetAccuracy> {
    let c = check(scores, y)?;
    for l in 0..c {
        if partition.bucket_of(l).is_none() {
            return Err(Error::Contract(format!("label {l} is in no shot bucket")));
        }
    }
    let pred = predictions(scores);
    let mut tally = [(0usize, 0usize); 3];
    for (i, &l) in y.iter().enumerate() {
        let b = match partition.bucket_of(l).expect("checked") {
            Bucket::Many => 0,
            Bucket::Medium => 1,
            Bucket::Few => 2,
        };
        tally[b].1 += 1;
        if pred[i] == l {
            tally[b].0 += 1;
        }
    }
    let bucket = |(hit, n): (usize, usize)| {
        (n > 0).then(|| BucketAccuracy {
            accuracy: hit as f64 / n as f64,
            samples: n,
        })
    };
    let hits: usize = tally.iter().map(|t| t.0).sum();
    Ok(SubsetAccuracy {
        many: bucket(tally[0]),
        medium: bucket(tally[1]),
        few: bucket(tally[2]),
        overall: if y.is_empty() { 0.0 } else { hits as f64 / y.len() as f64 },
    })
}

/// Known class if half the largest fused score reaches `thr`, otherwise
/// unknown (`None`).
pub fn threshold_postprocess(p: &[f64], thr: f64) -> Option<usize> {
    let k = argmax(p);
    (p[k] / 2.0 >= thr).then_some(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FMeasure {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub true_positives: usize,
    pub predicted_known: usize,
    pub actual_known: usize,
}

/// Open-set F-measure. A true positive is a sample predicted as a known
/// class that equals its true known class. Precision divides by the number
/// of known predictions, recall by the number of known-class samples.
pub fn f_measure(pred: &[Option<usize>], truth: &[Option<usize>]) -> Result<FMeasure> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let tp = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| p.is_some() && p == t)
        .count();
    let predicted_known = pred.iter().filter(|p| p.is_some()).count();
    let actual_known = truth.iter().filter(|t| t.is_some()).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, predicted_known);
    let recall = ratio(tp, actual_known);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(FMeasure {
        precision,
        recall,
        f,
        true_positives: tp,
        predicted_known,
        actual_known,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

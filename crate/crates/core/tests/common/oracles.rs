//! Straight-line reference implementations written independently of the
//! library code paths, plus random fixture generators for them.

use gvr_core::head::{classify, init_head, SalientTextBank};
use gvr_core::metrics::f_measure;
use gvr_core::openmax::{openmax_postprocess, ClassModel, OpenMaxModel, Weibull};
use gvr_core::optim::ParamGroup;
use gvr_core::pretrain::{distill_loss, nce_text_loss, nce_video_loss, SimilarityMatrix};
use gvr_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::fixtures::{rng, unit_rows};

fn at(t: &Tensor, i: usize, j: usize) -> f64 {
    t.data()[i * t.shape()[1] + j]
}

/// Mean over texts of the multi-positive contrastive loss.
pub fn nce_text_oracle(sims: &Tensor, tau: f64, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            denom += (at(sims, k, i) / tau).exp();
        }
        let mut sum = 0.0;
        let mut count = 0.0;
        for j in 0..n {
            if labels[j] == labels[i] {
                sum += ((at(sims, j, i) / tau).exp() / denom).ln();
                count += 1.0;
            }
        }
        total += -sum / count;
    }
    total / n as f64
}

/// Mean over videos of the multi-positive contrastive loss.
pub fn nce_video_oracle(sims: &Tensor, tau: f64, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            denom += (at(sims, i, k) / tau).exp();
        }
        let mut sum = 0.0;
        let mut count = 0.0;
        for j in 0..n {
            if labels[j] == labels[i] {
                sum += ((at(sims, i, j) / tau).exp() / denom).ln();
                count += 1.0;
            }
        }
        total += -sum / count;
    }
    total / n as f64
}

/// Row distributions of `sims / tau`, by video rows (`by_text` false) or by
/// text columns (`by_text` true).
fn distributions(sims: &Tensor, tau: f64, by_text: bool) -> Vec<Vec<f64>> {
    let (nv, nt) = (sims.shape()[0], sims.shape()[1]);
    let (outer, inner) = if by_text { (nt, nv) } else { (nv, nt) };
    let mut rows = Vec::new();
    for a in 0..outer {
        let vals: Vec<f64> = (0..inner)
            .map(|b| if by_text { at(sims, b, a) } else { at(sims, a, b) } / tau)
            .collect();
        let m = vals.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        rows.push(e.iter().map(|v| v / z).collect());
    }
    rows
}

/// Half the sum of the two directional soft cross-entropies, each averaged
/// over its rows.
pub fn distill_oracle(student: &Tensor, tau: f64, teacher: &Tensor, teacher_tau: f64) -> f64 {
    let mut total = 0.0;
    for by_text in [false, true] {
        let s = distributions(student, tau, by_text);
        let t = distributions(teacher, teacher_tau, by_text);
        let mut dir = 0.0;
        for (sr, tr) in s.iter().zip(&t) {
            for (p, q) in sr.iter().zip(tr) {
                dir -= q * p.ln();
            }
        }
        total += dir / s.len() as f64;
    }
    total / 2.0
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let s = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mu) / s * g[i] + b[i]).collect()
}

/// `x W + b` with `W` stored `[in, out]`.
fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let out = w.shape()[1];
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * out + o]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub struct ClassifyOracle {
    pub p_v: Vec<f64>,
    pub p_t: Vec<f64>,
    pub p: Vec<f64>,
}

/// Head output for one video: attention over each class's texts with
/// layer-normalized linear queries and keys, cosine text scores at the head
/// temperature, and a one-hidden-layer GELU MLP for the video scores.
pub fn classify_oracle(head: &ParamGroup, ev: &[f64], texts: &Tensor) -> ClassifyOracle {
    let p = |n: &str| head.by_name(n).unwrap().clone();
    let (c, m, d) = (texts.shape()[0], texts.shape()[1], texts.shape()[2]);
    let q = affine(
        &layer_norm(ev, p("q.ln.g").data(), p("q.ln.b").data()),
        &p("q.w"),
        p("q.b").data(),
    );
    let tau = p("log_tau").data()[0].exp();
    let mut text_logits = Vec::with_capacity(c);
    for class in 0..c {
        let rows: Vec<&[f64]> = (0..m)
            .map(|j| &texts.data()[(class * m + j) * d..(class * m + j + 1) * d])
            .collect();
        let scores: Vec<f64> = rows
            .iter()
            .map(|t| {
                let k = affine(
                    &layer_norm(t, p("k.ln.g").data(), p("k.ln.b").data()),
                    &p("k.w"),
                    p("k.b").data(),
                );
                q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let a = softmax(&scores);
        let mut gathered = vec![0.0; d];
        for (w, t) in a.iter().zip(&rows) {
            for (g, v) in gathered.iter_mut().zip(t.iter()) {
                *g += w * v;
            }
        }
        text_logits.push(cosine(ev, &gathered) / tau);
    }
    let h: Vec<f64> = affine(ev, &p("mlp.w1"), p("mlp.b1").data()).into_iter().map(gelu).collect();
    let video_logits = affine(&h, &p("mlp.w2"), p("mlp.b2").data());
    let p_v = softmax(&video_logits);
    let p_t = softmax(&text_logits);
    let sum = p_v.iter().zip(&p_t).map(|(a, b)| a + b).collect();
    ClassifyOracle { p_v, p_t, p: sum }
}

pub struct FOracle {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// F-measure from the `(C+1) x (C+1)` confusion matrix whose last index is
/// the unknown class.
pub fn f_measure_oracle(pred: &[Option<usize>], truth: &[Option<usize>], classes: usize) -> FOracle {
    let u = classes;
    let mut cm = vec![vec![0usize; classes + 1]; classes + 1];
    for (p, t) in pred.iter().zip(truth) {
        cm[t.unwrap_or(u)][p.unwrap_or(u)] += 1;
    }
    let tp: usize = (0..classes).map(|k| cm[k][k]).sum();
    let predicted_known: usize = (0..=classes).map(|t| (0..classes).map(|p| cm[t][p]).sum::<usize>()).sum();
    let actual_known: usize = (0..classes).map(|t| cm[t].iter().sum::<usize>()).sum();
    let precision = if predicted_known == 0 { 0.0 } else { tp as f64 / predicted_known as f64 };
    let recall = if actual_known == 0 { 0.0 } else { tp as f64 / actual_known as f64 };
    let f = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    FOracle { precision, recall, f }
}

/// Revision of one activation vector: activations are shifted to a zero
/// minimum, the top `alpha` classes (rank `i` from 1) keep the fraction
/// `1 - (alpha - i + 1) / alpha * CDF(distance to class mean)`, and the
/// removed mass is the unknown score at index `C`.
pub fn openmax_oracle(means: &[Vec<f64>], weibulls: &[(f64, f64)], alpha: usize, act: &[f64]) -> (Vec<f64>, Option<usize>) {
    let c = act.len();
    let lo = act.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut order: Vec<usize> = (0..c).collect();
    // Stable sort: equal activations keep ascending class order.
    order.sort_by(|&a, &b| act[b].partial_cmp(&act[a]).unwrap());
    let mut scores: Vec<f64> = act.iter().map(|a| a - lo).collect();
    let mut unknown = 0.0;
    for i in 1..=alpha {
        let j = order[i - 1];
        let dist = act.iter().zip(&means[j]).map(|(a, m)| (a - m).powi(2)).sum::<f64>().sqrt();
        let (k, lambda) = weibulls[j];
        let cdf = 1.0 - (-(dist / lambda).powf(k)).exp();
        let w = 1.0 - (alpha - i + 1) as f64 / alpha as f64 * cdf;
        unknown += scores[j] * (1.0 - w);
        scores[j] *= w;
    }
    scores.push(unknown);
    let probs = softmax(&scores);
    let mut best = 0;
    for i in 1..=c {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (probs, if best == c { None } else { Some(best) })
}

fn rand_sims(n: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![n, n], (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_labels(n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let classes = r.random_range(1..=n);
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

/// Largest absolute deviation between a library function and its oracle over
/// `fixtures` random instances, per checked quantity.
pub fn loss_oracle_gaps(fixtures: u64) -> [(String, f64); 3] {
    let (mut text, mut video, mut dist) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..fixtures {
        let mut r = rng(1000 + seed);
        let n = r.random_range(2..9);
        let tau = r.random_range(0.03..1.0);
        let sims = rand_sims(n, &mut r);
        let labels = rand_labels(n, &mut r);
        let sm = SimilarityMatrix::new(sims.clone(), tau).unwrap();
        text = text.max((nce_text_loss(&sm, &labels).unwrap() - nce_text_oracle(&sims, tau, &labels)).abs());
        video = video.max((nce_video_loss(&sm, &labels).unwrap() - nce_video_oracle(&sims, tau, &labels)).abs());
        let teacher = rand_sims(n, &mut r);
        let tm = SimilarityMatrix::new(teacher.clone(), 0.01).unwrap();
        dist = dist.max((distill_loss(&sm, &tm).unwrap() - distill_oracle(&sims, tau, &teacher, 0.01)).abs());
    }
    [
        ("nce_text_loss".into(), text),
        ("nce_video_loss".into(), video),
        ("distill_loss".into(), dist),
    ]
}

fn jitter(p: &mut ParamGroup, r: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        for v in p.value_mut(id).data_mut() {
            *v += std * r.random_range(-1.0..1.0);
        }
    }
}

pub fn classify_oracle_gap(fixtures: u64) -> f64 {
    let mut gap = 0.0f64;
    for seed in 0..fixtures {
        let mut r = rng(2000 + seed);
        let (d, c, m, n) = (r.random_range(2..7), r.random_range(2..6), r.random_range(1..5), 3);
        let mut head = init_head(d, c, r.random_range(0..6), r.random_range(0.05..0.5), &mut r).unwrap();
        jitter(&mut head, &mut r, 0.5);
        let texts = unit_rows(&[c, m, d], &mut r);
        let salient = SalientTextBank {
            classes: c,
            m,
            dim: d,
            embeddings: texts.clone(),
            sentence_ids: vec![vec![String::new(); m]; c],
            scores: vec![vec![0.0; m]; c],
            strategy: "tsr".into(),
            digest: String::new(),
        };
        let ev = unit_rows(&[n, d], &mut r);
        let out = classify(&head, &ev, &salient).unwrap();
        for i in 0..n {
            let o = classify_oracle(&head, ev.row(i), &texts);
            for (lib, ora) in [(&out.p_v, &o.p_v), (&out.p_t, &o.p_t), (&out.p, &o.p)] {
                for (a, b) in lib.row(i).iter().zip(ora.iter()) {
                    gap = gap.max((a - b).abs());
                }
            }
        }
    }
    gap
}

/// Maximum F gap and the number of fixtures whose counts disagree.
pub fn f_measure_oracle_gap(fixtures: u64) -> (f64, usize) {
    let mut gap = 0.0f64;
    let mut mismatched = 0;
    for seed in 0..fixtures {
        let mut r = rng(3000 + seed);
        let c = r.random_range(1..5);
        let n = r.random_range(1..30);
        let draw = |r: &mut ChaCha8Rng| if r.random_bool(0.3) { None } else { Some(r.random_range(0..c)) };
        let truth: Vec<Option<usize>> = (0..n).map(|_| draw(&mut r)).collect();
        let pred: Vec<Option<usize>> = (0..n).map(|_| draw(&mut r)).collect();
        let lib = f_measure(&pred, &truth).unwrap();
        let o = f_measure_oracle(&pred, &truth, c);
        gap = gap.max((lib.f - o.f).abs()).max((lib.precision - o.precision).abs()).max((lib.recall - o.recall).abs());
        if lib.f != o.f {
            mismatched += 1;
        }
    }
    (gap, mismatched)
}

/// Random OpenMax model with a Weibull tail for every class.
pub fn random_openmax(c: usize, r: &mut ChaCha8Rng) -> OpenMaxModel {
    let classes = (0..c)
        .map(|_| ClassModel {
            mean: (0..c).map(|_| r.random_range(-3.0..3.0)).collect(),
            weibull: Some(Weibull {
                shape: r.random_range(0.5..4.0),
                scale: r.random_range(0.5..5.0),
            }),
        })
        .collect();
    OpenMaxModel {
        classes,
        tail: 20,
        revise: r.random_range(1..=c),
        fallback_threshold: 0.5,
        fallbacks: Vec::new(),
    }
}

/// Maximum probability gap and the number of fixtures whose decisions differ.
pub fn openmax_oracle_gap(fixtures: u64) -> (f64, usize) {
    let mut gap = 0.0f64;
    let mut mismatched = 0;
    for seed in 0..fixtures {
        let mut r = rng(4000 + seed);
        let c = r.random_range(2..8);
        let model = random_openmax(c, &mut r);
        let act: Vec<f64> = (0..c).map(|_| r.random_range(-4.0..4.0)).collect();
        let fused = vec![2.0 / c as f64; c];
        let out = openmax_postprocess(&model, &act, &fused).unwrap();
        let means: Vec<Vec<f64>> = model.classes.iter().map(|m| m.mean.clone()).collect();
        let weibulls: Vec<(f64, f64)> = model
            .classes
            .iter()
            .map(|m| m.weibull.map(|w| (w.shape, w.scale)).unwrap())
            .collect();
        let (probs, pred) = openmax_oracle(&means, &weibulls, model.revise, &act);
        for (a, b) in out.probs.iter().zip(&probs) {
            gap = gap.max((a - b).abs());
        }
        if out.prediction != pred {
            mismatched += 1;
        }
    }
    (gap, mismatched)
}

/// Exhaustive check over 8-sample fixtures with two known classes: every
/// prediction vector in `{unknown, 0, 1}^8` against every `stride`-th truth
/// vector of the same alphabet. Returns `(fixtures, mismatched)`.
pub fn f_measure_enumerated(stride: usize) -> (usize, usize) {
    let decode = |mut code: usize| {
        (0..8)
            .map(|_| {
                let v = code % 3;
                code /= 3;
                if v == 2 { None } else { Some(v) }
            })
            .collect::<Vec<Option<usize>>>()
    };
    let total = 3usize.pow(8);
    let (mut fixtures, mut mismatched) = (0, 0);
    for t in (0..total).step_by(stride) {
        let truth = decode(t);
        for p in 0..total {
            let pred = decode(p);
            let lib = f_measure(&pred, &truth).unwrap();
            let o = f_measure_oracle(&pred, &truth, 2);
            fixtures += 1;
            if lib.f != o.f || lib.precision != o.precision || lib.recall != o.recall {
                mismatched += 1;
            }
        }
    }
    (fixtures, mismatched)
}

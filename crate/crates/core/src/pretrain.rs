//! Stage I: multi-positive contrastive losses in both directions, soft-target
//! distillation against the mean-pooling teacher, and the training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bank::EmbeddingBank;
use crate::checkpoint::Precision;
use crate::dataset::{epoch_batches, Batch};
use crate::error::{Error, Result};
use crate::model::{
    inv_tau, tau, teacher_encode_text, teacher_encode_video, text_forward, video_forward,
    ModelConfig, TEACHER_TAU,
};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState, ParamGroup};
use crate::tensor::Tensor;

/// Cosine similarities between `N_v` videos (rows) and `N_t` texts (columns)
/// with the temperature that scales them.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub sims: Tensor,
    pub tau: f64,
}

impl SimilarityMatrix {
    pub fn new(sims: Tensor, tau: f64) -> Result<Self> {
        if sims.rank() != 2 {
            return Err(Error::Dimension(format!("similarity matrix of shape {:?}", sims.shape())));
        }
        if !(tau > 0.0) || !sims.is_finite() {
            return Err(Error::Contract(format!("similarities need finite values and tau > 0, got tau {tau}")));
        }
        Ok(Self { sims, tau })
    }

    fn logits(&self) -> Tensor {
        self.sims.map(|s| s / self.tau)
    }
}

/// Row `i` holds `1 / |positives of anchor i|` at each positive column.
fn positive_weights(anchor_labels: &[usize], other_labels: &[usize], what: &str) -> Result<Tensor> {
    let (na, no) = (anchor_labels.len(), other_labels.len());
    let mut w = vec![0.0; na * no];
    for (i, &a) in anchor_labels.iter().enumerate() {
        let pos: Vec<usize> = (0..no).filter(|&j| other_labels[j] == a).collect();
        if pos.is_empty() {
            return Err(Error::Contract(format!(
                "{what} anchor {i} of class {a} has no positive in the batch"
            )));
        }
        let inv = 1.0 / pos.len() as f64;
        for j in pos {
            w[i * no + j] = inv;
        }
    }
    Tensor::new(vec![na, no], w)
}

fn check_labels(g: &Graph, logits: Var, video_labels: &[usize], text_labels: &[usize]) -> Result<()> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != video_labels.len() || s[1] != text_labels.len() {
        return Err(Error::Dimension(format!(
            "logits {s:?} for {} videos and {} texts",
            video_labels.len(),
            text_labels.len()
        )));
    }
    Ok(())
}

/// Per-text contrastive loss from scaled video-text logits `[N_v, N_t]`:
/// every same-class video is a positive, every video is in the denominator.
pub fn nce_text_per_anchor(
    g: &mut Graph,
    logits: Var,
    video_labels: &[usize],
    text_labels: &[usize],
) -> Result<Var> {
    check_labels(g, logits, video_labels, text_labels)?;
    let w = g.constant(positive_weights(text_labels, video_labels, "text")?);
    let by_text = g.transpose(logits)?;
    let lp = g.log_softmax(by_text)?;
    let picked = g.mul(lp, w)?;
    let s = g.sum_axis(picked, 1)?;
    Ok(g.scale(s, -1.0))
}

/// Per-video contrastive loss, the mirror image of [`nce_text_per_anchor`].
pub fn nce_video_per_anchor(
    g: &mut Graph,
    logits: Var,
    video_labels: &[usize],
    text_labels: &[usize],
) -> Result<Var> {
    check_labels(g, logits, video_labels, text_labels)?;
    let w = g.constant(positive_weights(video_labels, text_labels, "video")?);
    let lp = g.log_softmax(logits)?;
    let picked = g.mul(lp, w)?;
    let s = g.sum_axis(picked, 1)?;
    Ok(g.scale(s, -1.0))
}

pub fn nce_text_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = nce_text_per_anchor(g, logits, labels, labels)?;
    g.mean(per)
}

pub fn nce_video_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = nce_video_per_anchor(g, logits, labels, labels)?;
    g.mean(per)
}

fn check_distribution_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let r = t.row(i);
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-6 || r.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Contract(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Row-normalized teacher targets in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    /// Video rows over texts.
    pub video: Tensor,
    /// Text rows over videos.
    pub text: Tensor,
}

impl TeacherTargets {
    /// Softmax of teacher similarities `[N_v, N_t]` at temperature `tau`.
    pub fn from_sims(sims: &Tensor, tau: f64) -> Result<Self> {
        if sims.rank() != 2 {
            return Err(Error::Dimension(format!("teacher similarities {:?}", sims.shape())));
        }
        let (nv, nt) = (sims.shape()[0], sims.shape()[1]);
        let softmax_rows = |t: &Tensor| -> Result<Tensor> {
            let mut out = Vec::with_capacity(t.numel());
            for i in 0..t.rows() {
                let r: Vec<f64> = t.row(i).iter().map(|s| s / tau).collect();
                out.extend(crate::tensor::softmax_slice(&r));
            }
            Tensor::new(t.shape().to_vec(), out)
        };
        let mut transposed = vec![0.0; nv * nt];
        for i in 0..nv {
            for j in 0..nt {
                transposed[j * nv + i] = sims.data()[i * nt + j];
            }
        }
        let transposed = Tensor::new(vec![nt, nv], transposed)?;
        Ok(Self {
            video: softmax_rows(sims)?,
            text: softmax_rows(&transposed)?,
        })
    }
}

/// Soft cross-entropy of student rows against teacher rows in both
/// directions, each averaged over rows, then averaged over the two directions.
pub fn distill_graph(g: &mut Graph, logits: Var, teacher: &TeacherTargets) -> Result<Var> {
    check_distribution_rows(&teacher.video, "teacher video")?;
    check_distribution_rows(&teacher.text, "teacher text")?;
    let s = g.shape(logits).to_vec();
    if teacher.video.shape() != s.as_slice() || teacher.text.shape() != [s[1], s[0]] {
        return Err(Error::Dimension(format!(
            "teacher targets {:?}/{:?} for student logits {s:?}",
            teacher.video.shape(),
            teacher.text.shape()
        )));
    }
    let tv = g.constant(teacher.video.clone());
    let tt = g.constant(teacher.text.clone());
    let lv = g.log_softmax(logits)?;
    let by_text = g.transpose(logits)?;
    let lt = g.log_softmax(by_text)?;
    let a = g.mul(lv, tv)?;
    let b = g.mul(lt, tt)?;
    let a = g.sum(a);
    let b = g.sum(b);
    let a = g.scale(a, -1.0 / s[0] as f64);
    let b = g.scale(b, -1.0 / s[1] as f64);
    let total = g.add(a, b)?;
    Ok(g.scale(total, 0.5))
}

/// `alpha * (l_video + l_text) + (1 - alpha) * l_dist`.
pub fn pretrain_graph(g: &mut Graph, l_text: Var, l_video: Var, l_dist: Var, alpha: f64) -> Result<Var> {
    let nce = g.add(l_video, l_text)?;
    let nce = g.scale(nce, alpha);
    let dist = g.scale(l_dist, 1.0 - alpha);
    g.add(nce, dist)
}

fn eval_scalar(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.scalar(v))
}

pub fn nce_text_loss(sims: &SimilarityMatrix, labels: &[usize]) -> Result<f64> {
    eval_scalar(|g| {
        let l = g.constant(sims.logits());
        nce_text_graph(g, l, labels)
    })
}

pub fn nce_video_loss(sims: &SimilarityMatrix, labels: &[usize]) -> Result<f64> {
    eval_scalar(|g| {
        let l = g.constant(sims.logits());
        nce_video_graph(g, l, labels)
    })
}

/// Distillation loss of student similarities against teacher similarities
/// (teacher scaled by its own fixed temperature).
pub fn distill_loss(student: &SimilarityMatrix, teacher: &SimilarityMatrix) -> Result<f64> {
    let targets = TeacherTargets::from_sims(&teacher.sims, teacher.tau)?;
    eval_scalar(|g| {
        let l = g.constant(student.logits());
        distill_graph(g, l, &targets)
    })
}

pub fn pretrain_loss(l_text: f64, l_video: f64, l_dist: f64, alpha: f64) -> f64 {
    alpha * (l_video + l_text) + (1.0 - alpha) * l_dist
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            batch_size: 16,
            epochs: 50,
            lr: 1e-3,
            weight_decay: 5e-2,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.batch_size < 2 {
            problems.push(format!("batch_size {} below 2", self.batch_size));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            problems.push("lr and weight_decay must be nonnegative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Loss terms of one Stage I step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_text: f64,
    pub l_video: f64,
    pub l_dist: f64,
    pub l_pre: f64,
    pub lr: f64,
    pub tau: f64,
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,l_text,l_video,l_dist,l_pre,lr,tau\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.l_text, r.l_video, r.l_dist, r.l_pre, r.lr, r.tau
        ));
    }
    out
}

/// Graph nodes of one Stage I forward pass.
pub struct StageOneTerms {
    pub l_text: Var,
    pub l_video: Var,
    pub l_dist: Var,
    pub l_pre: Var,
}

/// Builds the full Stage I objective for a batch of clips and base sentence
/// vectors.
pub fn stage1_forward(
    g: &mut Graph,
    params: &ParamGroup,
    cfg: &ModelConfig,
    clips: &[Tensor],
    base_texts: &Tensor,
    labels: &[usize],
    alpha: f64,
) -> Result<StageOneTerms> {
    let ev = video_forward(g, params, cfg, clips)?;
    let bt = g.constant(base_texts.clone());
    let et = text_forward(g, params, bt)?;
    let ett = g.transpose(et)?;
    let sims = g.matmul(ev, ett)?;
    let it = inv_tau(g, params)?;
    let logits = g.mul_scalar_var(sims, it)?;
    let targets = teacher_targets(clips, base_texts)?;
    let l_text = nce_text_graph(g, logits, labels)?;
    let l_video = nce_video_graph(g, logits, labels)?;
    let l_dist = distill_graph(g, logits, &targets)?;
    let l_pre = pretrain_graph(g, l_text, l_video, l_dist, alpha)?;
    Ok(StageOneTerms {
        l_text,
        l_video,
        l_dist,
        l_pre,
    })
}

/// Teacher soft targets of a batch, computed from base embeddings.
pub fn teacher_targets(clips: &[Tensor], base_texts: &Tensor) -> Result<TeacherTargets> {
    let tv: Vec<Vec<f64>> = clips.iter().map(teacher_encode_video).collect::<Result<_>>()?;
    let tt: Vec<Vec<f64>> = (0..base_texts.rows())
        .map(|i| teacher_encode_text(base_texts.row(i)))
        .collect::<Result<_>>()?;
    let mut sims = Vec::with_capacity(tv.len() * tt.len());
    for v in &tv {
        for t in &tt {
            sims.push(crate::tensor::dot(v, t));
        }
    }
    TeacherTargets::from_sims(&Tensor::new(vec![tv.len(), tt.len()], sims)?, TEACHER_TAU)
}

/// Base inputs of a batch: frame matrices and a `[N, D_base]` sentence matrix.
pub fn batch_inputs(bank: &EmbeddingBank, batch: &Batch) -> Result<(Vec<Tensor>, Tensor)> {
    let clips = batch.videos.iter().map(|&v| bank.frames(v)).collect();
    let rows: Vec<Vec<f64>> = batch.sentences.iter().map(|&r| bank.row_f64(r)).collect();
    Ok((clips, Tensor::from_rows(&rows)?))
}

fn steps_per_epoch(n_train: usize, batch: usize) -> usize {
    let full = n_train / batch;
    full + usize::from(n_train % batch >= 2)
}

/// Trains the student in place and returns one loss record per step.
/// `on_epoch` runs after every epoch with the epoch index and parameters.
pub fn run_stage1(
    bank: &EmbeddingBank,
    train: &[usize],
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    params: &mut ParamGroup,
    on_epoch: &mut dyn FnMut(usize, &ParamGroup) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if model_cfg.base_dim != bank.dim() {
        return Err(Error::Config(format!(
            "model base width {} does not match bank width {}",
            model_cfg.base_dim,
            bank.dim()
        )));
    }
    if train.len() < 2 {
        return Err(Error::Config(format!("{} training videos, need at least 2", train.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = (steps_per_epoch(train.len(), cfg.batch_size) * cfg.epochs) as u64;
    let mut state = OptimizerState::new(
        params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    cfg.precision.apply(params);
    let mut records = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(bank, train, cfg.batch_size, &mut rng)? {
            let (clips, texts) = batch_inputs(bank, &batch)?;
            let mut g = Graph::new();
            let terms = stage1_forward(&mut g, params, model_cfg, &clips, &texts, &batch.labels, cfg.alpha)?;
            let rec = LossRecord {
                step,
                l_text: g.scalar(terms.l_text),
                l_video: g.scalar(terms.l_video),
                l_dist: g.scalar(terms.l_dist),
                l_pre: g.scalar(terms.l_pre),
                lr: cosine_lr(step, total, cfg.lr)?,
                tau: tau(params)?,
            };
            if !rec.l_pre.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch} step {step}: l_text={} l_video={} l_dist={} tau={}",
                    rec.l_text, rec.l_video, rec.l_dist, rec.tau
                )));
            }
            g.backward(terms.l_pre, params)?;
            adamw_step(params, &mut state, rec.lr)?;
            cfg.precision.apply(params);
            records.push(rec);
            step += 1;
        }
        on_epoch(epoch, params)?;
    }
    Ok(records)
}

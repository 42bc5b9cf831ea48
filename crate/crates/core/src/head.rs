//! Stage II: the bi-modal attention head over salient class texts, its
//! classification loss and training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bank::{decode_blob, encode_blob, write_file};
use crate::checkpoint::Precision;
use crate::error::{Error, Result};
use crate::model::{param, LAYER_NORM_EPS};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState, ParamGroup};
use crate::tensor::Tensor;

/// How classes are scored: the video branch, the text branch, or their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    #[default]
    Both,
    Video,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Hidden width of the video-branch MLP; 0 means the embedding width.
    pub hidden: usize,
    pub mode: HeadMode,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 5e-2,
            hidden: 0,
            mode: HeadMode::Both,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

/// Per-class salient sentence embeddings `[C, M, D]` with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalientTextBank {
    pub classes: usize,
    pub m: usize,
    pub dim: usize,
    #[serde(skip)]
    pub embeddings: Tensor,
    /// Selected sentence ids per class, in selection order.
    pub sentence_ids: Vec<Vec<String>>,
    /// Selection score (contrastive loss) per selected sentence.
    pub scores: Vec<Vec<f64>>,
    pub strategy: String,
    pub digest: String,
}

impl SalientTextBank {
    pub fn validate(&self) -> Result<()> {
        if self.embeddings.shape() != [self.classes, self.m, self.dim] {
            return Err(Error::Dimension(format!(
                "salient embeddings {:?} for {}x{}x{}",
                self.embeddings.shape(),
                self.classes,
                self.m,
                self.dim
            )));
        }
        if self.m == 0 {
            return Err(Error::Contract("salient bank with zero sentences per class".into()));
        }
        for (i, row) in self.embeddings.data().chunks(self.dim).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!("salient row {i} has norm {n}")));
            }
        }
        Ok(())
    }

    /// Embeddings of one class as `[M, D]`.
    pub fn class_texts(&self, class: usize) -> Tensor {
        let n = self.m * self.dim;
        Tensor::new(
            vec![self.m, self.dim],
            self.embeddings.data()[class * n..(class + 1) * n].to_vec(),
        )
        .expect("validated shape")
    }

    /// Provenance path next to a salient blob.
    pub fn provenance_path(path: &Path) -> std::path::PathBuf {
        path.with_extension("provenance.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let blob: Vec<f32> = self.embeddings.data().iter().map(|&v| v as f32).collect();
        write_file(path, &encode_blob(self.dim, &blob))?;
        let json = serde_json::to_vec_pretty(self)?;
        write_file(&Self::provenance_path(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (dim, blob) = decode_blob(&bytes, path)?;
        let prov_path = Self::provenance_path(path);
        let prov = std::fs::read(&prov_path).map_err(|e| Error::io(&prov_path, e))?;
        let mut bank: SalientTextBank = serde_json::from_slice(&prov)?;
        if dim != bank.dim || blob.len() != bank.classes * bank.m * bank.dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "blob of {} values and width {dim} does not match {}x{}x{}",
                    blob.len(),
                    bank.classes,
                    bank.m,
                    bank.dim
                ),
            });
        }
        bank.embeddings = Tensor::new(
            vec![bank.classes, bank.m, bank.dim],
            blob.into_iter().map(f64::from).collect(),
        )?;
        bank.validate()?;
        Ok(bank)
    }
}

fn identity(n: usize) -> Tensor {
    Tensor::eye(n)
}

/// Head parameters: query and key projections (layer norm + linear), the
/// video-branch MLP and the head temperature.
pub fn init_head<R: rand::Rng + ?Sized>(
    dim: usize,
    classes: usize,
    hidden: usize,
    tau: f64,
    rng: &mut R,
) -> Result<ParamGroup> {
    if dim == 0 || classes == 0 || !(tau > 0.0) {
        return Err(Error::Config(format!(
            "head needs positive width, classes and tau (got {dim}, {classes}, {tau})"
        )));
    }
    let h = if hidden == 0 { dim } else { hidden };
    let mut p = ParamGroup::new();
    for side in ["q", "k"] {
        p.insert(&format!("{side}.ln.g"), Tensor::filled(&[dim], 1.0), 1.0, false)?;
        p.insert(&format!("{side}.ln.b"), Tensor::zeros(&[dim]), 1.0, false)?;
        p.insert(&format!("{side}.w"), identity(dim), 1.0, true)?;
        p.insert(&format!("{side}.b"), Tensor::zeros(&[dim]), 1.0, false)?;
    }
    p.insert("mlp.w1", Tensor::randn(&[dim, h], (2.0 / (dim + h) as f64).sqrt(), rng), 1.0, true)?;
    p.insert("mlp.b1", Tensor::zeros(&[h]), 1.0, false)?;
    p.insert("mlp.w2", Tensor::randn(&[h, classes], (2.0 / (h + classes) as f64).sqrt(), rng), 1.0, true)?;
    p.insert("mlp.b2", Tensor::zeros(&[classes]), 1.0, false)?;
    p.insert("log_tau", Tensor::vector(vec![tau.ln()]), 1.0, false)?;
    Ok(p)
}

fn project(g: &mut Graph, head: &ParamGroup, side: &str, x: Var) -> Result<Var> {
    let gain = param(g, head, &format!("{side}.ln.g"))?;
    let bias = param(g, head, &format!("{side}.ln.b"))?;
    let w = param(g, head, &format!("{side}.w"))?;
    let b = param(g, head, &format!("{side}.b"))?;
    let n = g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
    g.linear(n, w, Some(b))
}

/// Attention-gathered class text embedding `G` for every video, `[N, C, D]`.
pub fn attend_graph(g: &mut Graph, head: &ParamGroup, ev: Var, texts: Var) -> Result<Var> {
    let (sv, st) = (g.shape(ev).to_vec(), g.shape(texts).to_vec());
    if sv.len() != 2 || st.len() != 3 || sv[1] != st[2] {
        return Err(Error::Dimension(format!(
            "video embeddings {sv:?} against class texts {st:?}"
        )));
    }
    let (n, c, m, d) = (sv[0], st[0], st[1], st[2]);
    if m == 0 {
        return Err(Error::Contract("class texts with zero sentences".into()));
    }
    let q = project(g, head, "q", ev)?;
    let k = project(g, head, "k", texts)?;
    let k = g.reshape(k, &[c * m, d])?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = g.reshape(scores, &[n, c, m])?;
    let attn = g.softmax(scores)?;
    let attn = g.permute(attn, &[1, 0, 2])?;
    let gathered = g.bmm(attn, texts, false)?;
    g.permute(gathered, &[1, 0, 2])
}

/// Pre-softmax scores of both branches, each `[N, C]`.
pub struct HeadLogits {
    pub video: Var,
    pub text: Var,
}

pub fn head_logits(g: &mut Graph, head: &ParamGroup, ev: Var, texts: Var) -> Result<HeadLogits> {
    let gathered = attend_graph(g, head, ev, texts)?;
    let s = g.shape(gathered).to_vec();
    let (n, c, d) = (s[0], s[1], s[2]);
    let gn = g.l2_normalize(gathered)?;
    let evn = g.l2_normalize(ev)?;
    let evn = g.reshape(evn, &[n, 1, d])?;
    let cos = g.bmm(gn, evn, true)?;
    let cos = g.reshape(cos, &[n, c])?;
    let lt = param(g, head, "log_tau")?;
    let neg = g.scale(lt, -1.0);
    let inv_tau = g.exp(neg);
    let text = g.mul_scalar_var(cos, inv_tau)?;

    let w1 = param(g, head, "mlp.w1")?;
    let b1 = param(g, head, "mlp.b1")?;
    let w2 = param(g, head, "mlp.w2")?;
    let b2 = param(g, head, "mlp.b2")?;
    let h = g.linear(ev, w1, Some(b1))?;
    let h = g.gelu(h);
    let video = g.linear(h, w2, Some(b2))?;
    if g.shape(video)[1] != c {
        return Err(Error::Contract(format!(
            "head predicts {} classes but the salient bank holds {c}",
            g.shape(video)[1]
        )));
    }
    Ok(HeadLogits { video, text })
}

/// Two cross-entropies on the branch distributions, averaged over the batch.
pub fn cls_loss_graph(g: &mut Graph, logits: &HeadLogits, labels: &[usize], mode: HeadMode) -> Result<Var> {
    let ce = |g: &mut Graph, l: Var| -> Result<Var> {
        let lp = g.log_softmax(l)?;
        let picked = g.pick(lp, labels)?;
        let m = g.mean(picked)?;
        Ok(g.scale(m, -1.0))
    };
    match mode {
        HeadMode::Both => {
            let a = ce(g, logits.video)?;
            let b = ce(g, logits.text)?;
            g.add(a, b)
        }
        HeadMode::Video => ce(g, logits.video),
        HeadMode::Text => ce(g, logits.text),
    }
}

/// `CE(p_v, y) + CE(p_t, y)` on probability vectors.
pub fn cls_loss(p_v: &[f64], p_t: &[f64], y: usize) -> Result<f64> {
    if y >= p_v.len() || y >= p_t.len() {
        return Err(Error::Range(format!("class {y} of {}", p_v.len())));
    }
    Ok(-p_v[y].ln() - p_t[y].ln())
}

/// Class distributions of a batch of videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub logits_v: Tensor,
    pub logits_t: Tensor,
    pub p_v: Tensor,
    pub p_t: Tensor,
    /// `p_v + p_t`, each row sums to 2.
    pub p: Tensor,
}

impl Classification {
    /// Scores used for ranking under a head mode.
    pub fn scores(&self, mode: HeadMode) -> &Tensor {
        match mode {
            HeadMode::Both => &self.p,
            HeadMode::Video => &self.p_v,
            HeadMode::Text => &self.p_t,
        }
    }

    /// Fused pre-softmax activation `logits_v + logits_t`.
    pub fn activations(&self) -> Tensor {
        let data = self
            .logits_v
            .data()
            .iter()
            .zip(self.logits_t.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.logits_v.shape().to_vec(), data).expect("same shape")
    }
}

const CLASSIFY_CHUNK: usize = 256;

/// Runs the head on unit video embeddings `[N, D]`.
pub fn classify(head: &ParamGroup, ev: &Tensor, salient: &SalientTextBank) -> Result<Classification> {
    if ev.rank() != 2 || ev.last_dim() != salient.dim {
        return Err(Error::Contract(format!(
            "video embeddings {:?} against salient width {}",
            ev.shape(),
            salient.dim
        )));
    }
    let c = salient.classes;
    let (mut lv, mut lt) = (Vec::new(), Vec::new());
    for start in (0..ev.rows()).step_by(CLASSIFY_CHUNK) {
        let end = (start + CLASSIFY_CHUNK).min(ev.rows());
        let chunk = Tensor::new(
            vec![end - start, salient.dim],
            ev.data()[start * salient.dim..end * salient.dim].to_vec(),
        )?;
        let mut g = Graph::new();
        let e = g.constant(chunk);
        let t = g.constant(salient.embeddings.clone());
        let l = head_logits(&mut g, head, e, t)?;
        lv.extend_from_slice(g.value(l.video).data());
        lt.extend_from_slice(g.value(l.text).data());
    }
    let n = ev.rows();
    let logits_v = Tensor::new(vec![n, c], lv)?;
    let logits_t = Tensor::new(vec![n, c], lt)?;
    let softmax_rows = |t: &Tensor| -> Result<Tensor> {
        let mut out = Vec::with_capacity(t.numel());
        for i in 0..t.rows() {
            out.extend(crate::tensor::softmax_slice(t.row(i)));
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    let p_v = softmax_rows(&logits_v)?;
    let p_t = softmax_rows(&logits_t)?;
    let p = Tensor::new(
        vec![n, c],
        p_v.data().iter().zip(p_t.data()).map(|(a, b)| a + b).collect(),
    )?;
    Ok(Classification {
        logits_v,
        logits_t,
        p_v,
        p_t,
        p,
    })
}

/// `G` for one video and one class: attention-weighted mean of `M` texts.
pub fn bimodal_attend(head: &ParamGroup, ev: &[f64], class_texts: &Tensor) -> Result<Vec<f64>> {
    if class_texts.rank() != 2 || class_texts.rows() == 0 {
        return Err(Error::Contract(format!(
            "class texts of shape {:?}",
            class_texts.shape()
        )));
    }
    let d = class_texts.last_dim();
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(vec![1, ev.len()], ev.to_vec())?);
    let t = g.constant(class_texts.clone().reshape(&[1, class_texts.rows(), d])?);
    let out = attend_graph(&mut g, head, e, t)?;
    Ok(g.value(out).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Trains the head on frozen video embeddings `[N, D]`.
pub fn run_stage2(
    ev: &Tensor,
    labels: &[usize],
    salient: &SalientTextBank,
    cfg: &HeadConfig,
    head: &mut ParamGroup,
) -> Result<Vec<HeadRecord>> {
    salient.validate()?;
    if ev.rank() != 2 || ev.rows() != labels.len() || ev.last_dim() != salient.dim {
        return Err(Error::Dimension(format!(
            "{:?} embeddings for {} labels at width {}",
            ev.shape(),
            labels.len(),
            salient.dim
        )));
    }
    if labels.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("stage II needs training videos and a positive batch size".into()));
    }
    let n = labels.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(
        head,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    cfg.precision.apply(head);
    let d = salient.dim;
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                data.extend_from_slice(ev.row(i));
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let e = g.constant(Tensor::new(vec![chunk.len(), d], data)?);
            let t = g.constant(salient.embeddings.clone());
            let logits = head_logits(&mut g, head, e, t)?;
            let loss = cls_loss_graph(&mut g, &logits, &y, cfg.mode)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("non-finite head loss at step {step}")));
            }
            let lr = cosine_lr(step, total, cfg.lr)?;
            g.backward(loss, head)?;
            // Parameters outside the active branch receive no gradient.
            for id in head.ids().collect::<Vec<_>>() {
                if head.grad(id).is_none() {
                    let zeros = vec![0.0; head.value(id).numel()];
                    head.accumulate_grad(id, &zeros)?;
                }
            }
            adamw_step(head, &mut state, lr)?;
            cfg.precision.apply(head);
            records.push(HeadRecord { step, loss: value, lr });
            step += 1;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_text_is_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = init_head(3, 2, 0, 0.07, &mut rng).unwrap();
        let t = Tensor::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap();
        let g = bimodal_attend(&head, &[1.0, 0.0, 0.0], &t).unwrap();
        assert_eq!(g, vec![0.6, 0.8, 0.0]);
    }

    #[test]
    fn uniform_loss() {
        let l = cls_loss(&[0.25; 4], &[0.25; 4], 2).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(cls_loss(&[1.0, 0.0], &[1.0, 0.0], 0).unwrap(), 0.0);
    }
}

//! Student encoders (modality adapters, temporal transformer, learned
//! temperature) and the parameter-free mean-pooling teacher.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamGroup;
use crate::tensor::{l2_norm, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Fixed teacher temperature.
pub const TEACHER_TAU: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub ff_mult: usize,
    pub tau_init: f64,
    pub pe_std: f64,
    /// Learning-rate multiplier of both modality adapters.
    pub adapter_lr_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_dim: 0,
            dim: 0,
            layers: 6,
            heads: 8,
            max_frames: 32,
            ff_mult: 4,
            tau_init: 0.07,
            pe_std: 0.02,
            adapter_lr_scale: 0.01,
        }
    }
}

impl ModelConfig {
    /// Fills zero widths: the base width from the bank, the shared width
    /// from the base width.
    pub fn resolve(&mut self, bank_dim: usize) -> Result<()> {
        if self.base_dim == 0 {
            self.base_dim = bank_dim;
        }
        if self.dim == 0 {
            self.dim = self.base_dim;
        }
        if self.base_dim != bank_dim {
            return Err(Error::Config(format!(
                "model base width {} does not match bank width {bank_dim}",
                self.base_dim
            )));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_dim == 0 || self.dim == 0 {
            problems.push("dimensions must be positive".to_string());
        }
        if self.heads == 0 || self.dim % self.heads.max(1) != 0 {
            problems.push(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.max_frames == 0 {
            problems.push("max_frames must be positive".to_string());
        }
        if self.ff_mult == 0 {
            problems.push("ff_mult must be positive".to_string());
        }
        if !(self.tau_init > 0.0) {
            problems.push(format!("tau_init must be positive, got {}", self.tau_init));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Rectangular identity: ones on the leading diagonal.
fn identity(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.data_mut()[i * cols + i] = 1.0;
    }
    t
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], (2.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Builds the student parameter set.
///
/// Adapters start as identity maps, and the residual branches end in
/// zero-initialized projections, so with a zero positional encoding the
/// student reproduces the teacher exactly.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamGroup> {
    cfg.validate()?;
    let (db, d) = (cfg.base_dim, cfg.dim);
    let hidden = d * cfg.ff_mult;
    let a = cfg.adapter_lr_scale;
    let mut p = ParamGroup::new();
    p.insert("video_adapter.w", identity(db, d), a, true)?;
    p.insert("video_adapter.b", Tensor::zeros(&[d]), a, false)?;
    p.insert("text_adapter.w", identity(db, d), a, true)?;
    p.insert("text_adapter.b", Tensor::zeros(&[d]), a, false)?;
    p.insert("pe", Tensor::randn(&[cfg.max_frames, d], cfg.pe_std, rng), 1.0, false)?;
    for l in 0..cfg.layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        p.insert(&n("ln1.g"), Tensor::filled(&[d], 1.0), 1.0, false)?;
        p.insert(&n("ln1.b"), Tensor::zeros(&[d]), 1.0, false)?;
        for proj in ["q", "k", "v"] {
            p.insert(&n(&format!("attn.w{proj}")), xavier(d, d, rng), 1.0, true)?;
            p.insert(&n(&format!("attn.b{proj}")), Tensor::zeros(&[d]), 1.0, false)?;
        }
        p.insert(&n("attn.wo"), Tensor::zeros(&[d, d]), 1.0, true)?;
        p.insert(&n("attn.bo"), Tensor::zeros(&[d]), 1.0, false)?;
        p.insert(&n("ln2.g"), Tensor::filled(&[d], 1.0), 1.0, false)?;
        p.insert(&n("ln2.b"), Tensor::zeros(&[d]), 1.0, false)?;
        p.insert(&n("ff.w1"), xavier(d, hidden, rng), 1.0, true)?;
        p.insert(&n("ff.b1"), Tensor::zeros(&[hidden]), 1.0, false)?;
        p.insert(&n("ff.w2"), Tensor::zeros(&[hidden, d]), 1.0, true)?;
        p.insert(&n("ff.b2"), Tensor::zeros(&[d]), 1.0, false)?;
    }
    p.insert("log_tau", Tensor::vector(vec![cfg.tau_init.ln()]), 1.0, false)?;
    Ok(p)
}

pub(crate) fn param(g: &mut Graph, params: &ParamGroup, name: &str) -> Result<Var> {
    let id = params
        .id(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
    Ok(g.param(params, id))
}

/// Learned temperature `exp(log_tau)`.
pub fn tau(params: &ParamGroup) -> Result<f64> {
    params
        .by_name("log_tau")
        .map(|t| t.data()[0].exp())
        .ok_or_else(|| Error::Contract("missing parameter log_tau".into()))
}

/// `1 / tau` as a differentiable scalar node.
pub fn inv_tau(g: &mut Graph, params: &ParamGroup) -> Result<Var> {
    let lt = param(g, params, "log_tau")?;
    let neg = g.scale(lt, -1.0);
    Ok(g.exp(neg))
}

/// Student text path over base sentence vectors `[N, D_base]`, unit-norm `[N, D]`.
pub fn text_forward(g: &mut Graph, params: &ParamGroup, base: Var) -> Result<Var> {
    let w = param(g, params, "text_adapter.w")?;
    let b = param(g, params, "text_adapter.b")?;
    let h = g.linear(base, w, Some(b))?;
    g.l2_normalize(h)
}

fn split_heads(g: &mut Graph, x: Var, n: usize, f: usize, h: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[n, f, h, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[n * h, f, dh])
}

fn encoder_layer(
    g: &mut Graph,
    params: &ParamGroup,
    cfg: &ModelConfig,
    l: usize,
    x: Var,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, f, d) = (s[0], s[1], s[2]);
    let (h, dh) = (cfg.heads, d / cfg.heads);
    let p = |g: &mut Graph, name: &str| param(g, params, &format!("layers.{l}.{name}"));

    let (g1, b1) = (p(g, "ln1.g")?, p(g, "ln1.b")?);
    let hn = g.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
    let mut proj = Vec::with_capacity(3);
    for name in ["q", "k", "v"] {
        let w = p(g, &format!("attn.w{name}"))?;
        let b = p(g, &format!("attn.b{name}"))?;
        let y = g.linear(hn, w, Some(b))?;
        proj.push(split_heads(g, y, n, f, h, dh)?);
    }
    let scores = g.bmm(proj[0], proj[1], true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores)?;
    let ctx = g.bmm(attn, proj[2], false)?;
    let ctx = g.reshape(ctx, &[n, h, f, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, f, d])?;
    let (wo, bo) = (p(g, "attn.wo")?, p(g, "attn.bo")?);
    let out = g.linear(ctx, wo, Some(bo))?;
    let x = g.add(x, out)?;

    let (g2, b2) = (p(g, "ln2.g")?, p(g, "ln2.b")?);
    let hn = g.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
    let (w1, bb1) = (p(g, "ff.w1")?, p(g, "ff.b1")?);
    let y = g.linear(hn, w1, Some(bb1))?;
    let y = g.gelu(y);
    let (w2, bb2) = (p(g, "ff.w2")?, p(g, "ff.b2")?);
    let y = g.linear(y, w2, Some(bb2))?;
    g.add(x, y)
}

/// Student video path over same-length clips `[N, F, D_base]`, unit-norm `[N, D]`.
pub fn video_forward_uniform(
    g: &mut Graph,
    params: &ParamGroup,
    cfg: &ModelConfig,
    frames: Var,
) -> Result<Var> {
    let s = g.shape(frames).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("video batch of shape {s:?}")));
    }
    let f = s[1];
    if f == 0 {
        return Err(Error::Dimension("video with zero frames".into()));
    }
    if f > cfg.max_frames {
        return Err(Error::Capacity(format!(
            "{f} frames exceed the positional encoding of {} rows",
            cfg.max_frames
        )));
    }
    let w = param(g, params, "video_adapter.w")?;
    let b = param(g, params, "video_adapter.b")?;
    let mut x = g.linear(frames, w, Some(b))?;
    let pe = param(g, params, "pe")?;
    let pe = g.slice_rows(pe, 0, f)?;
    x = g.add_broadcast(x, pe)?;
    for l in 0..cfg.layers {
        x = encoder_layer(g, params, cfg, l, x)?;
    }
    let pooled = g.mean_axis(x, 1)?;
    g.l2_normalize(pooled)
}

/// Student video path over clips of any length, `[N, D]` in input order.
pub fn video_forward(
    g: &mut Graph,
    params: &ParamGroup,
    cfg: &ModelConfig,
    clips: &[Tensor],
) -> Result<Var> {
    if clips.is_empty() {
        return Err(Error::Dimension("empty video batch".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        if c.rank() != 2 || c.last_dim() != cfg.base_dim {
            return Err(Error::Dimension(format!(
                "clip of shape {:?} for base width {}",
                c.shape(),
                cfg.base_dim
            )));
        }
        groups.entry(c.shape()[0]).or_default().push(i);
    }
    if groups.len() == 1 {
        let f = clips[0].shape()[0];
        let x = stack(clips, f, cfg.base_dim)?;
        let x = g.constant(x);
        return video_forward_uniform(g, params, cfg, x);
    }
    let mut outs = Vec::new();
    let mut order = Vec::with_capacity(clips.len());
    for (&f, members) in &groups {
        let picked: Vec<Tensor> = members.iter().map(|&i| clips[i].clone()).collect();
        let x = stack(&picked, f, cfg.base_dim)?;
        let x = g.constant(x);
        outs.push(video_forward_uniform(g, params, cfg, x)?);
        order.extend_from_slice(members);
    }
    let cat = g.concat_rows(&outs)?;
    let mut inverse = vec![0; clips.len()];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    g.gather_rows(cat, &inverse)
}

fn stack(clips: &[Tensor], f: usize, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(clips.len() * f * d);
    for c in clips {
        data.extend_from_slice(c.data());
    }
    Tensor::new(vec![clips.len(), f, d], data)
}

/// Rows of a `[N, D]` node as a plain tensor.
fn run<F>(f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).clone())
}

const ENCODE_CHUNK: usize = 256;

/// Unit-norm student embeddings of many clips, `[N, D]`.
pub fn encode_videos(params: &ParamGroup, cfg: &ModelConfig, clips: &[Tensor]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(clips.len() * cfg.dim);
    for chunk in clips.chunks(ENCODE_CHUNK) {
        let t = run(|g| video_forward(g, params, cfg, chunk))?;
        rows.extend_from_slice(t.data());
    }
    Tensor::new(vec![clips.len(), cfg.dim], rows)
}

/// Unit-norm student embeddings of many base sentence vectors `[N, D_base]`.
pub fn encode_texts(params: &ParamGroup, base: &Tensor) -> Result<Tensor> {
    run(|g| {
        let x = g.constant(base.clone());
        text_forward(g, params, x)
    })
}

pub fn encode_video(params: &ParamGroup, cfg: &ModelConfig, frames: &Tensor) -> Result<Vec<f64>> {
    Ok(encode_videos(params, cfg, std::slice::from_ref(frames))?.into_data())
}

pub fn encode_text(params: &ParamGroup, base: &[f64]) -> Result<Vec<f64>> {
    let t = Tensor::new(vec![1, base.len()], base.to_vec())?;
    Ok(encode_texts(params, &t)?.into_data())
}

fn normalized(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = l2_norm(&v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateInput(format!("embedding norm {n}")));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Teacher video embedding: normalized frame mean.
///
/// Frames are summed in a canonical (sorted) order so the result is bitwise
/// independent of frame order.
pub fn teacher_encode_video(frames: &Tensor) -> Result<Vec<f64>> {
    if frames.rank() != 2 || frames.rows() == 0 {
        return Err(Error::Dimension(format!("teacher clip of shape {:?}", frames.shape())));
    }
    let d = frames.last_dim();
    let mut rows: Vec<&[f64]> = (0..frames.rows()).map(|i| frames.row(i)).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let inv = 1.0 / frames.rows() as f64;
    normalized(mean.into_iter().map(|m| m * inv).collect())
}

/// Teacher text embedding: the normalized base vector.
pub fn teacher_encode_text(base: &[f64]) -> Result<Vec<f64>> {
    normalized(base.to_vec())
}

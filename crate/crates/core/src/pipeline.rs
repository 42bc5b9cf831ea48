//! Stage orchestration over a bank and a split: Stage I pretraining, text
//! selection, Stage II head training and embedding extraction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::EmbeddingBank;
use crate::config::{stage_seed, RunConfig};
use crate::dataset::resolve_videos;
use crate::error::{Error, Result};
use crate::head::{init_head, run_stage2, HeadConfig, HeadRecord, SalientTextBank};
use crate::model::{encode_videos, init_params, tau, ModelConfig};
use crate::optim::ParamGroup;
use crate::pretrain::{run_stage1, LossRecord};
use crate::splits::SplitSpec;
use crate::tensor::Tensor;
use crate::tsr::{select_salient_texts, TsrConfig};

/// Bank video indices and split labels of a list of video ids. Videos of
/// classes outside the label space get `None`.
pub fn labelled_videos(
    bank: &EmbeddingBank,
    split: &SplitSpec,
    ids: &[String],
) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let idx = resolve_videos(bank, ids)?;
    let labels = idx
        .iter()
        .map(|&v| split.label_of(bank.video(v).class_id))
        .collect();
    Ok((idx, labels))
}

/// Training videos with their labels; every one must be in the label space.
pub fn training_set(bank: &EmbeddingBank, split: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let (idx, labels) = labelled_videos(bank, split, &split.train)?;
    let labels = labels
        .into_iter()
        .zip(&idx)
        .map(|(l, &v)| {
            l.ok_or_else(|| {
                Error::Contract(format!(
                    "training video {} has class {} outside the label space",
                    bank.video(v).id,
                    bank.video(v).class_id
                ))
            })
        })
        .collect::<Result<_>>()?;
    Ok((idx, labels))
}

/// Per-label pools of training videos.
pub fn probe_pools(bank: &EmbeddingBank, split: &SplitSpec) -> Result<Vec<Vec<usize>>> {
    let (idx, labels) = training_set(bank, split)?;
    let mut pools = vec![Vec::new(); split.classes.len()];
    for (v, l) in idx.into_iter().zip(labels) {
        pools[l].push(v);
    }
    Ok(pools)
}

/// Resolved model configuration for a bank.
pub fn model_config(cfg: &RunConfig, bank: &EmbeddingBank) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    m.resolve(bank.dim())?;
    Ok(m)
}

/// Freshly initialized student parameters.
pub fn init_student(cfg: &RunConfig, model_cfg: &ModelConfig) -> Result<ParamGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "init"));
    let mut p = init_params(model_cfg, &mut rng)?;
    cfg.precision.apply(&mut p);
    Ok(p)
}

/// Stage I on the split's training videos.
pub fn pretrain(
    bank: &EmbeddingBank,
    split: &SplitSpec,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(usize, &ParamGroup) -> Result<()>,
) -> Result<(ParamGroup, Vec<LossRecord>)> {
    let model_cfg = model_config(cfg, bank)?;
    let mut params = init_student(cfg, &model_cfg)?;
    let (train, _) = training_set(bank, split)?;
    let curve = run_stage1(bank, &train, &model_cfg, &cfg.pretrain, &mut params, on_epoch)?;
    Ok((params, curve))
}

/// Salient texts for the split's label space, probing with its training videos.
pub fn select_texts(
    params: &ParamGroup,
    model_cfg: &ModelConfig,
    bank: &EmbeddingBank,
    split: &SplitSpec,
    tsr: &TsrConfig,
    digest: &str,
) -> Result<SalientTextBank> {
    let pools = probe_pools(bank, split)?;
    select_salient_texts(params, model_cfg, bank, &split.classes, &pools, tsr, digest)
}

/// Student embeddings of bank videos.
pub fn embed(params: &ParamGroup, model_cfg: &ModelConfig, bank: &EmbeddingBank, videos: &[usize]) -> Result<Tensor> {
    let clips: Vec<Tensor> = videos.iter().map(|&v| bank.frames(v)).collect();
    encode_videos(params, model_cfg, &clips)
}

/// Stage II on the split's training videos with a frozen student.
pub fn train_head(
    params: &ParamGroup,
    model_cfg: &ModelConfig,
    bank: &EmbeddingBank,
    split: &SplitSpec,
    salient: &SalientTextBank,
    head_cfg: &HeadConfig,
) -> Result<(ParamGroup, Vec<HeadRecord>)> {
    let (train, labels) = training_set(bank, split)?;
    let ev = embed(params, model_cfg, bank, &train)?;
    train_head_on(&ev, &labels, salient, head_cfg, tau(params)?)
}

/// Stage II on precomputed embeddings.
pub fn train_head_on(
    ev: &Tensor,
    labels: &[usize],
    salient: &SalientTextBank,
    head_cfg: &HeadConfig,
    tau: f64,
) -> Result<(ParamGroup, Vec<HeadRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(head_cfg.seed);
    let mut head = init_head(salient.dim, salient.classes, head_cfg.hidden, tau, &mut rng)?;
    head_cfg.precision.apply(&mut head);
    let curve = run_stage2(ev, labels, salient, head_cfg, &mut head)?;
    Ok((head, curve))
}

//! Training-free text selection: every sentence of a class is scored by its
//! contrastive loss against a probe set of videos, and the lowest-loss
//! sentences are kept as the class's salient texts.

use std::cmp::Ordering;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::bank::{EmbeddingBank, SentenceSource};
use crate::error::{Error, Result};
use crate::head::SalientTextBank;
use crate::model::{encode_texts, encode_videos, tau, ModelConfig};
use crate::optim::ParamGroup;
use crate::pretrain::nce_text_per_anchor;
use crate::tensor::Tensor;

/// How the per-class sentences are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Lowest contrastive loss against the probe videos.
    #[default]
    Tsr,
    /// Uniformly random sentences.
    Rand,
    /// Prompt sentences only.
    Basic,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Tsr => "tsr",
            Strategy::Rand => "rand",
            Strategy::Basic => "basic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsrConfig {
    /// Probe videos per class.
    pub lambda: usize,
    /// Sentences kept per class.
    pub m: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for TsrConfig {
    fn default() -> Self {
        Self {
            lambda: 50,
            m: 64,
            seed: 0,
            strategy: Strategy::Tsr,
        }
    }
}

impl TsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0 || self.m == 0 {
            return Err(Error::Config(format!(
                "lambda and m must be positive, got {} and {}",
                self.lambda, self.m
            )));
        }
        Ok(())
    }
}

/// Contrastive loss of each sentence `[S, D]` of class `class` against probe
/// videos `[P, D]`: probe videos of the same class are positives and every
/// probe video is in the denominator.
pub fn score_sentences(
    probe: &Tensor,
    probe_labels: &[usize],
    sentences: &Tensor,
    class: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    if sentences.rows() == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let v = g.constant(probe.clone());
    let t = g.constant(sentences.clone());
    let tt = g.transpose(t)?;
    let sims = g.matmul(v, tt)?;
    let logits = g.scale(sims, 1.0 / tau);
    let labels = vec![class; sentences.rows()];
    let per = nce_text_per_anchor(&mut g, logits, probe_labels, &labels)?;
    Ok(g.value(per).data().to_vec())
}

/// Indices of the `m` smallest scores, ties broken by ascending id.
pub fn rank_lowest(scores: &[f64], ids: &[usize], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(ids[a].cmp(&ids[b]))
            .then(Ordering::Equal)
    });
    order.truncate(m);
    order
}

/// Selects `cfg.m` sentences for every label.
///
/// `classes[l]` is the bank class of label `l`; `probe_pools[l]` lists the
/// bank video indices a label's probe videos are drawn from.
pub fn select_salient_texts(
    params: &ParamGroup,
    model_cfg: &ModelConfig,
    bank: &EmbeddingBank,
    classes: &[usize],
    probe_pools: &[Vec<usize>],
    cfg: &TsrConfig,
    digest: &str,
) -> Result<SalientTextBank> {
    cfg.validate()?;
    if classes.len() != probe_pools.len() || classes.is_empty() {
        return Err(Error::Config(format!(
            "{} classes with {} probe pools",
            classes.len(),
            probe_pools.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe_videos = Vec::new();
    let mut probe_labels = Vec::new();
    for (label, pool) in probe_pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "class {} has no videos to probe its sentences with",
                classes[label]
            )));
        }
        let k = cfg.lambda.min(pool.len());
        let mut picked: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
        picked.sort_unstable();
        probe_labels.extend(std::iter::repeat_n(label, k));
        probe_videos.extend(picked);
    }
    let clips: Vec<Tensor> = probe_videos.iter().map(|&v| bank.frames(v)).collect();
    let probe = encode_videos(params, model_cfg, &clips)?;
    let t = tau(params)?;

    let d = model_cfg.dim;
    let mut embeddings = Vec::with_capacity(classes.len() * cfg.m * d);
    let mut sentence_ids = Vec::with_capacity(classes.len());
    let mut all_scores = Vec::with_capacity(classes.len());
    for (label, &class) in classes.iter().enumerate() {
        let records = bank.sentences(class);
        if records.is_empty() {
            return Err(Error::Config(format!("class {class} has no sentences")));
        }
        let base: Vec<Vec<f64>> = records.iter().map(|s| bank.row_f64(s.row)).collect();
        let emb = encode_texts(params, &Tensor::from_rows(&base)?)?;
        let scores = score_sentences(&probe, &probe_labels, &emb, label, t)?;
        let rows: Vec<usize> = records.iter().map(|s| s.row).collect();
        let candidates: Vec<usize> = match cfg.strategy {
            Strategy::Tsr => rank_lowest(&scores, &rows, cfg.m),
            Strategy::Rand => {
                let mut all: Vec<usize> = (0..records.len()).collect();
                all.shuffle(&mut rng);
                all.truncate(cfg.m);
                all
            }
            Strategy::Basic => {
                let mut prompts: Vec<usize> = (0..records.len())
                    .filter(|&i| records[i].source == SentenceSource::Prompt)
                    .collect();
                if prompts.is_empty() {
                    return Err(Error::Config(format!("class {class} has no prompt sentences")));
                }
                if prompts.len() > cfg.m {
                    prompts.shuffle(&mut rng);
                    prompts.truncate(cfg.m);
                }
                prompts
            }
        };
        let mut chosen = candidates.clone();
        while chosen.len() < cfg.m {
            chosen.push(*candidates.choose(&mut rng).expect("nonempty"));
        }
        for &i in &chosen {
            embeddings.extend(emb.row(i).iter().map(|&v| v as f32 as f64));
        }
        sentence_ids.push(chosen.iter().map(|&i| records[i].id.clone()).collect());
        all_scores.push(chosen.iter().map(|&i| scores[i]).collect());
    }
    let bank = SalientTextBank {
        classes: classes.len(),
        m: cfg.m,
        dim: d,
        embeddings: Tensor::new(vec![classes.len(), cfg.m, d], embeddings)?,
        sentence_ids,
        scores: all_scores,
        strategy: cfg.strategy.name().to_string(),
        digest: digest.to_string(),
    };
    bank.validate()?;
    Ok(bank)
}

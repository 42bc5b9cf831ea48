//! Regime evaluation and report emission.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bank::EmbeddingBank;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::{classify, HeadConfig, HeadMode, SalientTextBank};
use crate::metrics::{
    f_measure, mean_std, predictions, subset_accuracy, threshold_postprocess, topk_accuracy,
    FMeasure, SubsetAccuracy,
};
use crate::model::{tau, ModelConfig};
use crate::openmax::{openmax_fit, openmax_postprocess};
use crate::optim::ParamGroup;
use crate::pipeline::{embed, labelled_videos, probe_pools, train_head_on, training_set};
use crate::probe::linear_probe;
use crate::splits::{Regime, SplitSpec};
use crate::tensor::Tensor;
use crate::tsr::select_salient_texts;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub known_predictions: usize,
    pub f_measure: FMeasure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxSummary {
    pub f_measure: FMeasure,
    pub fallback_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub method: String,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

impl EpisodeSummary {
    pub fn new(method: &str, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            method: method.to_string(),
            trials: accuracies.len(),
            mean,
            std,
            accuracies,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsets: Option<SubsetAccuracy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<ThresholdPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub openmax: Option<OpenMaxSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub episodes: Vec<EpisodeSummary>,
    pub config_digest: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl EvalReport {
    fn empty(regime: Regime, cfg: &RunConfig) -> Self {
        Self {
            regime,
            samples: 0,
            top1: None,
            top5: None,
            subsets: None,
            thresholds: Vec::new(),
            openmax: None,
            episodes: Vec::new(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            flags: Vec::new(),
        }
    }

    /// Flat `metric,value` rows.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("samples".into(), self.samples as f64);
        if let Some(v) = self.top1 {
            m.insert("top1".into(), v);
        }
        if let Some(v) = self.top5 {
            m.insert("top5".into(), v);
        }
        if let Some(s) = &self.subsets {
            m.insert("overall".into(), s.overall);
            for (name, b) in [("many", &s.many), ("medium", &s.medium), ("few", &s.few)] {
                if let Some(b) = b {
                    m.insert(name.into(), b.accuracy);
                }
            }
        }
        for t in &self.thresholds {
            m.insert(format!("f_thr_{}", t.threshold), t.f_measure.f);
            m.insert(format!("known_thr_{}", t.threshold), t.known_predictions as f64);
        }
        if let Some(o) = &self.openmax {
            m.insert("f_openmax".into(), o.f_measure.f);
        }
        for e in &self.episodes {
            m.insert(format!("{}_mean", e.method), e.mean);
            m.insert(format!("{}_std", e.method), e.std);
            m.insert(format!("{}_trials", e.method), e.trials as f64);
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,metric,value\n");
        for (k, v) in self.metrics() {
            out.push_str(&format!("{},{k},{v}\n", self.regime.name()));
        }
        out
    }

    /// Headline score used for cross-regime comparison.
    pub fn headline(&self) -> Option<f64> {
        match self.regime {
            Regime::Close => self.top1,
            Regime::Lt => self.subsets.as_ref().map(|s| s.overall),
            Regime::Fewshot5x5 | Regime::FewshotCway => self.episodes.first().map(|e| e.mean),
            Regime::Open => self
                .thresholds
                .iter()
                .map(|t| t.f_measure.f)
                .chain(self.openmax.iter().map(|o| o.f_measure.f))
                .fold(None, |acc: Option<f64>, f| Some(acc.map_or(f, |a| a.max(f)))),
        }
    }
}

/// Merges reports into a `regime,run,metric,value` table and a radar table
/// of headline scores. Repeated runs of one regime (such as the trials of
/// the C-way protocol) are numbered in the table and averaged in the radar.
pub fn merge_reports(reports: &[EvalReport]) -> (String, String) {
    let mut table = String::from("regime,run,metric,value\n");
    let mut runs: Vec<(Regime, Vec<f64>)> = Vec::new();
    let mut seen: BTreeMap<&'static str, usize> = BTreeMap::new();
    for r in reports {
        let run = seen.entry(r.regime.name()).or_insert(0);
        for (k, v) in r.metrics() {
            table.push_str(&format!("{},{run},{k},{v}\n", r.regime.name()));
        }
        *run += 1;
        if let Some(h) = r.headline() {
            match runs.iter_mut().find(|(g, _)| *g == r.regime) {
                Some((_, hs)) => hs.push(h),
                None => runs.push((r.regime, vec![h])),
            }
        }
    }
    let mut radar = String::from("regime,score,runs\n");
    for (regime, hs) in runs {
        let (mean, _) = mean_std(&hs);
        radar.push_str(&format!("{},{mean},{}\n", regime.name(), hs.len()));
    }
    (table, radar)
}

fn labels_in_space(labels: Vec<Option<usize>>, regime: Regime) -> Result<Vec<usize>> {
    labels
        .into_iter()
        .map(|l| l.ok_or_else(|| Error::Contract(format!("{} test video outside the label space", regime.name()))))
        .collect()
}

/// Close-set, long-tail and open-set evaluation of trained artifacts.
pub fn evaluate_regime(
    bank: &EmbeddingBank,
    split: &SplitSpec,
    params: &ParamGroup,
    model_cfg: &ModelConfig,
    head: &ParamGroup,
    salient: &SalientTextBank,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    if salient.classes != split.classes.len() {
        return Err(Error::Contract(format!(
            "salient bank has {} classes, split has {}",
            salient.classes,
            split.classes.len()
        )));
    }
    let mode = cfg.head.mode;
    let mut report = EvalReport::empty(split.regime, cfg);
    let (test, labels) = labelled_videos(bank, split, &split.test)?;
    report.samples = test.len();
    let ev = embed(params, model_cfg, bank, &test)?;
    let out = classify(head, &ev, salient)?;
    match split.regime {
        Regime::Close | Regime::Lt | Regime::FewshotCway => {
            let y = labels_in_space(labels, split.regime)?;
            let scores = out.scores(mode);
            report.top1 = Some(topk_accuracy(scores, &y, 1)?);
            if split.classes.len() >= 5 {
                report.top5 = Some(topk_accuracy(scores, &y, 5)?);
            }
            if let Some(p) = &split.partition {
                report.subsets = Some(subset_accuracy(scores, &y, p)?);
            }
        }
        Regime::Open => {
            let scores = out.scores(mode);
            for &thr in &cfg.open.thresholds {
                let pred: Vec<Option<usize>> = (0..scores.rows())
                    .map(|i| threshold_postprocess(&rescaled(scores.row(i), mode), thr))
                    .collect();
                report.thresholds.push(ThresholdPoint {
                    threshold: thr,
                    known_predictions: pred.iter().filter(|p| p.is_some()).count(),
                    f_measure: f_measure(&pred, &labels)?,
                });
            }
            let (train, train_labels) = training_set(bank, split)?;
            let train_ev = embed(params, model_cfg, bank, &train)?;
            let train_out = classify(head, &train_ev, salient)?;
            let om = openmax_fit(&train_out.activations(), &train_labels, &cfg.openmax)?;
            let act = out.activations();
            let mut pred = Vec::with_capacity(test.len());
            for i in 0..test.len() {
                pred.push(openmax_postprocess(&om, act.row(i), out.p.row(i))?.prediction);
            }
            if !om.fallbacks.is_empty() {
                report.flags.push(format!("openmax fallback for {} classes", om.fallbacks.len()));
            }
            report.openmax = Some(OpenMaxSummary {
                f_measure: f_measure(&pred, &labels)?,
                fallback_classes: om.fallbacks.iter().map(|f| f.0).collect(),
            });
        }
        Regime::Fewshot5x5 => {
            return Err(Error::Usage(
                "few-shot episodes are evaluated with evaluate_episodes".into(),
            ))
        }
    }
    Ok(report)
}

/// Fused scores live in [0, 2]; single-branch scores are doubled so every
/// mode thresholds on the same [0, 1] scale.
fn rescaled(row: &[f64], mode: HeadMode) -> Vec<f64> {
    match mode {
        HeadMode::Both => row.to_vec(),
        _ => row.iter().map(|v| 2.0 * v).collect(),
    }
}

/// Accuracies of the bi-modal head and the linear probe on one episode.
pub fn evaluate_episode(
    bank: &EmbeddingBank,
    episode: &SplitSpec,
    params: &ParamGroup,
    model_cfg: &ModelConfig,
    cfg: &RunConfig,
    digest: &str,
) -> Result<(f64, f64)> {
    let (support, support_y) = training_set(bank, episode)?;
    let (query, query_y) = labelled_videos(bank, episode, &episode.test)?;
    let query_y = labels_in_space(query_y, episode.regime)?;
    if query.is_empty() {
        return Err(Error::Config("episode has an empty query set".into()));
    }
    let pools = probe_pools(bank, episode)?;
    let salient =
        select_salient_texts(params, model_cfg, bank, &episode.classes, &pools, &cfg.tsr, digest)?;
    let support_ev = embed(params, model_cfg, bank, &support)?;
    let query_ev = embed(params, model_cfg, bank, &query)?;
    let head_cfg = HeadConfig {
        batch_size: cfg.head.batch_size.min(support.len()),
        ..cfg.head.clone()
    };
    let (head, _) = train_head_on(&support_ev, &support_y, &salient, &head_cfg, tau(params)?)?;
    let out = classify(&head, &query_ev, &salient)?;
    let bimodal = accuracy(&predictions(out.scores(cfg.head.mode)), &query_y);
    let probe = linear_probe(&support_ev, &support_y, episode.classes.len(), &cfg.probe)?;
    let probe_acc = accuracy(&predictions(&probe.scores(&query_ev)?), &query_y);
    Ok((bimodal, probe_acc))
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

/// Report over a set of episodes; `student` yields the encoder of each
/// episode (shared for the 5-way protocol, retrained per trial otherwise).
pub fn evaluate_episodes(
    bank: &EmbeddingBank,
    episodes: &[SplitSpec],
    model_cfg: &ModelConfig,
    cfg: &RunConfig,
    student: &mut dyn FnMut(&SplitSpec) -> Result<ParamGroup>,
) -> Result<EvalReport> {
    let regime = episodes
        .first()
        .map(|e| e.regime)
        .ok_or_else(|| Error::Config("no episodes to evaluate".into()))?;
    let digest = cfg.digest();
    let mut bimodal = Vec::with_capacity(episodes.len());
    let mut probe = Vec::with_capacity(episodes.len());
    let mut samples = 0;
    for ep in episodes {
        let params = student(ep)?;
        let (a, b) = evaluate_episode(bank, ep, &params, model_cfg, cfg, &digest)?;
        bimodal.push(a);
        probe.push(b);
        samples += ep.test.len();
    }
    let mut report = EvalReport::empty(regime, cfg);
    report.samples = samples;
    report.episodes = vec![
        EpisodeSummary::new("bimodal", bimodal),
        EpisodeSummary::new("probe", probe),
    ];
    Ok(report)
}

/// Top-1 of embeddings `[N, D]` under a trained head.
pub fn head_accuracy(head: &ParamGroup, ev: &Tensor, y: &[usize], salient: &SalientTextBank, mode: HeadMode) -> Result<f64> {
    let out = classify(head, ev, salient)?;
    Ok(accuracy(&predictions(out.scores(mode)), y))
}

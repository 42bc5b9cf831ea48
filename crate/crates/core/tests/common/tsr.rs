//! A pretrained student on a synthetic bank and a direct transcription of
//! the per-sentence selection loss.

use gvr_core::bank::EmbeddingBank;
use gvr_core::head::SalientTextBank;
use gvr_core::model::{encode_texts, encode_video, tau, ModelConfig};
use gvr_core::optim::ParamGroup;
use gvr_core::pipeline::*;
use gvr_core::pretrain::LossRecord;
use gvr_core::tensor::Tensor;
use gvr_core::tsr::{Strategy, TsrConfig};

use super::fixtures::Setup;

pub struct Trained {
    pub setup: Setup,
    pub mc: ModelConfig,
    pub params: ParamGroup,
    pub curve: Vec<LossRecord>,
}

pub fn train(setup: Setup) -> Trained {
    let mc = model_config(&setup.cfg, &setup.bank).unwrap();
    let (params, curve) = pretrain(&setup.bank, &setup.split, &setup.cfg, &mut |_, _| Ok(())).unwrap();
    Trained { setup, mc, params, curve }
}

pub fn salient(t: &Trained, strategy: Strategy, m: usize, lambda: usize) -> SalientTextBank {
    let tsr = TsrConfig {
        m,
        lambda,
        strategy,
        ..t.setup.cfg.tsr.clone()
    };
    select_texts(&t.params, &t.mc, &t.setup.bank, &t.setup.split, &tsr, "d").unwrap()
}

/// Per-sentence loss written out directly: probe videos of the class are
/// the positives and every probe video sits in the denominator. Returns
/// `(loss, bank row, sentence id)` per sentence of `class`.
pub fn loss_oracle(t: &Trained, pools: &[Vec<usize>], class: usize) -> Vec<(f64, usize, String)> {
    let bank: &EmbeddingBank = &t.setup.bank;
    let tau = tau(&t.params).unwrap();
    let probe: Vec<(usize, Vec<f64>)> = pools
        .iter()
        .enumerate()
        .flat_map(|(l, pool)| pool.iter().map(move |&v| (l, v)))
        .map(|(l, v)| (l, encode_video(&t.params, &t.mc, &bank.frames(v)).unwrap()))
        .collect();
    bank.sentences(class)
        .iter()
        .map(|s| {
            let base = Tensor::new(vec![1, bank.dim()], bank.row_f64(s.row)).unwrap();
            let e = encode_texts(&t.params, &base).unwrap();
            let logit = |v: &[f64]| v.iter().zip(e.row(0)).map(|(a, b)| a * b).sum::<f64>() / tau;
            let denom: f64 = probe.iter().map(|(_, v)| logit(v).exp()).sum();
            let pos: Vec<f64> = probe.iter().filter(|(l, _)| *l == class).map(|(_, v)| logit(v)).collect();
            let loss = -pos.iter().map(|p| (p.exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
            (loss, s.row, s.id.clone())
        })
        .collect()
}

/// Number of `(m, class)` fixtures whose selection differs from a full sort
/// of the oracle losses, with lambda large enough to probe every video.
pub fn sort_mismatches(t: &Trained, ms: &[usize]) -> (usize, usize) {
    let pools = probe_pools(&t.setup.bank, &t.setup.split).unwrap();
    let oracles: Vec<_> = (0..t.setup.bank.num_classes())
        .map(|class| {
            let mut o = loss_oracle(t, &pools, class);
            o.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            o
        })
        .collect();
    let (mut fixtures, mut mismatched) = (0, 0);
    for &m in ms {
        let sel = salient(t, Strategy::Tsr, m, usize::MAX);
        for (class, oracle) in oracles.iter().enumerate() {
            fixtures += 1;
            let want: Vec<String> = oracle.iter().take(m).map(|o| o.2.clone()).collect();
            let scores_agree = sel.scores[class].iter().zip(oracle).all(|(got, o)| (got - o.0).abs() < 1e-9);
            if sel.sentence_ids[class] != want || !scores_agree {
                mismatched += 1;
            }
        }
    }
    (fixtures, mismatched)
}

/// Share of selected sentences that are planted salient ones, at `m` equal
/// to the planted count per class.
pub fn planted_precision(t: &Trained, m: usize) -> f64 {
    let sel = salient(t, Strategy::Tsr, m, t.setup.cfg.tsr.lambda);
    let hits = sel.sentence_ids.iter().flatten().filter(|id| id.contains("_salient")).count();
    hits as f64 / (m * sel.classes) as f64
}

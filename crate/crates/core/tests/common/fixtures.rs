//! Synthetic benchmark setups shared by the integration tests.

use gvr_core::bank::EmbeddingBank;
use gvr_core::config::RunConfig;
use gvr_core::splits::{build_close_split, build_lt_split, Catalog, ParetoConfig, SplitSpec};
use gvr_core::synth::{generate, SynthConfig};
use gvr_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    let d = *shape.last().unwrap();
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Small student and head settings that train in seconds on 32-wide banks.
pub fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.model.layers = 2;
    cfg.model.heads = 4;
    cfg.model.max_frames = 8;
    cfg.tsr.m = 16;
    cfg.propagate();
    cfg
}

pub struct Setup {
    pub bank: EmbeddingBank,
    pub split: SplitSpec,
    pub cfg: RunConfig,
}

/// 20 classes, D = 32, 8 frames, 50/10 train/test videos per class, Gaussian
/// class clusters with matching sentence clusters.
pub fn close_setup(seed: u64) -> Setup {
    let synth = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let (bank, _) = generate(&synth).unwrap();
    let split = build_close_split(&Catalog::from_bank(&bank));
    let mut cfg = desk_config(seed);
    cfg.pretrain.epochs = 10;
    cfg.propagate();
    Setup { bank, split, cfg }
}

pub fn lt_pareto() -> ParetoConfig {
    ParetoConfig {
        shape: 6.0,
        max_per_class: 150,
        min_per_class: 5,
        val_per_class: 0,
    }
}

/// Long-tail setup: 20 classes with Pareto counts in [5, 150], five class
/// pairs that differ only in frame order, and text centres partly off the
/// frame content.
pub fn lt_setup(seed: u64) -> Setup {
    let pc = lt_pareto();
    let synth = SynthConfig {
        train_per_class: pc.max_per_class,
        test_per_class: 20,
        temporal_pairs: 5,
        text_misalign: 1.0,
        seed,
        ..SynthConfig::default()
    };
    let (bank, _) = generate(&synth).unwrap();
    let split = build_lt_split(&Catalog::from_bank(&bank), &pc, 1).unwrap();
    let mut cfg = desk_config(seed);
    cfg.pretrain.epochs = 20;
    cfg.head.epochs = 60;
    cfg.head.batch_size = 32;
    cfg.head.lr = 3e-3;
    cfg.propagate();
    Setup { bank, split, cfg }
}

/// Long-tail setup over a noisy corpus: few salient sentences per class
/// among many off-topic ones, and prompts built from ambiguous class names.
pub fn noisy_lt_setup(seed: u64) -> Setup {
    let pc = ParetoConfig {
        shape: 6.0,
        max_per_class: 40,
        min_per_class: 2,
        val_per_class: 0,
    };
    let synth = SynthConfig {
        train_per_class: pc.max_per_class,
        test_per_class: 20,
        temporal_pairs: 5,
        text_misalign: 1.0,
        salient_per_class: 4,
        noisy_per_class: 28,
        prompt_ambiguity: 3.0,
        seed,
        ..SynthConfig::default()
    };
    let (bank, _) = generate(&synth).unwrap();
    let split = build_lt_split(&Catalog::from_bank(&bank), &pc, 1).unwrap();
    let mut cfg = desk_config(seed);
    cfg.pretrain.epochs = 20;
    cfg.head.epochs = 60;
    cfg.head.batch_size = 32;
    cfg.head.lr = 3e-3;
    cfg.tsr.m = 4;
    cfg.propagate();
    Setup { bank, split, cfg }
}

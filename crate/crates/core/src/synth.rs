//! Seeded synthetic embedding banks: Gaussian class clusters for frames,
//! matched sentence clusters, off-topic sentences, template prompts, and
//! optional class pairs that differ only in temporal order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bank::{EmbeddingBank, RowDraft, SentenceSource, Subset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub frames: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-class training counts overriding `train_per_class`.
    pub train_counts: Option<Vec<usize>>,
    pub salient_per_class: usize,
    pub noisy_per_class: usize,
    pub prompts_per_class: usize,
    /// Spread of individual frames around their clip mean.
    pub frame_noise: f64,
    /// Spread of clip means around the class centre.
    pub video_noise: f64,
    /// Spread of salient sentences around the class text centre.
    pub text_noise: f64,
    /// Weight of the class text centre inside prompt sentences.
    pub prompt_class_weight: f64,
    /// Weight of the template direction shared by all prompts.
    pub prompt_template_weight: f64,
    /// Weight of a random class-specific direction mixed into the prompts,
    /// standing in for ambiguous class names.
    pub prompt_ambiguity: f64,
    /// Number of class pairs sharing frame content in opposite temporal order.
    pub temporal_pairs: usize,
    /// Weight of a random class-specific direction mixed into each text
    /// centre; 0 keeps texts aligned with the frame content.
    pub text_misalign: f64,
    /// Number of class pairs (after the temporal pairs) whose sentences share
    /// one text centre while their videos stay distinct.
    pub text_overlap_pairs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            dim: 32,
            frames: 8,
            train_per_class: 50,
            test_per_class: 10,
            train_counts: None,
            salient_per_class: 16,
            noisy_per_class: 16,
            prompts_per_class: 4,
            frame_noise: 0.5,
            video_noise: 0.5,
            text_noise: 0.3,
            prompt_class_weight: 0.6,
            prompt_template_weight: 1.0,
            prompt_ambiguity: 0.0,
            temporal_pairs: 0,
            text_misalign: 0.0,
            text_overlap_pairs: 0,
            seed: 0,
        }
    }
}

fn gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + yi).collect()
}

/// Noise vector with expected norm `scale`.
fn noise<R: Rng + ?Sized>(d: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    let s = scale / (d as f64).sqrt();
    gaussian(d, rng).into_iter().map(|x| x * s).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Ground truth of a generated bank.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    /// Unit text centre of every class.
    pub text_centres: Vec<Vec<f64>>,
    /// Class pairs that differ only in temporal order.
    pub pairs: Vec<(usize, usize)>,
    /// Class pairs sharing a text centre.
    pub overlaps: Vec<(usize, usize)>,
}

pub fn generate(cfg: &SynthConfig) -> Result<(EmbeddingBank, SynthTruth)> {
    let c = cfg.classes;
    if c == 0 || cfg.dim == 0 || cfg.frames == 0 {
        return Err(Error::Config("synthetic bank needs classes, dim and frames".into()));
    }
    if (cfg.temporal_pairs + cfg.text_overlap_pairs) * 2 > c {
        return Err(Error::Config(format!(
            "{} temporal and {} text-overlap pairs from {c} classes",
            cfg.temporal_pairs, cfg.text_overlap_pairs
        )));
    }
    if cfg.salient_per_class + cfg.noisy_per_class + cfg.prompts_per_class == 0 {
        return Err(Error::Config("every class needs at least one sentence".into()));
    }
    let counts = match &cfg.train_counts {
        Some(v) if v.len() != c => {
            return Err(Error::Config(format!("{} train counts for {c} classes", v.len())))
        }
        Some(v) => v.clone(),
        None => vec![cfg.train_per_class; c],
    };
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = unit(gaussian(d, &mut rng));
    let boilerplate = unit(gaussian(d, &mut rng));

    // Per class: frame mean for the first and second half of a clip.
    let mut halves: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(c);
    let mut text_centres = Vec::with_capacity(c);
    let mut pairs = Vec::new();
    for class in 0..c {
        let p = class / 2;
        if class % 2 == 1 && p < cfg.temporal_pairs {
            let (a, b) = halves[class - 1].clone();
            halves.push((b, a));
            pairs.push((class - 1, class));
        } else if class % 2 == 0 && p < cfg.temporal_pairs {
            halves.push((unit(gaussian(d, &mut rng)), unit(gaussian(d, &mut rng))));
        } else {
            let m = unit(gaussian(d, &mut rng));
            halves.push((m.clone(), m));
        }
    }
    for (a, b) in &halves {
        let shared = unit(axpy(1.0, a, b));
        let own = unit(gaussian(d, &mut rng));
        let t = if a == b { shared } else { unit(axpy(0.8, &shared, &own)) };
        let t = if cfg.text_misalign > 0.0 {
            unit(axpy(cfg.text_misalign, &unit(gaussian(d, &mut rng)), &t))
        } else {
            t
        };
        text_centres.push(t);
    }
    let mut overlaps = Vec::new();
    for p in 0..cfg.text_overlap_pairs {
        let a = 2 * (cfg.temporal_pairs + p);
        let shared = unit(axpy(1.0, &text_centres[a], &text_centres[a + 1]));
        text_centres[a] = shared.clone();
        text_centres[a + 1] = shared;
        overlaps.push((a, a + 1));
    }

    let names: Vec<String> = (0..c).map(|k| format!("action {k}")).collect();
    let mut rows = Vec::new();
    for class in 0..c {
        let (a, b) = &halves[class];
        for (subset, n, tag) in [
            (Subset::Train, counts[class], "train"),
            (Subset::Test, cfg.test_per_class, "test"),
        ] {
            for v in 0..n {
                let id = format!("{tag}_c{class}_v{v}");
                let offset = noise(d, cfg.video_noise, &mut rng);
                for f in 0..cfg.frames {
                    let base = if 2 * f < cfg.frames { a } else { b };
                    let x = axpy(1.0, base, &offset);
                    let x = axpy(1.0, &x, &noise(d, cfg.frame_noise, &mut rng));
                    rows.push((RowDraft::frame(class as u32, &id, subset), to_f32(&x)));
                }
            }
        }
        let t = &text_centres[class];
        for s in 0..cfg.salient_per_class {
            let x = axpy(1.0, t, &noise(d, cfg.text_noise, &mut rng));
            let scale = rng.random_range(0.8..1.25);
            let x: Vec<f64> = x.iter().map(|v| v * scale).collect();
            rows.push((
                RowDraft::sentence(class as u32, &format!("c{class}_salient{s}"), SentenceSource::Corpus)
                    .with_text(&format!("people performing action {class} with distinctive motion {s}")),
                to_f32(&x),
            ));
        }
        for s in 0..cfg.noisy_per_class {
            let x = axpy(0.7, &unit(gaussian(d, &mut rng)), &boilerplate);
            rows.push((
                RowDraft::sentence(class as u32, &format!("c{class}_noisy{s}"), SentenceSource::Corpus)
                    .with_text("this article is about history and references"),
                to_f32(&x),
            ));
        }
        let name_dir = unit(gaussian(d, &mut rng));
        for s in 0..cfg.prompts_per_class {
            let x = axpy(cfg.prompt_class_weight, t, &template.iter().map(|v| v * cfg.prompt_template_weight).collect::<Vec<_>>());
            let x = axpy(cfg.prompt_ambiguity, &name_dir, &x);
            let x = axpy(1.0, &x, &noise(d, 0.05, &mut rng));
            rows.push((
                RowDraft::sentence(class as u32, &format!("c{class}_prompt{s}"), SentenceSource::Prompt)
                    .with_text(&format!("a video of action {class}")),
                to_f32(&x),
            ));
        }
    }
    let bank = EmbeddingBank::from_parts(d, &names, rows)?;
    Ok((bank, SynthTruth {
            text_centres,
            pairs,
            overlaps,
        }))
}

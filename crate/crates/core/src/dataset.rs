//! Seeded batch sampling of paired videos and same-class sentences.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::bank::EmbeddingBank;
use crate::error::{Error, Result};

/// `N` videos with one paired sentence each, both of class `labels[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Bank video indices.
    pub videos: Vec<usize>,
    /// Bank row indices of the paired sentences.
    pub sentences: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// Resolves video ids to bank indices.
pub fn resolve_videos(bank: &EmbeddingBank, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            bank.video_by_id(id)
                .ok_or_else(|| Error::Config(format!("video {id} is not in the bank")))
        })
        .collect()
}

fn pair_sentences<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    videos: Vec<usize>,
    rng: &mut R,
) -> Result<Batch> {
    let mut sentences = Vec::with_capacity(videos.len());
    let mut labels = Vec::with_capacity(videos.len());
    for &v in &videos {
        let class = bank.video(v).class_id;
        let s = bank.sentences(class).choose(rng).ok_or_else(|| {
            Error::Config(format!(
                "class {class} ({}) has no sentences to pair with",
                bank.class_name(class)
            ))
        })?;
        sentences.push(s.row);
        labels.push(class);
    }
    Ok(Batch {
        videos,
        sentences,
        labels,
    })
}

/// Draws `n` distinct training videos uniformly and one uniform sentence of
/// each video's class.
pub fn sample_batch<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    train: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Batch> {
    if n < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {n}")));
    }
    if train.len() < n {
        return Err(Error::Config(format!(
            "batch of {n} from {} training videos",
            train.len()
        )));
    }
    let videos = train.choose_multiple(rng, n).copied().collect();
    pair_sentences(bank, videos, rng)
}

/// One pass over the training set in shuffled order. A trailing batch with
/// fewer than two videos is dropped.
pub fn epoch_batches<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    train: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if n < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {n}")));
    }
    let mut order = train.to_vec();
    order.shuffle(rng);
    order
        .chunks(n)
        .filter(|chunk| chunk.len() >= 2)
        .map(|chunk| pair_sentences(bank, chunk.to_vec(), rng))
        .collect()
}

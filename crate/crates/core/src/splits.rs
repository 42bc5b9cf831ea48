//! Benchmark regime construction: close-set, Pareto long-tail, few-shot
//! episodes, all-way few-shot supports and the open-set class split.
//!
//! Every builder is a pure function of its catalog, configuration and seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{EmbeddingBank, Subset};
use crate::error::{Error, Result};

/// Minimal view of a labelled video collection.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    pub num_classes: usize,
    /// `(video id, class, subset)` in a fixed order.
    pub videos: Vec<(String, usize, Subset)>,
}

impl Catalog {
    pub fn from_bank(bank: &EmbeddingBank) -> Self {
        Self {
            num_classes: bank.num_classes(),
            videos: bank
                .videos()
                .iter()
                .map(|v| (v.id.clone(), v.class_id, v.subset))
                .collect(),
        }
    }

    /// `per_class_train` train videos and `per_class_test` test videos per class.
    pub fn uniform(num_classes: usize, per_class_train: usize, per_class_test: usize) -> Self {
        let mut videos = Vec::new();
        for c in 0..num_classes {
            for i in 0..per_class_train {
                videos.push((format!("c{c}_tr{i}"), c, Subset::Train));
            }
            for i in 0..per_class_test {
                videos.push((format!("c{c}_te{i}"), c, Subset::Test));
            }
        }
        Self {
            num_classes,
            videos,
        }
    }

    fn ids_of(&self, class: usize, subset: Option<Subset>) -> Vec<String> {
        self.videos
            .iter()
            .filter(|(_, c, s)| *c == class && subset.is_none_or(|want| want == *s))
            .map(|(id, _, _)| id.clone())
            .collect()
    }

    fn test_ids(&self) -> Vec<String> {
        self.videos
            .iter()
            .filter(|(_, _, s)| *s == Subset::Test)
            .map(|(id, _, _)| id.clone())
            .collect()
    }

    pub fn class_of(&self, id: &str) -> Option<usize> {
        self.videos.iter().find(|(v, _, _)| v == id).map(|(_, c, _)| *c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Close,
    Lt,
    Fewshot5x5,
    FewshotCway,
    Open,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "close" => Ok(Self::Close),
            "lt" => Ok(Self::Lt),
            "fewshot" | "fewshot5x5" => Ok(Self::Fewshot5x5),
            "cway" | "fewshotcway" => Ok(Self::FewshotCway),
            "open" => Ok(Self::Open),
            other => Err(Error::Usage(format!("unknown regime {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Close => "close",
            Self::Lt => "lt",
            Self::Fewshot5x5 => "fewshot5x5",
            Self::FewshotCway => "fewshotcway",
            Self::Open => "open",
        }
    }
}

/// Long-tail class buckets by training-set size.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotPartition {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Many,
    Medium,
    Few,
}

impl ShotPartition {
    pub fn bucket_of(&self, class: usize) -> Option<Bucket> {
        if self.many.contains(&class) {
            Some(Bucket::Many)
        } else if self.medium.contains(&class) {
            Some(Bucket::Medium)
        } else if self.few.contains(&class) {
            Some(Bucket::Few)
        } else {
            None
        }
    }
}

/// Classes with more than this many training videos are many-shot.
pub const MANY_SHOT_ABOVE: usize = 100;
/// Classes with fewer than this many training videos are few-shot.
pub const FEW_SHOT_BELOW: usize = 20;

pub fn bucket_for_count(count: usize) -> Bucket {
    if count > MANY_SHOT_ABOVE {
        Bucket::Many
    } else if count >= FEW_SHOT_BELOW {
        Bucket::Medium
    } else {
        Bucket::Few
    }
}

/// Declarative description of one benchmark regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub regime: Regime,
    /// Label space in label order: label `i` is class `classes[i]`.
    pub classes: Vec<usize>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub train_counts: BTreeMap<usize, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<ShotPartition>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub known: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unknown: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl SplitSpec {
    /// Label of a class inside this split's label space.
    pub fn label_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Checks the structural invariants against a catalog.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        let sets = [("train", &self.train), ("val", &self.val), ("test", &self.test)];
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, ids) in sets {
            for id in ids.iter() {
                if let Some(prev) = seen.insert(id.as_str(), name) {
                    return Err(Error::Contract(format!(
                        "video {id} appears in both {prev} and {name}"
                    )));
                }
                if catalog.class_of(id).is_none() {
                    return Err(Error::Contract(format!("video {id} is not in the catalog")));
                }
            }
        }
        if self.regime == Regime::Open {
            let known: BTreeSet<_> = self.known.iter().collect();
            if self.unknown.iter().any(|c| known.contains(c)) {
                return Err(Error::Contract("known and unknown classes overlap".into()));
            }
            for id in &self.test {
                let c = catalog.class_of(id).expect("checked above");
                if !known.contains(&c) && !self.unknown.contains(&c) {
                    return Err(Error::Contract(format!(
                        "test video {id} has class {c} outside known and unknown"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// Long-tail generation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoConfig {
    pub shape: f64,
    pub max_per_class: usize,
    pub min_per_class: usize,
    pub val_per_class: usize,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            shape: 6.0,
            max_per_class: 930,
            min_per_class: 5,
            val_per_class: 20,
        }
    }
}

impl ParetoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0) || self.min_per_class < 1 || self.max_per_class < self.min_per_class {
            return Err(Error::Config(format!(
                "pareto config needs shape > 0 and max >= min >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Relative class sizes in `[0, 1]`, largest first.
///
/// Rank `r` of `n` sits at the Pareto quantile `1 - (r + 0.5) / n`; the
/// resulting values are mapped affinely so the head is 1 and the tail 0.
pub fn pareto_profile(num_classes: usize, shape: f64) -> Vec<f64> {
    if num_classes == 0 {
        return Vec::new();
    }
    if num_classes == 1 {
        return vec![1.0];
    }
    let n = num_classes as f64;
    let x: Vec<f64> = (0..num_classes)
        .map(|r| ((r as f64 + 0.5) / n).powf(-1.0 / shape))
        .collect();
    let (hi, lo) = (x[0], x[num_classes - 1]);
    x.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Target training-set sizes by rank, largest first.
pub fn pareto_counts(num_classes: usize, cfg: &ParetoConfig) -> Vec<usize> {
    let span = (cfg.max_per_class - cfg.min_per_class) as f64;
    pareto_profile(num_classes, cfg.shape)
        .into_iter()
        .map(|u| (cfg.min_per_class as f64 + span * u).round() as usize)
        .collect()
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every original train/test video of every class.
pub fn build_close_split(catalog: &Catalog) -> SplitSpec {
    let mut train = Vec::new();
    let mut counts = BTreeMap::new();
    for c in 0..catalog.num_classes {
        let ids = catalog.ids_of(c, Some(Subset::Train));
        counts.insert(c, ids.len());
        train.extend(ids);
    }
    SplitSpec {
        regime: Regime::Close,
        classes: (0..catalog.num_classes).collect(),
        train,
        val: Vec::new(),
        test: catalog.test_ids(),
        train_counts: counts,
        partition: None,
        known: Vec::new(),
        unknown: Vec::new(),
        episode: None,
        flags: Vec::new(),
        seed: 0,
        config: serde_json::json!({}),
    }
}

pub fn build_lt_split(catalog: &Catalog, cfg: &ParetoConfig, seed: u64) -> Result<SplitSpec> {
    cfg.validate()?;
    let pools: Vec<Vec<String>> = (0..catalog.num_classes)
        .map(|c| catalog.ids_of(c, Some(Subset::Train)))
        .collect();
    let short: Vec<String> = pools
        .iter()
        .enumerate()
        .filter(|(_, p)| p.len() < cfg.min_per_class)
        .map(|(c, p)| format!("{c} ({} videos)", p.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::Config(format!(
            "classes below the minimum of {}: {}",
            cfg.min_per_class,
            short.join(", ")
        )));
    }
    let mut rng = rng_for(seed);
    let mut order: Vec<usize> = (0..catalog.num_classes).collect();
    order.shuffle(&mut rng);
    let targets = pareto_counts(catalog.num_classes, cfg);
    let mut count_of = vec![0usize; catalog.num_classes];
    for (rank, &class) in order.iter().enumerate() {
        count_of[class] = targets[rank].min(pools[class].len());
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut counts = BTreeMap::new();
    for (class, mut pool) in pools.into_iter().enumerate() {
        // Shuffling the full pool keeps each class's draw independent of its count.
        pool.shuffle(&mut rng);
        let n = count_of[class];
        let v = cfg.val_per_class.min(pool.len() - n);
        train.extend_from_slice(&pool[..n]);
        val.extend_from_slice(&pool[n..n + v]);
        counts.insert(class, n);
    }
    let mut split = SplitSpec {
        regime: Regime::Lt,
        classes: (0..catalog.num_classes).collect(),
        train,
        val,
        test: catalog.test_ids(),
        train_counts: counts,
        partition: None,
        known: Vec::new(),
        unknown: Vec::new(),
        episode: None,
        flags: Vec::new(),
        seed,
        config: serde_json::to_value(cfg)?,
    };
    split.partition = Some(partition_shot_subsets(&split)?);
    Ok(split)
}

/// Many (> 100), medium (20..=100) and few (< 20) shot classes.
pub fn partition_shot_subsets(split: &SplitSpec) -> Result<ShotPartition> {
    if split.regime != Regime::Lt {
        return Err(Error::Usage(format!(
            "shot partition needs a long-tail split, got {}",
            split.regime.name()
        )));
    }
    let mut p = ShotPartition::default();
    for (&class, &count) in &split.train_counts {
        match bucket_for_count(count) {
            Bucket::Many => p.many.push(class),
            Bucket::Medium => p.medium.push(class),
            Bucket::Few => p.few.push(class),
        }
    }
    Ok(p)
}

/// Disjoint base / validation / novel class pools for the 5-way protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewshotClasses {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn build_fewshot_classes(
    catalog: &Catalog,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<FewshotClasses> {
    if n_train + n_val + n_test > catalog.num_classes || n_test == 0 {
        return Err(Error::Config(format!(
            "{n_train}/{n_val}/{n_test} class pools from {} classes",
            catalog.num_classes
        )));
    }
    let mut order: Vec<usize> = (0..catalog.num_classes).collect();
    order.shuffle(&mut rng_for(seed));
    let mut take = |n: usize| {
        let mut v: Vec<usize> = order.drain(..n).collect();
        v.sort_unstable();
        v
    };
    Ok(FewshotClasses {
        train: take(n_train),
        val: take(n_val),
        test: take(n_test),
    })
}

/// Stage I training split over the base classes of a few-shot protocol.
pub fn build_fewshot_base(catalog: &Catalog, pools: &FewshotClasses, seed: u64) -> SplitSpec {
    let mut train = Vec::new();
    let mut counts = BTreeMap::new();
    for &c in &pools.train {
        let ids = catalog.ids_of(c, None);
        counts.insert(c, ids.len());
        train.extend(ids);
    }
    let val = pools.val.iter().flat_map(|&c| catalog.ids_of(c, None)).collect();
    SplitSpec {
        regime: Regime::Fewshot5x5,
        classes: pools.train.clone(),
        train,
        val,
        test: Vec::new(),
        train_counts: counts,
        partition: None,
        known: Vec::new(),
        unknown: Vec::new(),
        episode: None,
        flags: vec!["base".into()],
        seed,
        config: serde_json::to_value(pools).unwrap_or_default(),
    }
}

/// One N-way K-shot episode: support videos go to `train`, the remaining
/// videos of the sampled classes to `test`.
pub fn build_fewshot_episode(
    catalog: &Catalog,
    way: usize,
    shot: usize,
    class_pool: &[usize],
    seed: u64,
) -> Result<SplitSpec> {
    if way == 0 || shot == 0 || class_pool.len() < way {
        return Err(Error::Config(format!(
            "{way}-way {shot}-shot episode from a pool of {} classes",
            class_pool.len()
        )));
    }
    let mut rng = rng_for(seed);
    let mut classes: Vec<usize> = class_pool
        .choose_multiple(&mut rng, way)
        .copied()
        .collect();
    classes.sort_unstable();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut counts = BTreeMap::new();
    for &c in &classes {
        let mut ids = catalog.ids_of(c, None);
        if ids.len() < shot {
            return Err(Error::Config(format!(
                "class {c} has {} videos, episode needs {shot}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        counts.insert(c, shot);
        test.extend_from_slice(&ids[shot..]);
        ids.truncate(shot);
        train.extend(ids);
    }
    let mut flags = Vec::new();
    if test.is_empty() {
        flags.push("query-empty".to_string());
    }
    Ok(SplitSpec {
        regime: Regime::Fewshot5x5,
        classes,
        train,
        val: Vec::new(),
        test,
        train_counts: counts,
        partition: None,
        known: Vec::new(),
        unknown: Vec::new(),
        episode: None,
        flags,
        seed,
        config: serde_json::json!({ "way": way, "shot": shot, "class_pool": class_pool }),
    })
}

/// `shot` support videos for every class, tested on the full test split.
pub fn build_cway_split(catalog: &Catalog, shot: usize, seed: u64) -> Result<SplitSpec> {
    if shot == 0 {
        return Err(Error::Config("shot must be positive".into()));
    }
    let mut rng = rng_for(seed);
    let mut train = Vec::new();
    let mut counts = BTreeMap::new();
    for c in 0..catalog.num_classes {
        let mut ids = catalog.ids_of(c, Some(Subset::Train));
        if ids.len() < shot {
            return Err(Error::Config(format!(
                "class {c} has {} training videos, needs {shot}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        ids.truncate(shot);
        counts.insert(c, shot);
        train.extend(ids);
    }
    Ok(SplitSpec {
        regime: Regime::FewshotCway,
        classes: (0..catalog.num_classes).collect(),
        train,
        val: Vec::new(),
        test: catalog.test_ids(),
        train_counts: counts,
        partition: None,
        known: Vec::new(),
        unknown: Vec::new(),
        episode: None,
        flags: Vec::new(),
        seed,
        config: serde_json::json!({ "shot": shot }),
    })
}

/// Random known/unknown class bipartition.
pub fn build_open_split(catalog: &Catalog, n_known: usize, seed: u64) -> Result<SplitSpec> {
    let c = catalog.num_classes;
    if n_known == 0 || n_known >= c {
        return Err(Error::Config(format!(
            "open split needs 0 < known < {c}, got {n_known}"
        )));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng_for(seed));
    let mut known = order[..n_known].to_vec();
    let mut unknown = order[n_known..].to_vec();
    known.sort_unstable();
    unknown.sort_unstable();
    let mut train = Vec::new();
    let mut counts = BTreeMap::new();
    for &k in &known {
        let ids = catalog.ids_of(k, Some(Subset::Train));
        counts.insert(k, ids.len());
        train.extend(ids);
    }
    Ok(SplitSpec {
        regime: Regime::Open,
        classes: known.clone(),
        train,
        val: Vec::new(),
        test: catalog.test_ids(),
        train_counts: counts,
        partition: None,
        known,
        unknown,
        episode: None,
        flags: Vec::new(),
        seed,
        config: serde_json::json!({ "n_known": n_known }),
    })
}

/// Seed of trial `i` in an episodic protocol.
pub fn episode_seed(base_seed: u64, trial: usize) -> u64 {
    base_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(trial as u64 + 1)
}

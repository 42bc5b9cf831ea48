//! Embedding bank files: a binary blob of base embeddings plus a JSON
//! manifest describing every row.
//!
//! Binary layout (little-endian): magic `GVRE`, `u32` version (1), `u32`
//! dtype (0 = f32), `u64` row count, `u32` dim, then `rows * dim` f32 values.
//! The manifest lives next to the blob as `<stem>.manifest.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GVRE";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Frame,
    Sentence,
}

/// Which original split a video belongs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    Train,
    Test,
}

/// Origin of a sentence: filled prompt template or crawled corpus text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceSource {
    Prompt,
    #[default]
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub row_id: u64,
    pub class_id: u32,
    pub kind: RowKind,
    /// Video id for frames, sentence id for sentences.
    pub group_id: String,
    /// Frame index within its video, or sentence index within its class.
    pub position: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Subset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SentenceSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub sentence_count: usize,
    pub video_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<ClassInfo>,
    pub rows: Vec<RowRecord>,
}

/// A video reconstructed from its frame rows.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub class_id: usize,
    pub subset: Subset,
    pub first_row: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRecord {
    pub id: String,
    pub row: usize,
    pub class_id: usize,
    pub source: SentenceSource,
}

/// Immutable store of base frame and sentence embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    blob: Vec<f32>,
    manifest: Manifest,
    videos: Vec<VideoRecord>,
    video_index: HashMap<String, usize>,
    sentences: Vec<Vec<SentenceRecord>>,
}

/// Path of the manifest belonging to a bank file.
pub fn manifest_path(bank_path: &Path) -> PathBuf {
    bank_path.with_extension("manifest.json")
}

impl EmbeddingBank {
    /// Validates and indexes a bank. Every invariant is checked eagerly.
    pub fn new(dim: usize, blob: Vec<f32>, manifest: Manifest) -> Result<Self> {
        let mut bank = Self {
            dim,
            blob,
            manifest,
            videos: Vec::new(),
            video_index: HashMap::new(),
            sentences: Vec::new(),
        };
        bank.index()?;
        Ok(bank)
    }

    fn index(&mut self) -> Result<()> {
        let rows = self.manifest.rows.len();
        if self.dim == 0 {
            return Err(Error::CorruptBank("dimension is zero".into()));
        }
        if self.blob.len() != rows * self.dim {
            return Err(Error::CorruptBank(format!(
                "blob holds {} values, manifest needs {} rows x {}",
                self.blob.len(),
                rows,
                self.dim
            )));
        }
        if let Some(i) = self.blob.iter().position(|v| !v.is_finite()) {
            return Err(Error::CorruptBank(format!(
                "row {} has a non-finite value",
                i / self.dim
            )));
        }
        let n_classes = self.manifest.classes.len();
        for (i, c) in self.manifest.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::CorruptBank(format!(
                    "class table entry {i} has id {} (ids must be dense and ordered)",
                    c.id
                )));
            }
        }
        let mut videos: Vec<VideoRecord> = Vec::new();
        let mut video_index = HashMap::new();
        let mut sentences: Vec<Vec<SentenceRecord>> = vec![Vec::new(); n_classes];
        let mut sentence_positions: Vec<Vec<u32>> = vec![Vec::new(); n_classes];
        for (i, r) in self.manifest.rows.iter().enumerate() {
            if r.row_id != i as u64 {
                return Err(Error::CorruptBank(format!(
                    "row {i} carries row_id {}",
                    r.row_id
                )));
            }
            let class = r.class_id as usize;
            if class >= n_classes {
                return Err(Error::CorruptBank(format!(
                    "row {i} references class {class} missing from the class table"
                )));
            }
            match r.kind {
                RowKind::Frame => {
                    let continues = videos
                        .last()
                        .is_some_and(|v| v.id == r.group_id && v.first_row + v.frames == i);
                    if continues {
                        let v = videos.last_mut().expect("checked");
                        if r.position as usize != v.frames || v.class_id != class {
                            return Err(Error::CorruptBank(format!(
                                "row {i}: frame {} of video {} out of order or class changed",
                                r.position, r.group_id
                            )));
                        }
                        v.frames += 1;
                    } else {
                        if r.position != 0 {
                            return Err(Error::CorruptBank(format!(
                                "row {i}: video {} starts at frame {}",
                                r.group_id, r.position
                            )));
                        }
                        if video_index.contains_key(&r.group_id) {
                            return Err(Error::CorruptBank(format!(
                                "row {i}: frames of video {} are not contiguous",
                                r.group_id
                            )));
                        }
                        video_index.insert(r.group_id.clone(), videos.len());
                        videos.push(VideoRecord {
                            id: r.group_id.clone(),
                            class_id: class,
                            subset: r.subset.unwrap_or_default(),
                            first_row: i,
                            frames: 1,
                        });
                    }
                }
                RowKind::Sentence => {
                    sentence_positions[class].push(r.position);
                    sentences[class].push(SentenceRecord {
                        id: r.group_id.clone(),
                        row: i,
                        class_id: class,
                        source: r.source.unwrap_or_default(),
                    });
                }
            }
        }
        for (c, mut pos) in sentence_positions.into_iter().enumerate() {
            pos.sort_unstable();
            if pos.iter().enumerate().any(|(i, &p)| p as usize != i) {
                return Err(Error::CorruptBank(format!(
                    "class {c}: sentence positions are not 0..n"
                )));
            }
        }
        let mut video_counts = vec![0usize; n_classes];
        for v in &videos {
            video_counts[v.class_id] += 1;
        }
        for (c, info) in self.manifest.classes.iter().enumerate() {
            if info.video_count != video_counts[c] || info.sentence_count != sentences[c].len() {
                return Err(Error::CorruptBank(format!(
                    "class {c} table counts ({} videos, {} sentences) disagree with rows ({}, {})",
                    info.video_count,
                    info.sentence_count,
                    video_counts[c],
                    sentences[c].len()
                )));
            }
        }
        self.videos = videos;
        self.video_index = video_index;
        self.sentences = sentences;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.manifest.rows.len()
    }

    pub fn blob(&self) -> &[f32] {
        &self.blob
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.manifest.classes[class].name
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn video(&self, index: usize) -> &VideoRecord {
        &self.videos[index]
    }

    pub fn video_by_id(&self, id: &str) -> Option<usize> {
        self.video_index.get(id).copied()
    }

    /// Sentences of one class in row order.
    pub fn sentences(&self, class: usize) -> &[SentenceRecord] {
        &self.sentences[class]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.blob[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_f64(&self, row: usize) -> Vec<f64> {
        self.row(row).iter().map(|&v| v as f64).collect()
    }

    /// Frame matrix `[F, D]` of a video.
    pub fn frames(&self, video: usize) -> Tensor {
        let v = &self.videos[video];
        let start = v.first_row * self.dim;
        let data = self.blob[start..start + v.frames * self.dim]
            .iter()
            .map(|&x| x as f64)
            .collect();
        Tensor::new(vec![v.frames, self.dim], data).expect("validated")
    }

    /// Soft issues that do not prevent loading.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (c, info) in self.manifest.classes.iter().enumerate() {
            if info.sentence_count == 0 {
                out.push(format!("class {c} ({}) has no sentences", info.name));
            }
            if info.video_count == 0 {
                out.push(format!("class {c} ({}) has no videos", info.name));
            }
        }
        out
    }

    /// Builds a bank from typed rows, assigning row ids, positions and class tallies.
    pub fn from_parts(dim: usize, class_names: &[String], rows: Vec<(RowDraft, Vec<f32>)>) -> Result<Self> {
        let mut manifest_rows = Vec::with_capacity(rows.len());
        let mut blob = Vec::with_capacity(rows.len() * dim);
        let mut sentence_pos = vec![0u32; class_names.len()];
        let mut frame_pos: BTreeMap<String, u32> = BTreeMap::new();
        let mut video_counts = vec![0usize; class_names.len()];
        for (i, (draft, values)) in rows.into_iter().enumerate() {
            if values.len() != dim {
                return Err(Error::Dimension(format!(
                    "row {i} has {} values for dim {dim}",
                    values.len()
                )));
            }
            let class = draft.class_id as usize;
            if class >= class_names.len() {
                return Err(Error::CorruptBank(format!("row {i} references class {class}")));
            }
            let position = match draft.kind {
                RowKind::Frame => {
                    let p = frame_pos.entry(draft.group_id.clone()).or_insert(0);
                    if *p == 0 {
                        video_counts[class] += 1;
                    }
                    *p += 1;
                    *p - 1
                }
                RowKind::Sentence => {
                    sentence_pos[class] += 1;
                    sentence_pos[class] - 1
                }
            };
            manifest_rows.push(RowRecord {
                row_id: i as u64,
                class_id: draft.class_id,
                kind: draft.kind,
                group_id: draft.group_id,
                position,
                subset: draft.subset,
                source: draft.source,
                text: draft.text,
            });
            blob.extend(values);
        }
        let classes = class_names
            .iter()
            .enumerate()
            .map(|(i, name)| ClassInfo {
                id: i as u32,
                name: name.clone(),
                sentence_count: sentence_pos[i] as usize,
                video_count: video_counts[i],
            })
            .collect();
        Self::new(
            dim,
            blob,
            Manifest {
                classes,
                rows: manifest_rows,
            },
        )
    }
}

/// A row description for [`EmbeddingBank::from_parts`]; ids and positions
/// are filled in automatically.
#[derive(Clone, Debug)]
pub struct RowDraft {
    pub class_id: u32,
    pub kind: RowKind,
    pub group_id: String,
    pub subset: Option<Subset>,
    pub source: Option<SentenceSource>,
    pub text: Option<String>,
}

impl RowDraft {
    pub fn frame(class_id: u32, video: &str, subset: Subset) -> Self {
        Self {
            class_id,
            kind: RowKind::Frame,
            group_id: video.to_string(),
            subset: Some(subset),
            source: None,
            text: None,
        }
    }

    pub fn sentence(class_id: u32, id: &str, source: SentenceSource) -> Self {
        Self {
            class_id,
            kind: RowKind::Sentence,
            group_id: id.to_string(),
            subset: None,
            source: Some(source),
            text: None,
        }
    }

    pub fn with_text(mut self, text: &str) -> Self {
        self.text = Some(text.to_string());
        self
    }
}

/// Encodes the binary part of a bank.
pub fn encode_blob(dim: usize, blob: &[f32]) -> Vec<u8> {
    let rows = if dim == 0 { 0 } else { blob.len() / dim };
    let mut out = Vec::with_capacity(HEADER_LEN + blob.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes the binary part of a bank into `(dim, values)`.
pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<(usize, Vec<f32>)> {
    let fmt = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt("file shorter than the header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let dtype = u32_at(8);
    if dtype != DTYPE_F32 {
        return Err(fmt(&format!("unsupported dtype {dtype}")));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let dim = u32_at(20) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows.checked_mul(dim).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::CorruptBank(format!(
            "{}: header declares {rows} rows x {dim} but payload has {} bytes",
            path.display(),
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dim, values))
}

/// Writes the blob and its sibling manifest.
pub fn save_bank(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    write_file(path, &encode_blob(bank.dim, &bank.blob))?;
    let json = serde_json::to_vec_pretty(&bank.manifest)?;
    write_file(&manifest_path(path), &json)
}

pub fn load_bank(path: &Path) -> Result<EmbeddingBank> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dim, blob) = decode_blob(&bytes, path)?;
    let mpath = manifest_path(path);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    EmbeddingBank::new(dim, blob, manifest)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            min: v[0],
            max: v[n - 1],
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCorpus {
    pub class_id: usize,
    pub name: String,
    pub sentences: usize,
    pub prompt_sentences: usize,
    pub videos: usize,
    /// Total words, when sentence text is present in the manifest.
    pub words: Option<usize>,
}

/// Text corpus statistics of a bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub classes: Vec<ClassCorpus>,
    pub total_sentences: usize,
    pub total_videos: usize,
    pub total_frames: usize,
    pub sentences_per_class: Option<Summary>,
    pub words_per_class: Option<Summary>,
    pub words_per_sentence: Option<Summary>,
}

pub fn corpus_stats(bank: &EmbeddingBank) -> CorpusStats {
    let mut classes = Vec::new();
    let mut words_per_sentence = Vec::new();
    for c in 0..bank.num_classes() {
        let sents = bank.sentences(c);
        let mut words = Some(0usize);
        for s in sents {
            match &bank.manifest.rows[s.row].text {
                Some(t) => {
                    let n = t.split_whitespace().count();
                    words_per_sentence.push(n as f64);
                    words = words.map(|w| w + n);
                }
                None => words = None,
            }
        }
        classes.push(ClassCorpus {
            class_id: c,
            name: bank.class_name(c).to_string(),
            sentences: sents.len(),
            prompt_sentences: sents
                .iter()
                .filter(|s| s.source == SentenceSource::Prompt)
                .count(),
            videos: bank.manifest.classes[c].video_count,
            words,
        });
    }
    let per_class: Vec<f64> = classes.iter().map(|c| c.sentences as f64).collect();
    let words_per_class: Option<Vec<f64>> = classes
        .iter()
        .map(|c| c.words.map(|w| w as f64))
        .collect();
    CorpusStats {
        total_sentences: classes.iter().map(|c| c.sentences).sum(),
        total_videos: bank.videos.len(),
        total_frames: bank.videos.iter().map(|v| v.frames).sum(),
        sentences_per_class: Summary::of(&per_class),
        words_per_class: words_per_class.and_then(|w| Summary::of(&w)),
        words_per_sentence: Summary::of(&words_per_sentence),
        classes,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Two classes, three videos (2 + 1 + 3 frames), dim 4, five sentences.
    pub(crate) fn fixture() -> EmbeddingBank {
        let names = vec!["abseiling".to_string(), "juggling".to_string()];
        let mut rows = Vec::new();
        let mut k = 0.0f32;
        let mut vals = || {
            k += 1.0;
            vec![k, -k, 0.5 * k, 1.0]
        };
        for f in 0..2 {
            let _ = f;
            rows.push((RowDraft::frame(0, "v0", Subset::Train), vals()));
        }
        rows.push((RowDraft::frame(1, "v1", Subset::Test), vals()));
        for _ in 0..3 {
            rows.push((RowDraft::frame(1, "v2", Subset::Train), vals()));
        }
        rows.push((
            RowDraft::sentence(0, "s0", SentenceSource::Prompt).with_text("a video of abseiling"),
            vals(),
        ));
        rows.push((
            RowDraft::sentence(0, "s1", SentenceSource::Corpus).with_text("descend a rope"),
            vals(),
        ));
        rows.push((
            RowDraft::sentence(1, "s2", SentenceSource::Prompt).with_text("a video of juggling"),
            vals(),
        ));
        rows.push((
            RowDraft::sentence(1, "s3", SentenceSource::Corpus).with_text("toss balls"),
            vals(),
        ));
        rows.push((
            RowDraft::sentence(1, "s4", SentenceSource::Corpus).with_text("keep them aloft in the air"),
            vals(),
        ));
        EmbeddingBank::from_parts(4, &names, rows).unwrap()
    }

    #[test]
    fn reconstructs_videos() {
        let bank = fixture();
        assert_eq!(bank.videos().len(), 3);
        let frames: Vec<usize> = bank.videos().iter().map(|v| v.frames).collect();
        assert_eq!(frames, vec![2, 1, 3]);
        let frame_rows = bank
            .manifest()
            .rows
            .iter()
            .filter(|r| r.kind == RowKind::Frame)
            .count();
        assert_eq!(frames.iter().sum::<usize>(), frame_rows);
        assert_eq!(bank.frames(2).shape(), &[3, 4]);
        assert_eq!(bank.video(1).subset, Subset::Test);
    }

    #[test]
    fn corpus_stats_hand_count() {
        let stats = corpus_stats(&fixture());
        assert_eq!(stats.total_videos, 3);
        assert_eq!(stats.total_frames, 6);
        assert_eq!(stats.total_sentences, 5);
        assert_eq!(stats.classes[0].sentences, 2);
        assert_eq!(stats.classes[1].sentences, 3);
        assert_eq!(stats.classes[0].prompt_sentences, 1);
        assert_eq!(stats.classes[0].words, Some(4 + 3));
        assert_eq!(stats.classes[1].words, Some(4 + 2 + 6));
        let s = stats.sentences_per_class.unwrap();
        assert_eq!((s.min, s.max, s.mean, s.median), (2.0, 3.0, 2.5, 2.5));
        let w = stats.words_per_sentence.unwrap();
        assert_eq!((w.min, w.max, w.median), (2.0, 6.0, 4.0));
    }

    #[test]
    fn rejects_non_contiguous_frames() {
        let mut m = fixture().manifest().clone();
        // move v0's second frame after v1
        m.rows.swap(1, 2);
        m.rows[1].row_id = 1;
        m.rows[2].row_id = 2;
        let err = EmbeddingBank::new(4, fixture().blob().to_vec(), m).unwrap_err();
        assert!(matches!(err, Error::CorruptBank(_)), "{err}");
    }

    #[test]
    fn rejects_unknown_class_and_bad_counts() {
        let bank = fixture();
        let mut m = bank.manifest().clone();
        m.rows[7].class_id = 9;
        assert!(matches!(
            EmbeddingBank::new(4, bank.blob().to_vec(), m),
            Err(Error::CorruptBank(_))
        ));
        let mut m = bank.manifest().clone();
        m.classes[0].video_count = 5;
        assert!(matches!(
            EmbeddingBank::new(4, bank.blob().to_vec(), m),
            Err(Error::CorruptBank(_))
        ));
    }

    #[test]
    fn header_only_for_empty_bank() {
        let bank = EmbeddingBank::new(8, Vec::new(), Manifest::default()).unwrap();
        let bytes = encode_blob(bank.dim(), bank.blob());
        assert_eq!(bytes.len(), HEADER_LEN);
        let (dim, vals) = decode_blob(&bytes, Path::new("x")).unwrap();
        assert_eq!((dim, vals.len()), (8, 0));
    }

    #[test]
    fn decode_rejects_bad_magic_and_truncation() {
        let bank = fixture();
        let mut bytes = encode_blob(bank.dim(), bank.blob());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_blob(truncated, Path::new("x")),
            Err(Error::CorruptBank(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_blob(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }
}

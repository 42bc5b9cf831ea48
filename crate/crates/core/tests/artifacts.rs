use std::fs;

use gvr_core::bank::*;
use gvr_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Precision};
use gvr_core::config::content_hash;
use gvr_core::head::SalientTextBank;
use gvr_core::model::{init_params, ModelConfig};
use gvr_core::synth::{generate, SynthConfig};
use gvr_core::tensor::Tensor;
use gvr_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two classes, three videos of two frames, one prompt and one corpus
/// sentence per class, width 4, every value an exact binary fraction.
fn golden_bank() -> EmbeddingBank {
    let names = vec!["archery".to_string(), "juggling balls".to_string()];
    let mut rows = Vec::new();
    let mut next = 0u32;
    let mut vec4 = || {
        next += 1;
        (0..4).map(|k| (next * 4 + k) as f32 / 64.0 + 0.125).collect::<Vec<f32>>()
    };
    for (video, class, subset) in [("v0", 0, Subset::Train), ("v1", 1, Subset::Train), ("v2", 1, Subset::Test)] {
        for _ in 0..2 {
            rows.push((RowDraft::frame(class, video, subset), vec4()));
        }
    }
    for class in 0..2u32 {
        rows.push((
            RowDraft::sentence(class, &format!("p{class}"), SentenceSource::Prompt).with_text("a video of a person"),
            vec4(),
        ));
        rows.push((RowDraft::sentence(class, &format!("s{class}"), SentenceSource::Corpus), vec4()));
    }
    EmbeddingBank::from_parts(4, &names, rows).unwrap()
}

/// SHA-256 of the blob followed by the manifest of the golden bank.
const GOLDEN_DIGEST: &str = "096ab5cb6714c1fdc905e0fc9a89ab6e9e9c1911dd1ff0e287359ec79e028f36";

fn bank_digest(dir: &std::path::Path) -> String {
    let mut bytes = fs::read(dir.join("bank.bin")).unwrap();
    bytes.extend(fs::read(manifest_path(&dir.join("bank.bin"))).unwrap());
    content_hash(&bytes)
}

#[test]
fn save_load_is_bitwise_round_trip() {
    let (bank, _) = generate(&SynthConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.bin");
    save_bank(&bank, &path).unwrap();
    let back = load_bank(&path).unwrap();
    assert_eq!(back, bank);
    let bits = |b: &EmbeddingBank| b.blob().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&bank));
    let again = dir.path().join("again.bin");
    save_bank(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    assert_eq!(fs::read(manifest_path(&path)).unwrap(), fs::read(manifest_path(&again)).unwrap());
}

#[test]
fn golden_bank_digest() {
    let dir = tempfile::tempdir().unwrap();
    save_bank(&golden_bank(), &dir.path().join("bank.bin")).unwrap();
    assert_eq!(bank_digest(dir.path()), GOLDEN_DIGEST);
}

#[test]
fn header_layout() {
    let bank = golden_bank();
    let bytes = encode_blob(bank.dim(), bank.blob());
    assert_eq!(&bytes[..4], b"GVRE");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
    assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 10);
    assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 4);
    assert_eq!(bytes.len(), HEADER_LEN + 10 * 4 * 4);
    assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), bank.row(0)[0]);
}

#[test]
fn golden_bank_statistics() {
    let bank = golden_bank();
    let stats = corpus_stats(&bank);
    assert_eq!(bank.videos().len(), 3);
    assert_eq!(bank.frames(1).shape(), &[2, 4]);
    let frames: usize = bank.videos().iter().map(|v| v.frames).sum();
    assert_eq!(frames, 6);
    assert_eq!(stats.classes.len(), 2);
    assert_eq!(stats.classes[1].videos, 2);
    assert_eq!(stats.classes[0].sentences, 2);
    assert!(bank.warnings().is_empty());
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.bin");
    save_bank(&golden_bank(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_bank(&path), Err(Error::CorruptBank(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_bank(&path), Err(Error::Format { .. })));
    // A manifest that disagrees with the blob is a corrupt bank.
    fs::write(&path, encode_blob(4, &vec![0.0; 4 * 9])).unwrap();
    assert!(load_bank(&path).is_err());
}

#[test]
fn checkpoint_round_trips() {
    let cfg = ModelConfig {
        base_dim: 6,
        dim: 6,
        layers: 2,
        heads: 2,
        max_frames: 4,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let cfg_json = serde_json::to_value(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    save_checkpoint(&path, "student", cfg_json.clone(), 12, 3, "abc", &params, Precision::F64).unwrap();
    let (header, back) = load_checkpoint(&path).unwrap();
    assert_eq!((header.kind.as_str(), header.step, header.seed), ("student", 12, 3));
    assert_eq!(header.config, cfg_json);
    let flat = |g: &gvr_core::optim::ParamGroup| {
        g.iter()
            .map(|p| (p.name.clone(), p.value.clone(), p.lr_scale, p.decay))
            .collect::<Vec<_>>()
    };
    assert_eq!(flat(&back), flat(&params));
    let a = encode_checkpoint("student", cfg_json.clone(), 12, 3, "abc", &params, Precision::F32).unwrap();
    let b = encode_checkpoint("student", cfg_json, 12, 3, "abc", &params, Precision::F32).unwrap();
    assert_eq!(a, b);
    assert!(decode_checkpoint(&a[..a.len() - 1], &path).is_err());
}

#[test]
fn salient_bank_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut emb = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
    for row in emb.data_mut().chunks_mut(4) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v = ((*v / n) as f32) as f64);
    }
    let bank = SalientTextBank {
        classes: 3,
        m: 2,
        dim: 4,
        embeddings: emb,
        sentence_ids: (0..3).map(|c| vec![format!("s{c}a"), format!("s{c}b")]).collect(),
        scores: vec![vec![0.1, 0.2]; 3],
        strategy: "tsr".into(),
        digest: "d".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("salient.bin");
    bank.save(&path).unwrap();
    assert_eq!(SalientTextBank::load(&path).unwrap(), bank);
}

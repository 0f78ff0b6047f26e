// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::{fixture_config, fixture_path};
use proptest::prelude::*;
use snrf_core::checkpoint::{load_corpus, parse_vocab, MAGIC};
use snrf_core::{load_checkpoint, save_checkpoint, CheckpointError, Error, ModelConfig, ProbeCorpus, WeightMap};

#[derive(serde::Deserialize)]
struct Values {
    config: ModelConfig,
    tensors: BTreeMap<String, Vec<Vec<f64>>>,
}

fn check_against_values(snrf: &str, json: &str) {
    let w = load_checkpoint(fixture_path(snrf)).unwrap();
    let v: Values = serde_json::from_str(&std::fs::read_to_string(fixture_path(json)).unwrap()).unwrap();
    assert_eq!(*w.config(), v.config);
    assert_eq!(w.tensors().len(), v.tensors.len());
    for (name, rows) in &v.tensors {
        let t = w.tensor(name).unwrap();
        assert_eq!(t.shape(), (rows.len(), rows[0].len()), "{name}");
        for (r, row) in rows.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                // The writer stored f32; the JSON holds that f32 widened.
                assert_eq!(f64::from(t.get(r, c)), x, "{name}[{r},{c}]");
            }
        }
    }
}

#[test]
fn reads_independently_written_two_layer_file() {
    check_against_values("two_layer.snrf", "two_layer_values.json");
}

#[test]
fn reads_non_square_intermediate_file() {
    check_against_values("nonsquare.snrf", "nonsquare_values.json");
}

#[test]
fn reserialising_a_foreign_file_round_trips_values() {
    let w = load_checkpoint(fixture_path("two_layer.snrf")).unwrap();
    let again = WeightMap::from_bytes(&w.to_bytes()).unwrap();
    assert!(w.bit_eq(&again));
}

#[test]
fn truncated_payload_names_tensor_and_range() {
    let err = load_checkpoint(fixture_path("truncated.snrf")).unwrap_err();
    match err {
        Error::Checkpoint(CheckpointError::Truncated { name, start, end, available }) => {
            assert_eq!(name, "unembed.weight");
            assert_eq!(end - start, 256);
            assert_eq!(available, start + 240);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(load_checkpoint(fixture_path("truncated.snrf")).unwrap_err().exit_code(), 3);
}

fn corrupt(f: impl FnOnce(&mut Vec<u8>)) -> Error {
    let mut b = WeightMap::random(fixture_config(), 1).unwrap().to_bytes();
    f(&mut b);
    WeightMap::from_bytes(&b).unwrap_err()
}

fn header_range(b: &[u8]) -> std::ops::Range<usize> {
    let len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    16..16 + len
}

fn rewrite_header(b: &mut Vec<u8>, f: impl FnOnce(&mut serde_json::Value)) {
    let r = header_range(b);
    let mut h: serde_json::Value = serde_json::from_slice(&b[r.clone()]).unwrap();
    f(&mut h);
    let new = serde_json::to_vec(&h).unwrap();
    let payload = b[r.end..].to_vec();
    b.truncate(8);
    b.extend_from_slice(&(new.len() as u64).to_le_bytes());
    b.extend_from_slice(&new);
    b.extend_from_slice(&payload);
}

#[test]
fn malformed_files_are_rejected_with_specific_errors() {
    assert!(matches!(corrupt(|b| b[0] = b'X'), Error::Checkpoint(CheckpointError::BadMagic { .. })));
    assert!(matches!(corrupt(|b| b[4] = 9), Error::Checkpoint(CheckpointError::UnsupportedVersion { found: 9 })));
    assert!(matches!(corrupt(|b| b.push(0)), Error::Checkpoint(CheckpointError::TrailingBytes(1))));
    assert!(matches!(corrupt(|b| b.truncate(10)), Error::Checkpoint(CheckpointError::Header(_))));
    let e = corrupt(|b| {
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    });
    assert!(matches!(e, Error::Checkpoint(CheckpointError::NonFinite { .. })), "{e:?}");
    let e = corrupt(|b| rewrite_header(b, |h| h["tensors"][0]["rows"] = 3.into()));
    assert!(matches!(e, Error::Checkpoint(CheckpointError::ShapeMismatch { .. })), "{e:?}");
    let e = corrupt(|b| rewrite_header(b, |h| h["tensors"][0]["name"] = "layers.9.attn.q.weight".into()));
    assert!(matches!(e, Error::Checkpoint(CheckpointError::UnexpectedTensor(_))), "{e:?}");
    let e = corrupt(|b| {
        rewrite_header(b, |h| {
            h["tensors"].as_array_mut().unwrap().pop();
        })
    });
    // The dropped entry's bytes are now unclaimed or the tensor is missing.
    assert!(matches!(e, Error::Checkpoint(CheckpointError::MissingTensor(_))), "{e:?}");
    let e = corrupt(|b| rewrite_header(b, |h| h["extra"] = 1.into()));
    assert!(matches!(e, Error::Checkpoint(CheckpointError::Header(_))), "{e:?}");
}

#[test]
fn bad_magic_reports_found_bytes() {
    let e = WeightMap::from_bytes(b"GGUF....").unwrap_err();
    assert!(e.to_string().contains("GGUF") || e.to_string().contains("71"), "{e}");
    assert_eq!(&MAGIC[..], b"SNRF");
}

#[test]
fn save_then_load_via_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.snrf");
    let w = WeightMap::random(fixture_config(), 3).unwrap();
    save_checkpoint(&w, &p).unwrap();
    assert!(load_checkpoint(&p).unwrap().bit_eq(&w));
}

#[test]
fn corpus_and_vocab_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.txt");
    std::fs::write(&p, "1 5 2 7\n1 6 2\n").unwrap();
    let c = load_corpus(&p, &fixture_config()).unwrap();
    assert_eq!(c.contexts, vec![vec![1, 5, 2, 7], vec![1, 6, 2]]);
    assert!(!c.uniform_length());

    let e = ProbeCorpus::parse("1 2\n1 99\n", 32, "c.txt").unwrap_err();
    assert_eq!(e.to_string(), "c.txt:2: token 2: id 99 out of vocabulary (size 32)");
    assert_eq!(e.exit_code(), 3);
    assert!(ProbeCorpus::parse("1 2\n\n3\n", 32, "c").is_err());
    assert!(ProbeCorpus::parse("1 x\n", 32, "c").is_err());

    let v = parse_vocab("0\t<eos>\n5\thello world\n", "v").unwrap();
    assert_eq!(v[&5], "hello world");
    assert!(parse_vocab("0\ta\n0\tb\n", "v").is_err());
}

fn any_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..=3, 1usize..=6, 1usize..=9, 3usize..=12).prop_map(|(n_layers, d_model, d_inter, vocab)| ModelConfig {
        n_layers,
        d_model,
        d_inter,
        vocab,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_bit_exact(cfg in any_config(), seed in any::<u64>()) {
        let w = WeightMap::random(cfg, seed).unwrap();
        let bytes = w.to_bytes();
        let back = WeightMap::from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_eq(&w));
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_truncation_is_an_error(cut in 0usize..2000) {
        let bytes = WeightMap::random(ModelConfig { n_layers: 1, d_model: 3, d_inter: 4, vocab: 5 }, 1).unwrap().to_bytes();
        prop_assume!(cut < bytes.len());
        prop_assert!(WeightMap::from_bytes(&bytes[..cut]).is_err());
    }
}

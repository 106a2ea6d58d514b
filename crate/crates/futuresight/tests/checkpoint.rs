mod common;

use std::path::Path;

use futuresight::checkpoint::{self, decode, encode, TrainingState, CHECKPOINT_VERSION, MAGIC};
use futuresight::Error;
use futuresight_core::model::{Conditioning, InjectionMode, Model, ModelConfig};
use futuresight_core::tensor::Tensor;
use futuresight_core::training::{AdamState, Progress, TrainConfig};
use proptest::prelude::*;

fn model(mode: InjectionMode) -> Model {
    Model::new(common::tiny_config(64, mode)).unwrap()
}

fn logits(m: &Model) -> Tensor {
    let cond = match m.config().injection_mode {
        InjectionMode::None => Conditioning::None,
        _ => m.condition(2, &[10, 11], &[20, 21, 22]).unwrap(),
    };
    m.decoder_forward(&[1, 30, 31, 32, 33], &cond).unwrap()
}

fn training_state(m: &Model) -> TrainingState {
    let mut adam = AdamState::new(m);
    for (k, t) in adam.m.iter_mut().chain(adam.v.iter_mut()).enumerate() {
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x = (k * 31 + i) as f64 * 1e-3;
        }
    }
    adam.steps = 17;
    TrainingState {
        train_config: TrainConfig { epochs: 3, ..TrainConfig::default() },
        adam,
        progress: Progress { epoch: 1, group_in_epoch: 2, step: 17 },
    }
}

fn rewrite_crc(bytes: &mut [u8]) {
    let n = bytes.len() - 4;
    let crc = crc32fast::hash(&bytes[..n]);
    bytes[n..].copy_from_slice(&crc.to_le_bytes());
}

#[test]
fn round_trip_preserves_weights_and_logits() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [InjectionMode::Memory, InjectionMode::Embedding, InjectionMode::None] {
        let m = model(mode);
        let path = dir.path().join(format!("{mode:?}.ckpt"));
        checkpoint::save(&path, &m, None).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        assert!(loaded.training.is_none());
        assert_eq!(loaded.model.config(), m.config());
        assert_eq!(loaded.model.params(), m.params());
        assert_eq!(logits(&loaded.model), logits(&m));
    }
}

#[test]
fn round_trip_preserves_optimizer_state() {
    let m = model(InjectionMode::Memory);
    let state = training_state(&m);
    let ck = decode(&encode(&m, Some(&state)), Path::new("mem")).unwrap();
    assert_eq!(ck.training.unwrap(), state);
    assert_eq!(ck.model.params(), m.params());
}

#[test]
fn layout_starts_with_magic_and_version() {
    let bytes = encode(&model(InjectionMode::None), None);
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), CHECKPOINT_VERSION);
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
    assert_eq!(header["model_config"]["injection_mode"], "NONE");
    assert_eq!(header["tensors"][0]["dtype"], "f64");
}

#[test]
fn tampering_is_detected() {
    let good = encode(&model(InjectionMode::Memory), None);
    let p = Path::new("t");

    let mut flipped = good.clone();
    flipped[30] ^= 0x01;
    assert!(matches!(decode(&flipped, p), Err(Error::Checkpoint { message, .. }) if message.contains("checksum")));

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic, p), Err(Error::Checkpoint { message, .. }) if message.contains("magic")));

    let mut version = good.clone();
    version[8..12].copy_from_slice(&9u32.to_le_bytes());
    assert!(matches!(decode(&version, p), Err(Error::Checkpoint { message, .. }) if message.contains("version 9")));

    assert!(decode(&good[..good.len() / 2], p).is_err());
    assert!(decode(&good[..10], p).is_err());
}

#[test]
fn consistent_but_wrong_header_is_rejected() {
    let good = encode(&model(InjectionMode::Memory), None);
    let header_len = u64::from_le_bytes(good[12..20].try_into().unwrap()) as usize;
    let header = String::from_utf8(good[20..20 + header_len].to_vec()).unwrap();
    let edited = header.replacen("\"d_ff\":32", "\"d_ff\":48", 1);
    assert_ne!(edited, header);
    let mut bytes = good[..20].to_vec();
    bytes.extend_from_slice(edited.as_bytes());
    bytes.extend_from_slice(&good[20 + header_len..]);
    rewrite_crc(&mut bytes);
    assert!(matches!(decode(&bytes, Path::new("h")), Err(Error::Checkpoint { .. })));
}

#[test]
fn mode_and_config_guards() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model(InjectionMode::Memory), None).unwrap();
    assert!(checkpoint::load_with_mode(&path, InjectionMode::Memory).is_ok());
    match checkpoint::load_with_mode(&path, InjectionMode::None) {
        Err(Error::Checkpoint { message, .. }) => assert!(message.contains("injection_mode"), "{message}"),
        other => panic!("{other:?}"),
    }
    let ck = checkpoint::load(&path).unwrap();
    let other = ModelConfig { n_heads: 4, ..ck.model.config().clone() };
    match ck.expect_config(&other, &path) {
        Err(Error::Checkpoint { message, .. }) => assert!(message.contains("n_heads"), "{message}"),
        other => panic!("{other:?}"),
    }
    ck.expect_config(&ck.model.config().clone(), &path).unwrap();
    assert!(checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn random_configs_round_trip(
        heads in 1usize..3,
        head_dim in 2usize..5,
        layers in 1usize..3,
        enc_layers in 1usize..3,
        mode in prop_oneof![Just(InjectionMode::Memory), Just(InjectionMode::Embedding), Just(InjectionMode::None)],
        seed in 0u64..1000,
    ) {
        let d = heads * head_dim;
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: d,
            d_enc: d + 2,
            n_heads: heads,
            n_layers_dec: layers,
            n_layers_enc: enc_layers,
            d_ff: 2 * d,
            max_seq: 16,
            injection_mode: mode,
            seed,
        };
        let m = Model::new(cfg).unwrap();
        let back = decode(&encode(&m, None), Path::new("p")).unwrap();
        prop_assert_eq!(back.model.params(), m.params());
        prop_assert_eq!(back.model.config(), m.config());
    }
}

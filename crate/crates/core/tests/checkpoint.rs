use proptest::prelude::*;

use csen_core::checkpoint::{Checkpoint, Dtype};
use csen_core::checks::{tiny_batch, tiny_model_config};
use csen_core::losses::LossConfig;
use csen_core::model::Model;
use csen_core::training::{train_step, Precision, TrainConfig, TrainState};
use csen_core::{Error, Tensor};

fn trained_state(precision: Precision) -> TrainState {
    let cfg = TrainConfig {
        precision,
        ..Default::default()
    };
    let model = Model::new(tiny_model_config(), 4, 17).unwrap();
    let mut st = TrainState::new(model, &cfg);
    let batch = tiny_batch(&st.model.config, 18);
    train_step(&mut st, &batch, &cfg, &LossConfig::default(), 1e-3).unwrap();
    st.epoch = 1;
    st
}

fn bytes_of(st: &TrainState, precision: Precision) -> Vec<u8> {
    let config = serde_json::json!({ "train": { "seed": 3407 } });
    Checkpoint::from_state(st, precision, 3407, config, "abc123".into())
        .to_bytes()
        .unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    for precision in [Precision::F64, Precision::F32] {
        let st = trained_state(precision);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        Checkpoint::from_state(&st, precision, 3407, serde_json::json!({}), "h".into())
            .save(&path)
            .unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let again = dir.path().join("b.ckpt");
        loaded.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

        let restored = Checkpoint::load(&path).unwrap().into_state().unwrap();
        assert_eq!(restored.model.params, st.model.params);
        assert_eq!(restored.model.buffers, st.model.buffers);
        assert_eq!(restored.adam, st.adam);
        assert_eq!(restored.epoch, 1);
        assert_eq!(restored.history, st.history);
    }
}

#[test]
fn dtypes_are_recorded_per_tensor() {
    let st = trained_state(Precision::F32);
    let ck = Checkpoint::from_bytes(&bytes_of(&st, Precision::F32)).unwrap();
    for (name, (dtype, _)) in &ck.tensors {
        let expect = if name.starts_with("adam.") { Dtype::F64 } else { Dtype::F32 };
        assert_eq!(*dtype, expect, "{name}");
    }
    assert_eq!(ck.meta.precision, Precision::F32);
    assert_eq!(ck.meta.config_hash, "abc123");

    // Values off the f32 grid cannot be stored as f32.
    let st64 = trained_state(Precision::F64);
    let ck = Checkpoint::from_state(&st64, Precision::F32, 1, serde_json::json!({}), String::new());
    assert!(matches!(ck.to_bytes(), Err(Error::Checkpoint(_))));
}

#[test]
fn every_single_byte_flip_in_the_payload_is_detected() {
    let st = trained_state(Precision::F64);
    let bytes = bytes_of(&st, Precision::F64);
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let start = 16 + hlen;
    let stride = ((bytes.len() - start) / 97).max(1);
    for pos in (start..bytes.len()).step_by(stride) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("corrupt"), "byte {pos}: {err}");
    }
}

#[test]
fn structural_damage_has_specific_errors() {
    let st = trained_state(Precision::F64);
    let bytes = bytes_of(&st, Precision::F64);

    let err = Checkpoint::from_bytes(&bytes[..10]).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).unwrap_err().to_string().contains("magic"));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(Checkpoint::from_bytes(&version).unwrap_err().to_string().contains("version 9"));

    let mut header = bytes.clone();
    header[16] = b'#';
    assert!(Checkpoint::from_bytes(&header).unwrap_err().to_string().contains("malformed header"));

    let mut longer = bytes;
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn architecture_mismatch_names_the_tensor() {
    let st = trained_state(Precision::F64);
    let ck = Checkpoint::from_bytes(&bytes_of(&st, Precision::F64)).unwrap();
    let other = Model::new(tiny_model_config(), 5, 17).unwrap();
    let err = ck.clone().restore_into(other).unwrap_err().to_string();
    assert!(err.contains("shape mismatch for `param/cls.weight`"), "{err}");

    let mut missing = ck.clone();
    missing.tensors.remove("param/afem.w");
    let err = missing.into_state().unwrap_err().to_string();
    assert!(err.contains("missing `param/afem.w`"), "{err}");

    let mut extra = ck;
    extra.tensors.insert("param/ghost".into(), (Dtype::F64, Tensor::zeros(&[1])));
    let err = extra.into_state().unwrap_err().to_string();
    assert!(err.contains("ghost"), "{err}");
}

#[test]
fn load_errors_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"nope").unwrap();
    let err = Checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("junk.ckpt"), "{err}");
    assert!(Checkpoint::load(&dir.path().join("absent.ckpt")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arbitrary_parameter_values_round_trip_bit_exactly(values in proptest::collection::vec(any::<f64>(), 1..64)) {
        let mut st = trained_state(Precision::F64);
        let w = st.model.params.get_mut("afem.w").unwrap();
        for (slot, v) in w.data_mut().iter_mut().zip(values.iter().cycle()) {
            *slot = *v;
        }
        let bytes = bytes_of(&st, Precision::F64);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let (_, t) = &back.tensors["param/afem.w"];
        let orig = st.model.params.get("afem.w").unwrap();
        for (a, b) in t.data().iter().zip(orig.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

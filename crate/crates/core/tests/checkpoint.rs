use autodiff::{ParamStore, Tensor};
use nerfrestore::checkpoint::*;
use nerfrestore::Error;
use proptest::prelude::*;

fn sample() -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_meta("stage", "stage1");
    ck.set_meta("note", "a = b # c");
    ck.insert_f32(
        "w",
        Tensor::new(&[2, 3], vec![0.1, -2.5, 3.0, f32::MIN_POSITIVE, 1e30, -0.0]).unwrap(),
    );
    ck.insert_f64(
        "cam",
        Tensor::new(&[4], vec![1.0, 2.0, 1e-300, -7.25]).unwrap(),
    );
    ck.insert_f32("s", Tensor::scalar(4.5));
    ck
}

fn message(e: Error) -> String {
    e.to_string()
}

#[test]
fn file_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ck.drnt");
    let ck = sample();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert_eq!(back.meta("note").unwrap(), "a = b # c");
    assert!(!path.with_extension("tmp").exists());
}

#[test]
fn truncation_reports_the_offset() {
    let bytes = sample().to_bytes();
    for cut in [2, 6, 13, bytes.len() / 2, bytes.len() - 1] {
        let msg = message(Checkpoint::from_bytes(&bytes[..cut]).unwrap_err());
        assert!(
            msg.contains("byte offset") && msg.contains("truncated"),
            "{msg}"
        );
    }
}

#[test]
fn foreign_magic_is_refused() {
    let mut bytes = sample().to_bytes();
    bytes[..4].copy_from_slice(b"XXXX");
    let msg = message(Checkpoint::from_bytes(&bytes).unwrap_err());
    assert!(msg.contains("XXXX") && msg.contains("DRNT"), "{msg}");
}

#[test]
fn other_versions_are_refused() {
    let mut bytes = sample().to_bytes();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let msg = message(Checkpoint::from_bytes(&bytes).unwrap_err());
    assert!(msg.contains("version"), "{msg}");
}

#[test]
fn trailing_garbage_is_refused() {
    let mut bytes = sample().to_bytes();
    bytes.push(0);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn load_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.drnt");
    std::fs::write(&path, b"DRNT").unwrap();
    let msg = message(Checkpoint::load(&path).unwrap_err());
    assert!(msg.contains("bad.drnt"), "{msg}");
    assert!(Checkpoint::load(&dir.path().join("absent.drnt")).is_err());
}

#[test]
fn missing_parameters_are_all_listed() {
    let mut store = ParamStore::new();
    store.add("a.x", Tensor::zeros(&[2])).unwrap();
    store.add("a.y", Tensor::zeros(&[3])).unwrap();
    store.add("b.z", Tensor::zeros(&[1])).unwrap();
    let mut ck = Checkpoint::new();
    ck.insert_f32("a.x", Tensor::ones(&[2]));
    match ck.load_params(&mut store, |_| true) {
        Err(Error::MissingTensors(names)) => {
            assert_eq!(names, vec!["a.y".to_string(), "b.z".to_string()])
        }
        other => panic!("unexpected {other:?}"),
    }
    ck.load_params(&mut store, |n| n == "a.x").unwrap();
    assert_eq!(store.get(store.find("a.x").unwrap()).data(), &[1.0, 1.0]);
}

#[test]
fn shape_mismatch_is_refused() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::zeros(&[2, 2])).unwrap();
    let mut ck = Checkpoint::new();
    ck.insert_f32("p", Tensor::zeros(&[4]));
    assert!(ck.load_params(&mut store, |_| true).is_err());
}

#[test]
fn params_roundtrip_through_a_checkpoint() {
    let mut store = ParamStore::new();
    store
        .add("enc.w", Tensor::new(&[3], vec![1.5, -2.0, 0.25]).unwrap())
        .unwrap();
    store
        .add("dec.w", Tensor::new(&[1], vec![9.0]).unwrap())
        .unwrap();
    let mut ck = Checkpoint::new();
    ck.insert_params(&store, |n| n.starts_with("enc."));
    assert!(ck.f32("dec.w").is_err());
    let mut other = ParamStore::new();
    other.add("enc.w", Tensor::zeros(&[3])).unwrap();
    ck.load_params(&mut other, |_| true).unwrap();
    assert_eq!(
        other.get(other.find("enc.w").unwrap()).data(),
        &[1.5, -2.0, 0.25]
    );
    assert!(ck.meta("absent").is_err());
    assert!(ck.f64("enc.w").is_err());
}

proptest! {
    #[test]
    fn arbitrary_tensors_roundtrip(
        shape in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
        key in "[a-z.]{1,12}",
        value in ".{0,20}",
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
        let mut ck = Checkpoint::new();
        ck.set_meta(key.clone(), &value);
        ck.insert_f32("t", Tensor::new(&shape, data).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.meta(&key).unwrap(), value.as_str());
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn every_prefix_fails_cleanly(cut in 0usize..200) {
        let bytes = sample().to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}

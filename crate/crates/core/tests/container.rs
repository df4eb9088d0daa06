use physmae_core::container::*;
use physmae_core::model::{Model, ModelConfig};
use physmae_core::preprocess::preprocess_dataset;
use physmae_core::sigsynth::{generate_cohort, LatentDistribution};
use physmae_core::Error;
use std::fs;

fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

#[test]
fn dataset_round_trip() {
    let raw = generate_cohort(5, 1, &LatentDistribution::default()).unwrap();
    let (ds, _) = preprocess_dataset(&raw).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let bytes = fs::metadata(dir.path().join("signals.f32")).unwrap().len();
    assert_eq!(bytes as usize, ds.len() * 3 * 1000 * 4);

    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.normalization, ds.normalization);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.sample_id, b.sample_id);
        assert_eq!(a.labels, b.labels);
        for c in 0..3 {
            let want: Vec<f64> = a.channels[c].iter().map(|&v| f32_round(v)).collect();
            assert_eq!(b.channels[c], want);
        }
    }

    // a second save of the loaded copy is byte-identical
    let again = tempfile::tempdir().unwrap();
    save_dataset(&back, again.path()).unwrap();
    for f in ["manifest.json", "signals.f32", "labels.json"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn dataset_errors_are_format_errors() {
    let raw = generate_cohort(2, 1, &LatentDistribution::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&raw, dir.path()).unwrap();

    let signals = dir.path().join("signals.f32");
    let mut bytes = fs::read(&signals).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&signals, &bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    bytes.truncate(bytes.len() - 1);
    fs::write(&signals, &bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));

    let manifest = dir.path().join("manifest.json");
    fs::write(&manifest, "{ not json").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));

    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(missing.path()), Err(Error::Io(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = Model::new(ModelConfig::toy(), &[0.3; 3], 4).unwrap();
    let rng = RngState {
        seed: 4,
        epoch: 2,
        micro_batch: 37,
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, rng, 3, dir.path()).unwrap();
    let bytes = fs::metadata(dir.path().join("weights.f32")).unwrap().len();
    assert_eq!(bytes as usize, model.params().num_scalars() * 4);

    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.rng, rng);
    assert_eq!(ck.step, 3);
    assert_eq!(ck.model.config(), model.config());
    assert_eq!(ck.model.params().names(), model.params().names());
    for (a, b) in model.params().tensors().iter().zip(ck.model.params().tensors()) {
        assert_eq!(a.shape(), b.shape());
        let want: Vec<f64> = a.data().iter().map(|&v| f32_round(v)).collect();
        assert_eq!(b.data(), want.as_slice());
    }

    // once values are f32-representable the round trip is exact
    let again = tempfile::tempdir().unwrap();
    save_checkpoint(&ck.model, ck.rng, ck.step, again.path()).unwrap();
    let ck2 = load_checkpoint(again.path()).unwrap();
    assert_eq!(ck2.model.params().checksum(), ck.model.params().checksum());
    for f in ["checkpoint.json", "weights.f32"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn checkpoint_rejects_mismatched_weights() {
    let model = Model::new(ModelConfig::toy(), &[0.3; 3], 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, RngState::default(), 0, dir.path()).unwrap();
    let w = dir.path().join("weights.f32");
    let bytes = fs::read(&w).unwrap();
    fs::write(&w, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

    fs::write(&w, &bytes).unwrap();
    let desc = dir.path().join("checkpoint.json");
    let text = fs::read_to_string(&desc).unwrap().replace("\"version\": 1", "\"version\": 99");
    fs::write(&desc, text).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
}

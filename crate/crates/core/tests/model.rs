use std::collections::BTreeMap;

use dabn::data::{Dataset, PipelineDescriptor, SubjectId, Window};
use dabn::model::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, train, ArchConfig, TrainHyper};
use dabn::seed::SeedStream;
use rand::Rng;

/// Two users with five random windows each and random labels.
fn noise_dataset(seed: u64) -> Dataset {
    let mut rng = SeedStream::new(seed).rng("noise");
    let mut users = BTreeMap::new();
    let mut raw_counts = BTreeMap::new();
    for u in 0..2 {
        let windows: Vec<Window> = (0..5)
            .map(|i| Window {
                subject: SubjectId(u),
                label: rng.random_range(0..3),
                index: i,
                data: (0..120).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect();
        users.insert(SubjectId(u), windows);
        raw_counts.insert(SubjectId(u), 120);
    }
    Dataset {
        label_map: vec!["a".into(), "b".into(), "c".into()],
        window_len: 40,
        stride: 20,
        users,
        raw_counts,
        pipeline: PipelineDescriptor { steps: vec![] },
    }
}

fn hyper(epochs: usize, seed: u64) -> TrainHyper {
    TrainHyper {
        learning_rate: 1e-2,
        decay: 0.0,
        epochs,
        batch_size: 5,
        seed,
        ..Default::default()
    }
}

#[test]
fn memorizes_ten_windows() {
    let ds = noise_dataset(1);
    let arch = ArchConfig::tiny(3).with_dropout_rate(0.0);
    let (model, report) = train(&ds, &arch, &hyper(300, 2)).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &0.05, "{:?}", report.epoch_losses.last());
    let windows: Vec<&Window> = ds.users.values().flatten().collect();
    let first: Vec<usize> = windows.iter().map(|w| model.predict(&w.data).unwrap().label).collect();
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    assert_eq!(first, labels);
    // No hidden state: predicting in reverse order changes nothing.
    let again: Vec<usize> = windows.iter().rev().map(|w| model.predict(&w.data).unwrap().label).collect();
    assert_eq!(again.into_iter().rev().collect::<Vec<_>>(), first);
}

#[test]
fn checkpoints_are_byte_identical_per_seed() {
    let ds = noise_dataset(3);
    let arch = ArchConfig::tiny(3);
    let bytes = |seed| encode_checkpoint(&train(&ds, &arch, &hyper(5, seed)).unwrap().0);
    let (a, b, c) = (bytes(7), bytes(7), bytes(8));
    assert_eq!(a, b);
    assert_ne!(a, c);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = decode_checkpoint(&a).unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), a);
    let loaded = load_checkpoint(&path).unwrap();
    for w in ds.users.values().flatten() {
        assert_eq!(loaded.predict(&w.data).unwrap(), model.predict(&w.data).unwrap());
    }
}

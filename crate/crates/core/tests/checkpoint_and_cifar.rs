mod common;

use looc_core::data::{augment_with, load_cifar10_binary, parse_cifar10, ImageShape, CIFAR_RECORD_BYTES};
use looc_core::tensor::Tensor;
use looc_core::{Checkpoint, Error, MlpClassifier};
use proptest::prelude::*;

fn fixture_record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..CIFAR_RECORD_BYTES - 1).map(fill));
    r
}

#[test]
fn two_record_fixture_round_trips() {
    let mut bytes = fixture_record(3, |i| (i % 256) as u8);
    bytes.extend(fixture_record(9, |i| 255 - (i % 7) as u8));
    let (features, labels) = parse_cifar10(&bytes, 0).unwrap();
    assert_eq!(labels, vec![3, 9]);
    assert_eq!(features.len(), 2 * 3072);
    for i in 0..3072 {
        assert_eq!(features[i], f64::from((i % 256) as u8) / 255.0);
        assert_eq!(features[3072 + i], f64::from(255 - (i % 7) as u8) / 255.0);
    }
    // Channel-major layout: the first green value sits at 32·32.
    assert_eq!(features[1024], f64::from((1024 % 256) as u8) / 255.0);
}

#[test]
fn loader_reads_files_and_attaches_the_image_shape() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    std::fs::write(&a, common::synth_cifar_bytes(3, 1)).unwrap();
    std::fs::write(&b, common::synth_cifar_bytes(2, 2)).unwrap();
    let ds = load_cifar10_binary(&[&a, &b]).unwrap();
    assert_eq!(ds.len(), 5);
    assert_eq!(ds.labels, vec![0, 1, 2, 0, 1]);
    assert_eq!(ds.image_shape, Some(ImageShape { height: 32, width: 32, channels: 3 }));

    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, b"").unwrap();
    assert_eq!(load_cifar10_binary(&[&empty]).unwrap().len(), 0);
}

#[test]
fn malformed_files_are_rejected_with_offsets() {
    assert!(matches!(parse_cifar10(&[0u8; 3072], 0), Err(Error::Format { offset: 0, .. })));
    let mut bytes = fixture_record(1, |_| 0);
    bytes.extend(fixture_record(10, |_| 0));
    assert!(matches!(
        parse_cifar10(&bytes, 0),
        Err(Error::CorruptRecord { offset: 3073, label: 10 })
    ));
}

#[test]
fn augmentation_identity_and_shape() {
    let shape = ImageShape { height: 4, width: 5, channels: 2 };
    let x = Tensor::matrix(3, 40, (0..120).map(f64::from).collect()).unwrap();
    assert_eq!(augment_with(&x, Some(shape), 0, 0.0, 7), x);
    let y = augment_with(&x, Some(shape), 2, 0.5, 7);
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y, augment_with(&x, Some(shape), 2, 0.5, 7));
    assert_eq!(augment_with(&x, None, 2, 0.5, 7), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn checkpoints_reproduce_logits_bit_for_bit(seed in any::<u64>(), hidden in 1usize..20, extra in 0usize..2) {
        let map = vec![0, 2, 5];
        let model = MlpClassifier::init(&[4, hidden, map.len() + extra], map, 1, seed).unwrap();
        let ckpt = Checkpoint::new(&model, 6, 3).with_meta("epoch", 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let probe = Tensor::matrix(2, 4, vec![0.1, -0.2, 0.3, 0.9, 1.5, 0.0, -1.0, 0.25]).unwrap();
        prop_assert_eq!(back.model.forward_logits(&probe).unwrap(), ckpt.model.forward_logits(&probe).unwrap());
        prop_assert_eq!(back.to_bytes(), ckpt.to_bytes());
        prop_assert_eq!(&back.metadata["epoch"], "4");
        prop_assert_eq!((back.class_count, back.k), (6, 3));
    }
}

#[test]
fn garbage_checkpoints_are_rejected() {
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
    let model = MlpClassifier::init(&[2, 3, 2], vec![0, 1], 0, 1).unwrap();
    let bytes = Checkpoint::new(&model, 3, 2).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

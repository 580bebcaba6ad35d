use hcl_core::datio::{
    decode_embeddings, encode_embeddings, load_embeddings, save_embeddings, EmbeddingDataset, Sample, TaskStream,
    Scenario,
};
use hcl_core::Error;
use proptest::prelude::*;

// Built field by field so the test does not share code with the encoder.
fn hand_built(dim: u32, class_count: u32, records: &[(u32, u32, Vec<f32>)]) -> Vec<u8> {
    let mut b = b"HIDE".to_vec();
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&dim.to_le_bytes());
    b.extend_from_slice(&(records.len() as u32).to_le_bytes());
    b.extend_from_slice(&class_count.to_le_bytes());
    for (c, t, f) in records {
        b.extend_from_slice(&c.to_le_bytes());
        b.extend_from_slice(&t.to_le_bytes());
        for v in f {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

fn offset_of(r: Result<EmbeddingDataset, Error>) -> u64 {
    match r {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn decodes_a_hand_built_file() {
    let bytes = hand_built(3, 4, &[(2, 0, vec![1.0, -0.5, 0.25]), (3, 1, vec![0.0, 8.0, -1e-3])]);
    assert_eq!(bytes.len(), 18 + 2 * (8 + 12));
    let ds = decode_embeddings(&bytes).unwrap();
    assert_eq!((ds.dim, ds.class_count, ds.len()), (3, 4, 2));
    assert_eq!(ds.samples[0], Sample { class_id: 2, task_id: 0, features: vec![1.0, -0.5, 0.25] });
    assert_eq!(ds.samples[1].task_id, 1);
    assert_eq!(ds.samples[1].features[2], f64::from(-1e-3f32));
    assert_eq!(ds.classes(), vec![2, 3]);
}

#[test]
fn encoder_writes_the_documented_layout() {
    let mut ds = EmbeddingDataset::new(2, 3);
    ds.push(Sample { class_id: 1, task_id: 5, features: vec![0.5, -2.0] }).unwrap();
    let bytes = encode_embeddings(&ds).unwrap();
    assert_eq!(bytes, hand_built(2, 3, &[(1, 5, vec![0.5, -2.0])]));
    assert_eq!(&bytes[..4], b"HIDE");
    assert_eq!(bytes[4..6], [1, 0]);
}

#[test]
fn empty_dataset_is_header_only() {
    let ds = EmbeddingDataset::new(5, 0);
    let bytes = encode_embeddings(&ds).unwrap();
    assert_eq!(bytes.len(), 18);
    assert_eq!(decode_embeddings(&bytes).unwrap(), ds);
}

#[test]
fn file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.hide");
    let mut ds = EmbeddingDataset::new(4, 10);
    for i in 0..25u32 {
        let f = (0..4).map(|j| f64::from((i * 4 + j) as f32 * 0.125 - 3.0)).collect();
        ds.push(Sample { class_id: i % 10, task_id: i / 5, features: f }).unwrap();
    }
    save_embeddings(&ds, &path).unwrap();
    assert_eq!(load_embeddings(&path).unwrap(), ds);
    assert!(matches!(load_embeddings(&dir.path().join("missing.hide")), Err(Error::Io(_))));
}

#[test]
fn corruption_is_reported_with_its_offset() {
    let good = hand_built(2, 3, &[(0, 0, vec![1.0, 2.0]), (1, 0, vec![3.0, 4.0])]);
    decode_embeddings(&good).unwrap();

    let mut b = good.clone();
    b[0] = b'X';
    assert_eq!(offset_of(decode_embeddings(&b)), 0);
    assert_eq!(offset_of(decode_embeddings(b"HI")), 0);
    assert_eq!(offset_of(decode_embeddings(&good[..10])), 10);

    let mut b = good.clone();
    b[4] = 2;
    assert!(matches!(decode_embeddings(&b), Err(Error::Version { found: 2, supported: 1 })));

    let mut b = good.clone();
    b[6..10].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(offset_of(decode_embeddings(&b)), 6);

    // one full record plus part of the second
    assert_eq!(offset_of(decode_embeddings(&good[..18 + 16 + 5])), 34);
    let mut b = good.clone();
    b.push(0);
    assert_eq!(offset_of(decode_embeddings(&b)), 50);

    let mut b = good.clone();
    b[34..38].copy_from_slice(&3u32.to_le_bytes());
    assert_eq!(offset_of(decode_embeddings(&b)), 34);

    let mut b = good.clone();
    b[30..34].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(offset_of(decode_embeddings(&b)), 30);
}

#[test]
fn encoder_rejects_inconsistent_samples() {
    let ds = EmbeddingDataset {
        dim: 2,
        class_count: 2,
        samples: vec![Sample { class_id: 0, task_id: 0, features: vec![1.0] }],
    };
    assert!(matches!(encode_embeddings(&ds), Err(Error::Dimension(_))));
    let ds = EmbeddingDataset {
        dim: 1,
        class_count: 2,
        samples: vec![Sample { class_id: 2, task_id: 0, features: vec![1.0] }],
    };
    assert!(encode_embeddings(&ds).is_err());
}

#[test]
fn task_ids_rebuild_the_stream() {
    let mut train = EmbeddingDataset::new(1, 4);
    let mut test = EmbeddingDataset::new(1, 4);
    for (c, t) in [(0, 0), (1, 0), (2, 1), (3, 1)] {
        for v in [0.0, 1.0] {
            train.push(Sample { class_id: c, task_id: t, features: vec![v] }).unwrap();
        }
        test.push(Sample { class_id: c, task_id: t, features: vec![0.5] }).unwrap();
    }
    let stream = TaskStream::from_datasets(&train, &test, Scenario::Cil).unwrap();
    assert_eq!(stream.len(), 2);
    assert_eq!(stream.tasks[1].labels, vec![2, 3]);
    let (tr, te) = stream.to_datasets();
    assert_eq!(decode_embeddings(&encode_embeddings(&tr).unwrap()).unwrap(), tr);
    assert_eq!(te.len(), 4);
}

proptest! {
    #[test]
    fn arbitrary_datasets_roundtrip(
        dim in 1usize..6,
        rows in proptest::collection::vec((0u32..7, 0u32..3, proptest::collection::vec(-1e6f32..1e6, 6)), 0..20),
    ) {
        let mut ds = EmbeddingDataset::new(dim, 7);
        for (c, t, f) in rows {
            ds.push(Sample { class_id: c, task_id: t, features: f[..dim].iter().map(|&v| f64::from(v)).collect() }).unwrap();
        }
        let bytes = encode_embeddings(&ds).unwrap();
        prop_assert_eq!(bytes.len(), 18 + ds.len() * (8 + 4 * dim));
        prop_assert_eq!(decode_embeddings(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..58) {
        let good = hand_built(2, 3, &[(0, 0, vec![1.0, 2.0]), (1, 0, vec![3.0, 4.0])]);
        prop_assume!(cut < good.len());
        prop_assert!(decode_embeddings(&good[..cut]).is_err());
    }
}

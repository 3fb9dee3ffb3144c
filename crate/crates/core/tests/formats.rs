use proptest::prelude::*;
use slr_core::fusion::LogitMatrix;
use slr_core::io::{
    decode_depth, decode_keypoints, decode_logits, decode_tensor, encode_depth, encode_keypoints,
    encode_logits, encode_tensor, Checkpoint, Manifest, ManifestRow, ModelKind, ModelMeta,
    RunConfig, FEATURE_MAGIC, STREAM_MAGIC,
};
use slr_core::keypoints::{DepthMap, KeypointSequence};
use slr_core::numeric::{NdArray, ParamStore};
use slr_core::SlrError;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e6f64..1e6, n)
}

fn sequence() -> impl Strategy<Value = KeypointSequence> {
    (
        1usize..6,
        1usize..8,
        prop::bool::ANY,
        1.0f64..4096.0,
        1.0f64..4096.0,
    )
        .prop_flat_map(|(t, l, d, w, h)| {
            let c = if d { 4 } else { 3 };
            (
                values(t * l * c),
                prop::collection::vec(0.0f64..=1.0, t * l),
            )
                .prop_map(move |(mut v, s)| {
                    for (i, s) in s.into_iter().enumerate() {
                        v[i * c + c - 1] = s;
                    }
                    KeypointSequence::new(t, l, c, v, (w, h)).unwrap()
                })
        })
}

fn tensor() -> impl Strategy<Value = NdArray> {
    prop::collection::vec(1usize..5, 1..6).prop_flat_map(|shape| {
        let n = shape.iter().product();
        values(n).prop_map(move |v| NdArray::new(&shape, v).unwrap())
    })
}

fn id() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_./-]{1,12}"
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn keypoints_round_trip(seq in sequence()) {
        let a = encode_keypoints(&seq).unwrap();
        let back = decode_keypoints(&a).unwrap();
        prop_assert_eq!(encode_keypoints(&back).unwrap(), a);
        for (x, y) in seq.data().iter().zip(back.data()) {
            prop_assert_eq!(*x as f32 as f64, *y);
        }
    }

    #[test]
    fn depth_round_trip(t in 1usize..4, w in 1usize..6, h in 1usize..6, seed in values(1)) {
        let maps: Vec<DepthMap> = (0..t)
            .map(|f| DepthMap::new(w, h, (0..w * h).map(|i| seed[0] + (f * 31 + i) as f64 * 0.37).collect()).unwrap())
            .collect();
        let a = encode_depth(&maps).unwrap();
        prop_assert_eq!(encode_depth(&decode_depth(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn tensors_round_trip(x in tensor(), tag in 0u16..4) {
        for magic in [STREAM_MAGIC, FEATURE_MAGIC] {
            let a = encode_tensor(magic, tag, &x).unwrap();
            let (t, back) = decode_tensor(magic, &a).unwrap();
            prop_assert_eq!(t, tag);
            prop_assert_eq!(back.shape(), x.shape());
            prop_assert_eq!(encode_tensor(magic, t, &back).unwrap(), a);
        }
        let a = encode_tensor(STREAM_MAGIC, tag, &x).unwrap();
        let is_format_err = matches!(decode_tensor(FEATURE_MAGIC, &a), Err(SlrError::Format { offset: 0, .. }));
        prop_assert!(is_format_err);
    }

    #[test]
    fn logits_round_trip(s in 1usize..6, c in 1usize..6, name in "[a-z_]{0,10}", v in values(36)) {
        let m = LogitMatrix::with_index_ids(name.clone(), NdArray::new(&[s, c], v[..s * c].to_vec()).unwrap()).unwrap();
        let a = encode_logits(&m).unwrap();
        let (n, scores) = decode_logits(&a).unwrap();
        prop_assert_eq!(&n, &name);
        let back = LogitMatrix::with_index_ids(n, scores).unwrap();
        prop_assert_eq!(encode_logits(&back).unwrap(), a);
    }

    #[test]
    fn manifests_round_trip(rows in prop::collection::btree_map(id(), (prop::option::of(0usize..1000), prop::option::of("[a-z0-9]{1,6}")), 0..8)) {
        let m = Manifest::new(rows.into_iter().map(|(id, (l, s))| ManifestRow::new(id, l, s)).collect()).unwrap();
        let text = m.encode();
        let back = Manifest::decode(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.encode(), text);
    }

    #[test]
    fn checkpoints_round_trip(xs in prop::collection::vec(tensor(), 1..4), step in 0usize..100_000, lr in 0.001f64..1.0) {
        let mut params = ParamStore::new();
        let mut velocities = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            if i % 2 == 0 {
                params.add(format!("p{i}"), x.clone());
                velocities.push(Some(x.map(|v| v * 0.5)));
            } else {
                params.add_buffer(format!("b{i}"), x.clone());
                velocities.push(None);
            }
        }
        let mut config = RunConfig::default();
        config.train.lr = lr;
        let ck = Checkpoint {
            meta: ModelMeta { kind: ModelKind::Slgcn, classes: 7, stream: None, modalities: vec![] },
            config,
            step,
            params,
            velocities,
        };
        let a = ck.encode().unwrap();
        let back = Checkpoint::decode(&a).unwrap();
        prop_assert_eq!(back.config.train.lr, lr);
        prop_assert_eq!(back.encode().unwrap(), a);
    }
}

#[test]
fn unknown_versions_are_rejected() {
    let seq = KeypointSequence::new(1, 1, 3, vec![1.0, 2.0, 0.5], (10.0, 10.0)).unwrap();
    let mut a = encode_keypoints(&seq).unwrap();
    a[4..6].copy_from_slice(&2u16.to_le_bytes());
    match decode_keypoints(&a) {
        Err(SlrError::Format { offset, msg }) => {
            assert_eq!(offset, 4);
            assert!(msg.contains("version 2"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    let lm = LogitMatrix::with_index_ids("x", NdArray::zeros(&[1, 2])).unwrap();
    let mut b = encode_logits(&lm).unwrap();
    b[4] = 0;
    assert!(matches!(
        decode_logits(&b),
        Err(SlrError::Format { offset: 4, .. })
    ));
}

use proptest::prelude::*;
use tedepth::data::pnm::{self, BitDepth};
use tedepth::data::{load_dataset, pfm, save_dataset, DepthSample};
use tedepth::train::Checkpoint;
use tedepth::{ParameterSet, Tensor};

fn image(channels: usize) -> impl Strategy<Value = Tensor<f32>> {
    (1usize..7, 1usize..7).prop_flat_map(move |(h, w)| {
        prop::collection::vec(-1e6f32..1e6, channels * h * w)
            .prop_map(move |d| Tensor::new([channels, h, w], d).unwrap())
    })
}

fn quantized(channels: usize, bits: BitDepth) -> impl Strategy<Value = Tensor<f32>> {
    let max = bits.maxval();
    (1usize..7, 1usize..7).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0..=max, channels * h * w).prop_map(move |d| {
            let data = d.into_iter().map(|v| v as f32 / max as f32).collect();
            Tensor::new([channels, h, w], data).unwrap()
        })
    })
}

fn bits() -> impl Strategy<Value = BitDepth> {
    prop_oneof![Just(BitDepth::Eight), Just(BitDepth::Sixteen)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pfm_roundtrip_is_bit_exact(img in prop_oneof![image(1), image(3)]) {
        let bytes = pfm::encode(&img).unwrap();
        let back = pfm::decode(&bytes).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        prop_assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(pfm::encode(&back).unwrap(), bytes);
    }

    #[test]
    fn pnm_roundtrip_is_byte_identical(
        (img, bits) in bits().prop_flat_map(|b| (prop_oneof![quantized(1, b), quantized(3, b)], Just(b)))
    ) {
        let bytes = pnm::encode(&img, bits).unwrap();
        let (back, got) = pnm::decode(&bytes).unwrap();
        prop_assert_eq!(got, bits);
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(pnm::encode(&back, bits).unwrap(), bytes);
    }

    #[test]
    fn depth16_keeps_millimeters(mm in prop::collection::vec(0u16..=u16::MAX, 12)) {
        let depth = Tensor::new([1, 3, 4], mm.iter().map(|&v| (v as f64 / 1000.0) as f32).collect()).unwrap();
        let bytes = pnm::encode_depth16(&depth, pnm::DEFAULT_DEPTH_SCALE).unwrap();
        let back = pnm::decode_depth16(&bytes, pnm::DEFAULT_DEPTH_SCALE).unwrap();
        prop_assert_eq!(&back, &depth);
        prop_assert_eq!(pnm::encode_depth16(&back, pnm::DEFAULT_DEPTH_SCALE).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical(
        tensors in prop::collection::btree_map(
            "[a-z]{1,6}(\\.[a-z]{1,6})?",
            prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
                let n: usize = shape.iter().product();
                prop::collection::vec(any::<f32>(), n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
            }),
            0..5,
        ),
        metadata in prop::collection::btree_map("[a-z_]{1,8}", ".{0,12}", 0..5),
    ) {
        let mut params = ParameterSet::new();
        for (k, v) in tensors {
            params.insert(k, v).unwrap();
        }
        let ck = Checkpoint { tensors: params, metadata };
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(back.metadata, ck.metadata);
        for ((na, a), (nb, b)) in back.tensors.iter().zip(ck.tensors.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_checkpoints_never_decode(cut in 1usize..64) {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::new([2, 3], vec![1.5f32; 6]).unwrap()).unwrap();
        let ck = Checkpoint { tensors: params, metadata: [("k".to_string(), "v".to_string())].into() };
        let bytes = ck.encode().unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(Checkpoint::decode(&bytes[..bytes.len() - cut]).is_err());
    }
}

#[test]
fn pfm_golden_single_pixel() {
    let img = Tensor::new([1, 1, 1], vec![1.0f32]).unwrap();
    let mut want = b"Pf\n1 1\n-1.0\n".to_vec();
    want.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]);
    assert_eq!(pfm::encode(&img).unwrap(), want);
}

#[test]
fn dataset_directory_roundtrip() {
    let samples: Vec<DepthSample> = (0..3)
        .map(|i| {
            let rgb = Tensor::from_fn([3, 4, 5], |k| ((k * 37 + i * 11) % 65536) as f32 / 65535.0);
            let depth = Tensor::from_fn([1, 4, 5], |k| if k == 3 { 0.0 } else { 0.5 + (k + i) as f32 * 0.25 });
            DepthSample::new(format!("s{i}"), rgb, depth).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, samples);
}

use half::f16;
use harmonia_cli::bfp_file;
use harmonia_cli::tensor_file::{TensorData, TensorFile};
use harmonia_core::grouping::{group_tensor, BfpTensor, GroupAxis};
use harmonia_core::{BfpConfig, Tensor};
use proptest::prelude::*;

fn finite_f16() -> impl Strategy<Value = f16> {
    any::<u16>()
        .prop_map(f16::from_bits)
        .prop_filter("finite", |h| h.is_finite())
}

fn tensor_file() -> impl Strategy<Value = TensorFile> {
    prop::collection::vec(1u64..5, 1..4)
        .prop_flat_map(|dims| {
            let n = dims.iter().product::<u64>() as usize;
            let data = prop_oneof![
                prop::collection::vec(finite_f16(), n).prop_map(TensorData::F16),
                prop::collection::vec(any::<f32>(), n).prop_map(TensorData::F32),
                prop::collection::vec(any::<f64>(), n).prop_map(TensorData::F64),
            ];
            (Just(dims), data)
        })
        .prop_map(|(dims, data)| TensorFile::new(dims, data).unwrap())
}

fn same_bits(a: &TensorData, b: &TensorData) -> bool {
    match (a, b) {
        (TensorData::F16(x), TensorData::F16(y)) => x
            .iter()
            .map(|v| v.to_bits())
            .eq(y.iter().map(|v| v.to_bits())),
        (TensorData::F32(x), TensorData::F32(y)) => x
            .iter()
            .map(|v| v.to_bits())
            .eq(y.iter().map(|v| v.to_bits())),
        (TensorData::F64(x), TensorData::F64(y)) => x
            .iter()
            .map(|v| v.to_bits())
            .eq(y.iter().map(|v| v.to_bits())),
        _ => false,
    }
}

fn bfp_tensor() -> impl Strategy<Value = BfpTensor> {
    (
        1usize..40,
        prop::sample::select(vec![1usize, 2, 4, 8]),
        1u32..=10,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(rows, cols_per_group, m, per_channel, seed)| {
            let gs = 4;
            let cols = gs * cols_per_group;
            let mut s = seed | 1;
            let x = Tensor::from_fn(rows, cols, |_, _| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                let mag = ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
                mag * f64::from(1u32 << (s % 20)) / 64.0
            });
            let axis = if per_channel {
                GroupAxis::PerChannel
            } else {
                GroupAxis::PerToken
            };
            group_tensor(&x, axis, &BfpConfig::new(gs, m).unwrap()).unwrap()
        })
}

proptest! {
    #[test]
    fn tensor_file_round_trip(t in tensor_file()) {
        let back = TensorFile::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(&back.dims, &t.dims);
        prop_assert!(same_bits(&back.data, &t.data));
    }

    #[test]
    fn bfp_file_round_trip(t in bfp_tensor()) {
        let bytes = bfp_file::to_bytes(&t);
        prop_assert_eq!(bfp_file::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn mixed_precision_round_trip(t in bfp_tensor(), low in 1u32..=10) {
        // demote every other group, as the KV cache does
        let m = t.config().mantissa_bits;
        let low = low.min(m);
        let demote = |gs: &[harmonia_core::BfpGroup]| -> Vec<_> {
            gs.iter().enumerate().map(|(i, g)| if i % 2 == 0 && low < m { g.truncate_mantissas(low).unwrap() } else { g.clone() }).collect()
        };
        let (rows, cols) = t.shape();
        let mixed = BfpTensor::from_parts(t.axis(), rows, cols, *t.config(), demote(t.groups()), demote(t.residual())).unwrap();
        prop_assert_eq!(bfp_file::from_bytes(&bfp_file::to_bytes(&mixed)).unwrap(), mixed);
    }

    #[test]
    fn truncated_files_are_rejected(t in bfp_tensor(), cut in 1usize..8) {
        let bytes = bfp_file::to_bytes(&t);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(bfp_file::from_bytes(&bytes[..keep]).is_err());
    }
}

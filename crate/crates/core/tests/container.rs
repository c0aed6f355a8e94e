use facegraph::data::container::{decode, encode, AnyTensor};
use facegraph::Tensor;
use proptest::prelude::*;

fn entry() -> impl Strategy<Value = (String, AnyTensor)> {
    let shape = prop::collection::vec(0usize..4, 0..4);
    ("[a-z][a-z0-9._]{0,12}", shape, 0u8..3, any::<u64>()).prop_map(|(name, shape, kind, seed)| {
        let n: usize = shape.iter().product();
        let bits = |i: usize| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(i as u32 % 64) ^ i as u64;
        let t = match kind {
            0 => AnyTensor::F32(Tensor::from_vec(shape, (0..n).map(|i| f32::from_bits(bits(i) as u32)).collect()).unwrap()),
            1 => AnyTensor::F64(Tensor::from_vec(shape, (0..n).map(|i| f64::from_bits(bits(i))).collect()).unwrap()),
            _ => AnyTensor::U8(Tensor::from_vec(shape, (0..n).map(|i| bits(i) as u8).collect()).unwrap()),
        };
        (name, t)
    })
}

fn same_bits(a: &AnyTensor, b: &AnyTensor) -> bool {
    match (a, b) {
        (AnyTensor::F32(x), AnyTensor::F32(y)) => x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
        (AnyTensor::F64(x), AnyTensor::F64(y)) => x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
        (AnyTensor::U8(x), AnyTensor::U8(y)) => x == y,
        _ => false,
    }
}

proptest! {
    /// Any set of uniquely named tensors, NaN payloads included, survives encode/decode bit for bit.
    #[test]
    fn encode_decode_is_bit_exact(entries in prop::collection::vec(entry(), 0..6)) {
        let mut seen = std::collections::HashSet::new();
        let entries: Vec<_> = entries.into_iter().filter(|(n, _)| seen.insert(n.clone())).collect();
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            prop_assert_eq!(n1, n2);
            prop_assert!(same_bits(t1, t2));
        }
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_always_an_error(entries in prop::collection::vec(entry(), 1..4), cut in any::<prop::sample::Index>()) {
        let mut seen = std::collections::HashSet::new();
        let entries: Vec<_> = entries.into_iter().filter(|(n, _)| seen.insert(n.clone())).collect();
        let bytes = encode(&entries).unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..at]).is_err());
    }
}

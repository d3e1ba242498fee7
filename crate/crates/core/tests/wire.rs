use fedhenet_ckks::{keygen, Ciphertext, EncryptionContext, HeParams, Role};
use fedhenet_core::data::synth_blobs;
use fedhenet_core::rolann::{
    compute_statistics, solve_weights, ActivationKind, Factor, Factors, HyperParams, Moment, Solution, Statistics,
};
use fedhenet_core::wire::{
    decode_model, decode_update, decode_weights, encode_model, encode_update, encode_weights, Envelope, MsgType,
};
use fedhenet_core::CoreError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn plain_stats(activation: ActivationKind) -> Statistics {
    let ds = synth_blobs(3, 4, 10, 2.0, 1).unwrap();
    let hp = HyperParams { activation, ..Default::default() };
    compute_statistics::<ChaCha20Rng>(&ds, &hp, None).unwrap()
}

#[test]
fn update_roundtrip_is_bit_exact() {
    for activation in [ActivationKind::Identity, ActivationKind::Logistic] {
        let s = plain_stats(activation);
        let bytes = encode_update(&s);
        let back = decode_update(&bytes, None).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_update(&back), bytes);
    }
}

#[test]
fn encrypted_update_and_model_roundtrip() {
    let ds = synth_blobs(3, 4, 10, 2.0, 1).unwrap();
    let hp = HyperParams::default();
    let params = HeParams::for_dimension(5);
    let keys = keygen(&params, &params.default_rotation_steps(5), 1).unwrap();
    let ctx = EncryptionContext::from_keys(&keys, Role::KeyHolder).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(0);

    let s = compute_statistics(&ds, &hp, Some((&ctx, &mut rng))).unwrap();
    let bytes = encode_update(&s);
    assert_eq!(decode_update(&bytes, Some(ctx.params())).unwrap(), s);
    let other = HeParams::with_ring_degree(2 * params.ring_degree);
    assert!(matches!(decode_update(&bytes, Some(&other)), Err(CoreError::He(_))));

    let solution = solve_weights(&s, &hp, Some(&ctx)).unwrap();
    let model_bytes = encode_model(&solution);
    assert_eq!(decode_model(&model_bytes, Some(ctx.params())).unwrap(), solution);

    let mock = EncryptionContext::mock(params.clone(), &[1, 2, 4], Role::KeyHolder).unwrap();
    let ms = compute_statistics(&ds, &hp, Some((&mock, &mut rng))).unwrap();
    assert!(matches!(ms.moments[0], Moment::Encrypted(Ciphertext::Mock(_))));
    assert_eq!(decode_update(&encode_update(&ms), None).unwrap(), ms);
}

#[test]
fn plain_model_roundtrip() {
    let s = plain_stats(ActivationKind::Logistic);
    let solution = solve_weights(&s, &HyperParams::default(), None).unwrap();
    let bytes = encode_model(&solution);
    assert_eq!(bytes.len(), 11 + 5 * 3 * 8);
    assert_eq!(decode_model(&bytes, None).unwrap(), solution);
    let Solution::Plain(m) = solution else { unreachable!() };
    let raw = encode_weights(&m.w);
    assert_eq!(decode_weights(&raw, 5, 3).unwrap(), m.w);
    assert!(decode_weights(&raw, 5, 2).is_err());
}

/// Per-class plaintext update with `d = 513`, `C = 10`, `r = 64`.
#[test]
fn per_class_update_size_follows_format_arithmetic() {
    let (d, c, r) = (513usize, 10usize, 64usize);
    let factor = Factor { u: DMatrix::from_fn(d, r, |i, j| (i + j) as f64), s: DVector::from_element(r, 1.0) };
    let s = Statistics {
        dim: d,
        sample_count: 1000,
        factors: Factors::PerClass(vec![factor; c]),
        moments: vec![Moment::Plain(DVector::from_element(d, 0.5)); c],
    };
    let payload = encode_update(&s);
    let per_class = 4 + 4 + d * r * 8 + r * 8 + d * 8;
    let update_header = 1 + 1 + 4 + 8;
    assert_eq!(payload.len(), update_header + c * per_class);
    let envelope = Envelope::new(MsgType::Update, 0, 3, payload).encode();
    assert_eq!(envelope.len(), update_header + c * per_class + 27);
}

#[test]
fn shared_update_size() {
    let s = plain_stats(ActivationKind::Identity);
    let f = s.factor(0);
    let (d, r) = (f.u.nrows(), f.rank());
    assert_eq!(encode_update(&s).len(), 14 + 8 + d * r * 8 + r * 8 + 3 * d * 8);
}

#[test]
fn envelope_roundtrip() {
    let env = Envelope::new(MsgType::Abort, 42, 9, b"timeout".to_vec());
    let bytes = env.encode();
    assert_eq!(&bytes[..4], b"FHNM");
    assert_eq!(bytes[6], 3);
    assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 42);
    assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 9);
    assert_eq!(u64::from_le_bytes(bytes[15..23].try_into().unwrap()), 7);
    assert_eq!(Envelope::decode(&bytes).unwrap(), env);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn truncation_is_an_error_not_a_panic(cut in 0usize..1000, logistic in any::<bool>()) {
        let activation = if logistic { ActivationKind::Logistic } else { ActivationKind::Identity };
        let bytes = encode_update(&plain_stats(activation));
        let cut = cut % bytes.len();
        prop_assert!(matches!(decode_update(&bytes[..cut], None), Err(CoreError::Format(_))));
        let env = Envelope::new(MsgType::Update, 1, 1, bytes).encode();
        prop_assert!(Envelope::decode(&env[..cut % env.len()]).is_err());
    }

    #[test]
    fn any_bit_flip_in_payload_is_caught(pos in 0usize..200, bit in 0u8..8) {
        let mut env = Envelope::new(MsgType::Model, 1, 0, (0..200u8).collect()).encode();
        env[23 + pos] ^= 1 << bit;
        prop_assert!(Envelope::decode(&env).is_err());
    }

    #[test]
    fn random_garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_update(&bytes, None);
        let _ = decode_model(&bytes, None);
        let _ = Envelope::decode(&bytes);
    }
}

use litdec_core::encoder::{CompressionSpec, EncodedImage, ToyEncoder};
use litdec_core::model::{Decoder, DecoderConfig, BOS};
use litdec_core::synth::{render, sample_image};
use litdec_core::tensor::gradcheck::{finite_difference_gradient, relative_error};
use litdec_core::tensor::{kernels, GradTape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(compression: CompressionSpec, tables: usize) -> DecoderConfig {
    DecoderConfig {
        depth: 2,
        model_dim: 16,
        heads: 2,
        mlp_dim: 32,
        vocab_size: 12,
        max_len: 10,
        dropout: 0.0,
        encoder_dim: 16,
        position_tables: tables,
        compression,
        ..DecoderConfig::default()
    }
}

fn image(n: usize, d: usize, seed: u64) -> EncodedImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EncodedImage::new(
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap(),
    )
    .unwrap()
}

fn compression() -> impl Strategy<Value = CompressionSpec> {
    prop_oneof![
        Just(CompressionSpec::None),
        Just(CompressionSpec::MapPool),
        Just(CompressionSpec::Bottleneck { factor: 4 }),
    ]
}

fn sequence() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..12, 2..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn earlier_logits_ignore_later_tokens(seed in 0u64..1000, ids in sequence(), cut in 1usize..9, comp in compression()) {
        let cut = cut.min(ids.len() - 1);
        let dec = Decoder::new(config(comp, 1), seed).unwrap();
        let img = image(5, 16, seed + 1).cast::<f32>();
        let (a, _) = dec.forward_teacher_forced(&img, &ids, 1, 0).unwrap();
        let mut other = ids.clone();
        for t in other.iter_mut().skip(cut) {
            *t = (*t + 5) % 12;
        }
        let (b, _) = dec.forward_teacher_forced(&img, &other, 1, 0).unwrap();
        for t in 0..cut {
            prop_assert_eq!(a.row(t), b.row(t));
        }
    }

    #[test]
    fn tape_path_matches_incremental(seed in 0u64..1000, ids in sequence(), comp in compression(), table in 0usize..3) {
        let dec = Decoder::new(config(comp, 3), seed).unwrap().cast::<f64>();
        let img = image(5, 16, seed + 2);
        let mut tape = GradTape::<f64>::new();
        let vars = dec.register(&mut tape, false);
        let x = tape.constant(img.tokens().clone());
        let memory = dec.memory_on_tape(&mut tape, &vars, x).unwrap();
        let logits = dec.logits_on_tape(&mut tape, &vars, memory, &ids, table, None).unwrap();
        let logits = tape.value(logits).clone();
        let mut state = dec.begin(&img, table).unwrap();
        for (t, &tok) in ids.iter().enumerate() {
            let row = dec.next_token_logits(&mut state, tok).unwrap();
            for (x, y) in row.iter().zip(logits.row(t)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sequence_log_prob_factorizes(seed in 0u64..1000, target in prop::collection::vec(0u32..12, 1..6)) {
        let dec = Decoder::new(config(CompressionSpec::None, 1), seed).unwrap().cast::<f64>();
        let img = image(4, 16, seed);
        let prefix = [BOS, 7];
        let total = dec.sequence_log_prob(&img, &prefix, &target, 0).unwrap();
        let mut ids = prefix.to_vec();
        ids.extend(&target);
        let (logits, _) = dec.forward_teacher_forced(&img, &ids, prefix.len(), 0).unwrap();
        let manual: f64 = (prefix.len()..ids.len())
            .map(|t| kernels::log_softmax(logits.row(t - 1))[ids[t] as usize])
            .sum();
        prop_assert!((total - manual).abs() < 1e-9);
        prop_assert!(total <= 0.0);
    }
}

#[test]
fn stored_form_sizes_follow_compression() {
    let img = image(8, 16, 3).cast::<f32>();
    for (comp, tokens, dim) in [
        (CompressionSpec::None, 8, 16),
        (CompressionSpec::MapPool, 1, 16),
        (CompressionSpec::Bottleneck { factor: 4 }, 8, 4),
    ] {
        let dec = Decoder::new(config(comp, 1), 1).unwrap();
        let stored = dec.stored_form(&img).unwrap();
        assert_eq!(
            (stored.num_tokens(), stored.dim()),
            (tokens, dim),
            "{comp:?}"
        );
        let via_store = dec
            .begin_with_memory(&dec.memory_from_stored(&stored).unwrap(), 0)
            .unwrap();
        let direct = dec.begin(&img, 0).unwrap();
        let (mut a, mut b) = (via_store, direct);
        let la = dec.next_token_logits(&mut a, BOS).unwrap();
        let lb = dec.next_token_logits(&mut b, BOS).unwrap();
        for (x, y) in la.iter().zip(&lb) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn position_tables_start_equal_and_diverge_by_table() {
    let dec = Decoder::new(config(CompressionSpec::None, 3), 4).unwrap();
    let img = image(4, 16, 4).cast::<f32>();
    let ids = [BOS, 5, 6];
    let (a, _) = dec.forward_teacher_forced(&img, &ids, 1, 0).unwrap();
    let (b, _) = dec.forward_teacher_forced(&img, &ids, 1, 2).unwrap();
    assert_eq!(a, b);
    let mut changed = dec.clone();
    let id = changed
        .params()
        .id("pos_embed.2")
        .expect("per-table parameter");
    changed.params_mut().get_mut(id).data_mut()[0] += 1.0;
    let (c, _) = changed.forward_teacher_forced(&img, &ids, 1, 2).unwrap();
    let (d, _) = changed.forward_teacher_forced(&img, &ids, 1, 0).unwrap();
    assert_ne!(c, b);
    assert_eq!(d, a);
}

#[test]
fn checkpoint_roundtrip_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let dec = Decoder::new(config(CompressionSpec::Bottleneck { factor: 2 }, 2), 9).unwrap();
    let path = dir.path().join("d.litd");
    dec.save(&path).unwrap();
    let back = Decoder::<f32>::load(&path).unwrap();
    let img = image(4, 16, 9).cast::<f32>();
    let ids = [BOS, 3, 4, 8];
    assert_eq!(
        dec.forward_teacher_forced(&img, &ids, 1, 1).unwrap(),
        back.forward_teacher_forced(&img, &ids, 1, 1).unwrap()
    );
}

fn encoder_loss(
    enc: &ToyEncoder<f64>,
    dec: &Decoder<f64>,
    patches: &Tensor<f64>,
    trainable: bool,
) -> (f64, Vec<Vec<f64>>) {
    let ids = [BOS, 5, 9, 1];
    let mut tape = GradTape::<f64>::new();
    let evars = enc.register(&mut tape, trainable);
    let dvars = dec.register(&mut tape, true);
    let tokens = enc.encode_on_tape(&mut tape, &evars, patches).unwrap();
    let memory = dec.memory_on_tape(&mut tape, &dvars, tokens).unwrap();
    let logits = dec
        .logits_on_tape(&mut tape, &dvars, memory, &ids[..3], 0, None)
        .unwrap();
    let loss = tape
        .smoothed_cross_entropy(logits, &[5, 9, 1], &[true, true, true], 0.0)
        .unwrap();
    let value = tape.value(loss).data()[0];
    let mut g = tape.backward(loss).unwrap();
    let grads = evars.vars.iter().map(|&v| g.take(v)).collect();
    (value, grads)
}

fn encoder_setup() -> (ToyEncoder<f64>, Decoder<f64>, Tensor<f64>) {
    let enc = ToyEncoder::<f32>::new(16, 2, 5).unwrap().cast::<f64>();
    let dec = Decoder::new(config(CompressionSpec::None, 1), 6)
        .unwrap()
        .cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let patches = render(&sample_image(&mut rng, 2..=4)).cast::<f64>();
    (enc, dec, patches)
}

#[test]
fn frozen_encoder_receives_no_gradient() {
    let (enc, dec, patches) = encoder_setup();
    let (_, grads) = encoder_loss(&enc, &dec, &patches, false);
    assert!(grads.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn trainable_encoder_gradient_matches_finite_differences() {
    let (enc, dec, patches) = encoder_setup();
    let (_, grads) = encoder_loss(&enc, &dec, &patches, true);
    for i in 0..enc.params().len() {
        let base = enc.params().tensors()[i].data().to_vec();
        let mut probe = enc.clone();
        let numeric = finite_difference_gradient(
            |theta| {
                probe.params_mut().tensors_mut()[i]
                    .data_mut()
                    .copy_from_slice(theta);
                encoder_loss(&probe, &dec, &patches, true).0
            },
            &base,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&grads[i], &numeric);
        assert!(err < 1e-5, "encoder group {i}: {err}");
    }
}

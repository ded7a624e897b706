use litdec_core::decoding::{
    beam_search, brute_force_oracle, decode, greedy, score_classes, temperature_sample,
    top_k_sample, DecodeParams, LanguageModel, RandomLm, Strategy as DecodeStrategy,
};
use litdec_core::model::{BOS, EOS};
use proptest::prelude::*;

fn lm(vocab: usize, max_len: usize, seed: u64) -> RandomLm {
    RandomLm {
        vocab,
        max_len,
        seed,
        spread: 2.5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn narrow_beam_is_greedy(seed in 0u64..10_000, vocab in 3usize..7, len in 1usize..6) {
        let m = lm(vocab, len, seed);
        let limit = m.capacity(1);
        let beam = beam_search(&m, &[BOS], 1, 0.0, 0.0, limit, 0).unwrap();
        prop_assert_eq!(beam.best.tokens, greedy(&m, &[BOS], limit).unwrap());
    }

    #[test]
    fn full_beam_is_exhaustive(seed in 0u64..10_000, vocab in 3usize..6, len in 1usize..5, alpha in 0.0f64..1.5) {
        let m = lm(vocab, len, seed);
        let limit = m.capacity(1);
        let exact = brute_force_oracle(&m, &[BOS], limit, alpha).unwrap();
        let beam = beam_search(&m, &[BOS], vocab.pow(limit as u32), 0.0, alpha, limit, 0).unwrap();
        prop_assert_eq!(&beam.best.tokens, &exact.tokens);
        prop_assert!((beam.best.score - exact.score).abs() < 1e-9);
    }

    #[test]
    fn finished_beam_result_is_bounded_by_exhaustive_search(seed in 0u64..10_000, k in 1usize..8) {
        let m = lm(4, 4, seed);
        let exact = brute_force_oracle(&m, &[BOS], 4, 0.6).unwrap();
        let beam = beam_search(&m, &[BOS], k, 0.0, 0.6, 4, 0).unwrap();
        if beam.best.finished {
            prop_assert!(beam.best.score <= exact.score + 1e-12);
        }
        for w in beam.finals.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic(seed in 0u64..10_000, s in 0u64..100) {
        let m = lm(6, 5, seed);
        prop_assert_eq!(
            temperature_sample(&m, &[BOS], 0.8, 5, s).unwrap(),
            temperature_sample(&m, &[BOS], 0.8, 5, s).unwrap()
        );
        prop_assert_eq!(
            top_k_sample(&m, &[BOS], 3, 1.0, 5, s).unwrap(),
            top_k_sample(&m, &[BOS], 3, 1.0, 5, s).unwrap()
        );
    }

    #[test]
    fn top_one_is_greedy(seed in 0u64..10_000, s in 0u64..100) {
        let m = lm(6, 5, seed);
        prop_assert_eq!(top_k_sample(&m, &[BOS], 1, 1.0, 5, s).unwrap(), greedy(&m, &[BOS], 5).unwrap());
    }

    #[test]
    fn outputs_never_contain_eos(seed in 0u64..10_000, s in 0u64..100) {
        let m = lm(5, 6, seed);
        for out in [
            greedy(&m, &[BOS], 6).unwrap(),
            temperature_sample(&m, &[BOS], 1.3, 6, s).unwrap(),
            beam_search(&m, &[BOS], 3, 0.5, 0.6, 6, s).unwrap().best.tokens,
        ] {
            prop_assert!(!out.contains(&EOS));
            prop_assert!(out.len() <= 6);
        }
    }
}

#[test]
fn top_k_draws_stay_inside_the_top_set() {
    let m = lm(8, 1, 3);
    let (_, logits) = m.start(&[BOS]).unwrap();
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    let allowed = &order[..3];
    for s in 0..500 {
        let out = top_k_sample(&m, &[BOS], 3, 1.0, 1, s).unwrap();
        let tok = out.first().copied().unwrap_or(EOS) as usize;
        assert!(allowed.contains(&tok));
    }
}

#[test]
fn score_classes_picks_the_most_likely_candidate() {
    let m = lm(6, 4, 11);
    let candidates = vec![vec![2, EOS], vec![3, 4, EOS], vec![5, EOS]];
    let (best, scores) = score_classes(&m, &[BOS], &candidates).unwrap();
    for (c, s) in candidates.iter().zip(&scores) {
        assert!((m.score(&[BOS], c).unwrap() - s).abs() < 1e-12);
    }
    assert!(scores.iter().all(|&s| s <= scores[best]));
}

#[test]
fn decode_dispatches_by_strategy() {
    let m = lm(6, 5, 2);
    for strategy in DecodeStrategy::ALL {
        let params = DecodeParams {
            strategy,
            ..DecodeParams::default()
        };
        let out = decode(&m, &[BOS], &params, &[vec![2, EOS], vec![3, EOS]]).unwrap();
        assert!(out.len() <= 5);
    }
    let g = DecodeParams {
        strategy: DecodeStrategy::Greedy,
        ..DecodeParams::default()
    };
    assert_eq!(
        decode(&m, &[BOS], &g, &[]).unwrap(),
        greedy(&m, &[BOS], 5).unwrap()
    );
}

#[test]
fn invalid_parameters_are_rejected() {
    let m = lm(4, 3, 0);
    assert!(top_k_sample(&m, &[BOS], 0, 1.0, 3, 0).is_err());
    assert!(top_k_sample(&m, &[BOS], 5, 1.0, 3, 0).is_err());
    assert!(temperature_sample(&m, &[BOS], -1.0, 3, 0).is_err());
    assert!(brute_force_oracle(&lm(40, 9, 0), &[BOS], 9, 0.0).is_err());
}

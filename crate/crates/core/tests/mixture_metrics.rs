use std::collections::HashMap;

use litdec_core::metrics::{accuracy, cider, cider_reported, exact_match};
use litdec_core::mixture::{
    epoch_length, reference_mixture, sampling_weights, Composition, MixtureSpec, MixtureTask,
    Sampler, Strategy as Mix,
};
use proptest::prelude::*;

fn tasks() -> impl Strategy<Value = Vec<MixtureTask>> {
    prop::collection::vec((1usize..5000, 1.0f64..6.0, 0usize..3), 1..7).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (size, pairs, group))| MixtureTask {
                name: format!("t{i}"),
                size,
                pairs_per_image: pairs,
                group: (group > 0).then(|| format!("g{group}")),
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_form_a_distribution(ts in tasks()) {
        for s in Mix::ALL {
            let w = sampling_weights(&MixtureSpec::new(s, ts.clone(), 8, 0)).unwrap();
            prop_assert_eq!(w.len(), ts.len());
            prop_assert!(w.iter().all(|&x| x > 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_images_weights_follow_size(ts in tasks()) {
        let w = sampling_weights(&MixtureSpec::new(Mix::ConcatImages, ts.clone(), 8, 0)).unwrap();
        let total: usize = ts.iter().map(|t| t.size).sum();
        for (x, t) in w.iter().zip(&ts) {
            prop_assert!((x - t.size as f64 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pairs_rescale_by_pairs_per_image(ts in tasks()) {
        let ci = sampling_weights(&MixtureSpec::new(Mix::ConcatImages, ts.clone(), 8, 0)).unwrap();
        let cp = sampling_weights(&MixtureSpec::new(Mix::ConcatPairs, ts.clone(), 8, 0)).unwrap();
        for i in 1..ts.len() {
            let ratio = (cp[i] / cp[0]) / (ci[i] / ci[0]);
            prop_assert!((ratio - ts[i].pairs_per_image / ts[0].pairs_per_image).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_epoch_matches_concat_images(ts in tasks(), batch in 1usize..64) {
        let e = epoch_length(&MixtureSpec::new(Mix::Equal, ts.clone(), batch, 0)).unwrap();
        let c = epoch_length(&MixtureSpec::new(Mix::ConcatImages, ts.clone(), batch, 0)).unwrap();
        prop_assert_eq!(e, c);
    }

    #[test]
    fn sampler_is_deterministic_and_in_range(ts in tasks(), seed in 0u64..1000, homogeneous in any::<bool>()) {
        let mut spec = MixtureSpec::new(Mix::ConcatPairs, ts.clone(), 6, seed);
        if homogeneous {
            spec.composition = Composition::Homogeneous;
        }
        let mut a = Sampler::new(spec.clone()).unwrap();
        let mut b = Sampler::new(spec).unwrap();
        for _ in 0..20 {
            let batch = a.next_batch();
            prop_assert_eq!(&batch, &b.next_batch());
            for &(t, i) in &batch {
                prop_assert!(i < ts[t].size);
            }
            if homogeneous {
                prop_assert!(batch.iter().all(|&(t, _)| t == batch[0].0));
            }
        }
    }

    #[test]
    fn one_pass_visits_every_example_once(size in 1usize..200, seed in 0u64..100) {
        let mut s = Sampler::new(MixtureSpec::new(Mix::Equal, vec![MixtureTask::new("a", size)], 1, seed)).unwrap();
        let mut seen: Vec<usize> = (0..size).map(|_| s.next_example(0)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..size).collect::<Vec<_>>());
    }
}

#[test]
fn unique_images_split_shared_groups() {
    let tasks = reference_mixture();
    let w = sampling_weights(&MixtureSpec::new(
        Mix::ConcatUniqueImages,
        tasks.clone(),
        8,
        0,
    ))
    .unwrap();
    let group: Vec<usize> = (0..tasks.len())
        .filter(|&i| tasks[i].group.is_some())
        .collect();
    assert!(group.len() >= 2);
    for &i in &group[1..] {
        assert!((w[i] - w[group[0]]).abs() < 1e-15);
    }
}

#[test]
fn invalid_mixtures_are_rejected() {
    assert!(sampling_weights(&MixtureSpec::new(Mix::Equal, vec![], 8, 0)).is_err());
    assert!(sampling_weights(&MixtureSpec::new(
        Mix::Equal,
        vec![MixtureTask::new("a", 0)],
        8,
        0
    ))
    .is_err());
    assert!(epoch_length(&MixtureSpec::new(
        Mix::Equal,
        vec![MixtureTask::new("a", 3)],
        0,
        0
    ))
    .is_err());
}

/// Straightforward CIDEr over explicit n-gram tables.
fn oracle_cider(cands: &[String], refs: &[Vec<String>]) -> f64 {
    let grams = |s: &str, n: usize| -> HashMap<String, f64> {
        let w: Vec<&str> = s.split_whitespace().collect();
        let mut m = HashMap::new();
        if w.len() >= n {
            for i in 0..=w.len() - n {
                *m.entry(w[i..i + n].join(" ")).or_insert(0.0) += 1.0;
            }
        }
        m
    };
    let images = cands.len() as f64;
    let mut score = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<String, f64> = HashMap::new();
        for rs in refs {
            let mut keys: Vec<String> = rs.iter().flat_map(|r| grams(r, n).into_keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                *df.entry(k).or_insert(0.0) += 1.0;
            }
        }
        let vec = |s: &str| -> HashMap<String, f64> {
            let g = grams(s, n);
            let total: f64 = g.values().sum();
            g.into_iter()
                .map(|(k, c)| {
                    let d = df.get(&k).copied().unwrap_or(1.0);
                    (k, c / total * (images.ln() - d.ln()))
                })
                .collect()
        };
        let cos = |a: &HashMap<String, f64>, b: &HashMap<String, f64>| {
            let dot: f64 = a
                .iter()
                .map(|(k, x)| x * b.get(k).copied().unwrap_or(0.0))
                .sum();
            let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
            if na * nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        };
        let mut per_n = 0.0;
        for (c, rs) in cands.iter().zip(refs) {
            let cv = vec(c);
            per_n += rs.iter().map(|r| cos(&cv, &vec(r))).sum::<f64>() / rs.len() as f64;
        }
        score += per_n / images;
    }
    score * 10.0 / 4.0
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "red", "blue", "at", "top"]),
        1..8,
    )
    .prop_map(|w| w.join(" "))
}

fn corpus() -> impl Strategy<Value = (Vec<String>, Vec<Vec<String>>)> {
    prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..4)), 1..6)
        .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cider_matches_oracle((cands, refs) in corpus()) {
        let a = cider(&cands, &refs).unwrap();
        prop_assert!((a - oracle_cider(&cands, &refs)).abs() < 1e-9);
        prop_assert!((cider_reported(&cands, &refs).unwrap() - 10.0 * a).abs() < 1e-9);
    }

    #[test]
    fn cider_is_invariant_to_image_order((cands, refs) in corpus()) {
        let a = cider(&cands, &refs).unwrap();
        let rc: Vec<String> = cands.iter().rev().cloned().collect();
        let rr: Vec<Vec<String>> = refs.iter().rev().cloned().collect();
        prop_assert!((a - cider(&rc, &rr).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn accuracy_is_mean_exact_match(pairs in prop::collection::vec((sentence(), sentence()), 1..20)) {
        let (p, t): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let manual = p.iter().zip(&t).map(|(a, b)| exact_match(a, b)).sum::<f64>() / p.len() as f64;
        prop_assert!((accuracy(&p, &t).unwrap() - manual).abs() < 1e-15);
    }
}

#[test]
fn cider_edge_cases() {
    let refs = vec![
        vec!["red arc at top".to_string()],
        vec!["blue zig".to_string()],
    ];
    let perfect = cider(&["red arc at top", "blue zig"], &refs).unwrap();
    assert!(perfect > 0.0);
    assert_eq!(cider(&["", ""], &refs).unwrap(), 0.0);
    assert!(cider::<&str, String>(&[], &[]).is_err());
    assert!(cider(&["a"], &refs).is_err());
    assert!(accuracy(&["a"], &["a", "b"]).is_err());
}

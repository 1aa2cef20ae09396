use std::fs;

use mitp::datasets::{export_jsonl, generate_synthetic, load_jsonl, subsample, Dataset, SyntheticSpec};
use proptest::prelude::*;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        n_train: 400,
        n_val: 40,
        n_test: 400,
        n_patches: 4,
        raw_dim: 8,
        n_text_tokens: 6,
        vocab_size: 32,
        ..SyntheticSpec::default()
    }
}

#[derive(Clone, Copy)]
enum View {
    Image,
    Text,
    Both,
}

fn features(d: &Dataset, view: View, vocab: usize) -> Vec<Vec<f64>> {
    d.examples
        .iter()
        .map(|ex| {
            let mut f = vec![1.0];
            if matches!(view, View::Image | View::Both) {
                f.extend_from_slice(ex.patches.data());
            }
            if matches!(view, View::Text | View::Both) {
                let mut bag = vec![0.0; vocab];
                for &t in &ex.tokens {
                    bag[t] += 1.0;
                }
                f.extend(bag);
            }
            f
        })
        .collect()
}

/// Full-batch softmax regression; returns test accuracy.
fn linear_probe(train: &Dataset, test: &Dataset, view: View, k: usize, vocab: usize) -> f64 {
    let (xs, ys) = (features(train, view, vocab), train.examples.iter().map(|e| e.labels[0]).collect::<Vec<_>>());
    let dim = xs[0].len();
    let mut w = vec![vec![0.0; dim]; k];
    for _ in 0..400 {
        let mut grad = vec![vec![0.0; dim]; k];
        for (x, &y) in xs.iter().zip(&ys) {
            let s: Vec<f64> = w.iter().map(|wc| wc.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let d = e[c] / z - if c == y { 1.0 } else { 0.0 };
                for (g, xi) in grad[c].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= 0.05 * g / xs.len() as f64;
            }
        }
    }
    let xt = features(test, view, vocab);
    let hits = xt
        .iter()
        .zip(&test.examples)
        .filter(|(x, ex)| {
            let s: Vec<f64> = w.iter().map(|wc| wc.iter().zip(x.iter()).map(|(a, b)| a * b).sum()).collect();
            let best = (0..k).fold(0, |b, c| if s[c] > s[b] { c } else { b });
            best == ex.labels[0]
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn fusion_is_needed_for_perfect_accuracy() {
    let s = SyntheticSpec { noise_level: 0.0, modality_split: 0.5, ..spec() };
    let d = generate_synthetic(&s, 3).unwrap();
    let acc = |v| linear_probe(&d.train, &d.test, v, 4, 32);
    let (both, image, text) = (acc(View::Both), acc(View::Image), acc(View::Text));
    assert_eq!(both, 1.0);
    assert!(image < 1.0 && text < 1.0, "image {image} text {text}");
}

#[test]
fn text_is_uninformative_when_the_image_carries_everything() {
    let s = SyntheticSpec { modality_split: 1.0, n_test: 2000, ..spec() };
    let d = generate_synthetic(&s, 4).unwrap();
    let text = linear_probe(&d.train, &d.test, View::Text, 4, 32);
    assert!((text - 0.25).abs() <= 0.05, "{text}");
}

#[test]
fn deterministic_and_balanced() {
    let s = SyntheticSpec { n_train: 100 * 4, ..spec() };
    let (a, b) = (generate_synthetic(&s, 9).unwrap(), generate_synthetic(&s, 9).unwrap());
    assert!(a.train.bit_eq(&b.train) && a.val.bit_eq(&b.val) && a.test.bit_eq(&b.test));
    let hist = a.train.class_histogram(4);
    for h in hist {
        assert!((h as f64 / 100.0 - 1.0).abs() < 0.05);
    }
    assert!(generate_synthetic(&SyntheticSpec { n_val: 3, ..s }, 1).is_err());
}

#[test]
fn jsonl_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_synthetic(&spec(), 5).unwrap();
    let path = dir.path().join("train.jsonl");
    export_jsonl(&d.train, &path).unwrap();
    assert!(load_jsonl(&path).unwrap().bit_eq(&d.train));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert!(load_jsonl(&empty).is_err());

    // The third line loses its labels.
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().take(3).map(str::to_string).collect();
    let cut = lines[2].find(",\"labels\"").unwrap();
    lines[2] = format!("{}}}", &lines[2][..cut]);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n")).unwrap();
    let err = load_jsonl(&bad).unwrap_err().to_string();
    assert!(err.contains("bad.jsonl:3:") && err.contains("labels"), "{err}");
}

#[test]
fn subsample_contracts() {
    let s = SyntheticSpec { n_train: 1000, ..spec() };
    let d = generate_synthetic(&s, 6).unwrap().train;
    let a = subsample(&d, 0.1, 1).unwrap();
    let b = subsample(&d, 0.1, 2).unwrap();
    assert_eq!(a.len(), 100);
    assert!(!a.bit_eq(&b));
    assert!(subsample(&d, 1.0, 3).unwrap().bit_eq(&d));
    assert!(subsample(&d, 0.0001, 3).is_err());
    assert!(subsample(&d, 0.0, 3).is_err());
    assert!(subsample(&d, 1.5, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn generated_values_are_valid(seed in any::<u64>(), k in 2usize..6, split in 0.0f64..=1.0, multi in prop::bool::ANY) {
        let s = SyntheticSpec {
            num_classes: k,
            n_train: 20,
            n_val: 10,
            n_test: 10,
            modality_split: split,
            multi_label: multi,
            ..spec()
        };
        let d = generate_synthetic(&s, seed).unwrap();
        for split in [&d.train, &d.val, &d.test] {
            split.validate(&s.shape()).unwrap();
            for ex in &split.examples {
                prop_assert!(ex.patches.is_finite());
                prop_assert!(ex.tokens.iter().all(|&t| t < s.vocab_size));
                prop_assert!(!ex.labels.is_empty() && ex.labels.iter().all(|&c| c < k));
            }
        }
    }
}

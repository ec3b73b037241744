use std::collections::HashSet;

use klab::experiments::sparsity::{
    encode_batch, generate_sparsity_dataset, label_histogram, sample_example, SparsitySpec,
    SyntheticExample,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Prefix bound and label identity, checked independently of the library.
fn check(e: &SyntheticExample) {
    let mut prefix = 0i32;
    for (&v, &a) in e.v.iter().zip(&e.a) {
        assert!(v == 1 || v == -1);
        assert!(a <= 1);
        prefix += i32::from(v) * i32::from(a);
        assert!(prefix.abs() <= 4, "prefix {prefix}");
    }
    assert_eq!(prefix, e.label);
    assert!((-4..=4).contains(&e.label));
}

#[test]
fn ten_thousand_examples_satisfy_the_invariants() {
    for p in [0.1, 0.5, 0.9, 1.0] {
        let d = generate_sparsity_dataset(&SparsitySpec {
            p,
            n: 10_000,
            ..SparsitySpec::default()
        })
        .unwrap();
        assert_eq!(d.len(), 10_000);
        d.train.iter().chain(&d.valid).for_each(check);
    }
}

#[test]
fn relevance_rate_matches_p() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in [0.2, 0.5, 0.8] {
        let mut ones = 0usize;
        let mut total = 0usize;
        while total < 100_000 {
            let e = sample_example(p, 50, &mut rng);
            ones += e.a.iter().filter(|&&a| a == 1).count();
            total += e.len();
        }
        let rate = ones as f64 / total as f64;
        assert!((rate - p).abs() < 0.01, "p={p}: {rate}");
    }
}

#[test]
fn nothing_relevant_means_label_zero() {
    let d = generate_sparsity_dataset(&SparsitySpec {
        p: 0.0,
        n: 500,
        ..SparsitySpec::default()
    })
    .unwrap();
    assert!(d.train.iter().chain(&d.valid).all(|e| e.label == 0));
}

#[test]
fn hand_example_under_the_bound() {
    let e = SyntheticExample::new(vec![1, 1, -1, 1], vec![1; 4]).unwrap();
    assert_eq!(e.label, 2);
    assert!(SyntheticExample::new(vec![1; 5], vec![1; 5]).is_err());
}

#[test]
fn split_is_disjoint_and_covers_the_dataset() {
    let spec = SparsitySpec {
        n: 5_000,
        ..SparsitySpec::default()
    };
    let d = generate_sparsity_dataset(&spec).unwrap();
    assert_eq!(d.train.len(), 4_000);
    assert_eq!(d.valid.len(), 1_000);
    let train: HashSet<&SyntheticExample> = d.train.iter().collect();
    assert!(d.valid.iter().all(|e| !train.contains(e)));
}

#[test]
fn balancing_flattens_the_histogram() {
    let base = SparsitySpec {
        n: 9_000,
        ..SparsitySpec::default()
    };
    let spread = |balance: bool| {
        let d = generate_sparsity_dataset(&SparsitySpec {
            balance,
            ..base.clone()
        })
        .unwrap();
        let mut h = label_histogram(&d.train);
        for (c, n) in label_histogram(&d.valid).iter().enumerate() {
            h[c] += n;
        }
        let max = *h.iter().max().unwrap() as f64;
        let min = *h.iter().min().unwrap() as f64;
        max / min.max(1.0)
    };
    assert!(spread(true) < spread(false));
}

#[test]
fn generation_is_seeded() {
    let spec = SparsitySpec {
        n: 200,
        seed: 9,
        ..SparsitySpec::default()
    };
    assert_eq!(
        generate_sparsity_dataset(&spec).unwrap(),
        generate_sparsity_dataset(&spec).unwrap()
    );
    let other = SparsitySpec {
        seed: 10,
        ..spec.clone()
    };
    assert_ne!(
        generate_sparsity_dataset(&spec).unwrap(),
        generate_sparsity_dataset(&other).unwrap()
    );
}

#[test]
fn empty_request_is_rejected() {
    assert!(generate_sparsity_dataset(&SparsitySpec {
        n: 0,
        ..SparsitySpec::default()
    })
    .is_err());
}

#[test]
fn encoding_marks_sign_and_relevance() {
    let e = SyntheticExample::new(vec![1, -1, -1], vec![0, 1, 0]).unwrap();
    let (x, labels) = encode_batch([&e]).unwrap();
    assert_eq!(x.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(labels, vec![3]);
}

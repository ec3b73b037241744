use klab::analysis::covariance_eigenvalues;
use klab::experiments::sparsity::sample_example;
use klab::experiments::Config;
use klab::featmap::{kernel_estimate, FeatureMapSpec};
use klab::model::{Checkpoint, RngState};
use klab::spectral::FrequencyMatrix;
use klab::tensor::{kernels, DenseArray};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseArray> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| DenseArray::new([rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hadamard_transform_applied_twice_scales_by_the_width(
        log_d in 0u32..8,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let d = 1usize << log_d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = x.clone();
        kernels::fwht(&mut y);
        kernels::fwht(&mut y);
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a * d as f64 - b).abs() < 1e-9);
        }
    }

    #[test]
    fn eigenvalues_are_nonnegative_and_sum_to_the_frobenius_norm(s in matrix(5, 5)) {
        let ev = covariance_eigenvalues(&s).unwrap();
        let fro: f64 = s.data().iter().map(|v| v * v).sum();
        prop_assert!(ev.iter().all(|&v| v >= -1e-12));
        prop_assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((ev.iter().sum::<f64>() - fro).abs() <= 1e-10 * fro.max(1.0));
    }

    #[test]
    fn kernel_estimates_are_symmetric_and_trig_self_similarity_is_one(
        omega in matrix(16, 3),
        q in prop::collection::vec(-2.0f64..2.0, 3),
        k in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let proj = FrequencyMatrix::from_array(omega);
        for spec in [FeatureMapSpec::rks(16), FeatureMapSpec::prf(16)] {
            let a = kernel_estimate(&q, &k, &spec, &proj).unwrap();
            let b = kernel_estimate(&k, &q, &spec, &proj).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let rks = FeatureMapSpec::rks(16);
        prop_assert!((kernel_estimate(&q, &q, &rks, &proj).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sampled_examples_respect_the_prefix_bound(
        p in 0.0f64..=1.0,
        len in 1usize..80,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = sample_example(p, len, &mut rng);
        prop_assert!(e.satisfies_invariants());
        let mut prefix = 0i32;
        for (&v, &a) in e.v.iter().zip(&e.a) {
            prefix += i32::from(v) * i32::from(a);
            prop_assert!(prefix.abs() <= 4);
        }
        prop_assert_eq!(prefix, e.label);
    }

    #[test]
    fn config_hash_ignores_order_and_comments(
        entries in prop::collection::btree_map("[a-z]{1,6}\\.[a-z]{1,6}", "[a-z0-9]{1,6}", 1..8),
    ) {
        let forward: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let backward: String = entries
            .iter()
            .rev()
            .map(|(k, v)| format!("  {k} = {v}   # note\n\n"))
            .collect();
        let a = Config::parse(&forward).unwrap();
        let b = Config::parse(&backward).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        step in any::<u64>(),
        seed in any::<[u8; 32]>(),
        arrays in prop::collection::vec(("[a-z./0-9]{1,12}", matrix(2, 3)), 0..5),
    ) {
        let ckpt = Checkpoint {
            step,
            rng: RngState { seed, stream: 3, word_pos: 17 },
            arrays,
        };
        prop_assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(), ckpt);
    }

    #[test]
    fn flipping_any_byte_is_detected(pos in any::<prop::sample::Index>()) {
        let ckpt = Checkpoint {
            step: 5,
            rng: RngState { seed: [1; 32], stream: 0, word_pos: 0 },
            arrays: vec![("w".into(), DenseArray::eye(3))],
        };
        let mut bytes = ckpt.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 0x40;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}

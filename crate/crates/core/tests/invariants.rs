//! Property tests for the structural invariants of the attention kernels,
//! the audit rules, and persistence.

use proptest::prelude::*;

use strata::eval::{count_impossible, metrics, ConfusionMatrix};
use strata::graph::{Boundary, GradGraph};
use strata::nn::{build_attention_map, toeplitz_attention, ToeplitzKernel};
use strata::synth::{generate_dataset, SynthConfig};
use strata::tensor::Tensor;

fn kernel_weights(logits: Vec<f64>) -> Tensor {
    ToeplitzKernel::new(Tensor::vector(logits)).unwrap().weights()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_convex_and_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut g = GradGraph::new();
        let a = g.leaf(Tensor::vector(xs.clone()));
        let b = g.leaf(Tensor::vector(xs.iter().map(|v| v + shift).collect()));
        let ya = g.softmax(a).unwrap();
        let yb = g.softmax(b).unwrap();
        let (va, vb) = (g.value(ya).data().to_vec(), g.value(yb).data().to_vec());
        prop_assert!((va.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(va.iter().all(|&v| v > 0.0));
        for (x, y) in va.iter().zip(&vb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn toeplitz_map_is_diagonal_constant_and_banded(
        d in 0usize..=7,
        t_extra in 1usize..=57,
        logits in prop::collection::vec(-3.0f64..3.0, 15),
    ) {
        let t = d + t_extra; // ensures t > d so off-band cells exist
        let weights = kernel_weights(logits[..2 * d + 1].to_vec());
        let map = build_attention_map(&weights, t, Boundary::ZeroPad).unwrap();
        for i in 0..t - 1 {
            for j in 0..t - 1 {
                prop_assert_eq!(map.at(i, j).to_bits(), map.at(i + 1, j + 1).to_bits());
            }
        }
        for i in 0..t {
            for j in 0..t {
                prop_assert_eq!(map.at(i, j) != 0.0, i.abs_diff(j) <= d);
            }
        }
    }

    #[test]
    fn conv_agrees_with_dense_map_multiply(
        t in 1usize..=32,
        d_seed in 0usize..=7,
        e in 1usize..=16,
        seed in 0u64..1000,
    ) {
        let d_cap = (2 * t - 2) / 2;
        let d = d_seed.min(d_cap);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let h = Tensor::new(
            vec![t, e],
            (0..t * e).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        ).unwrap();
        let weights = kernel_weights((0..2 * d + 1).map(|_| rng.gen_range(-2.0..2.0)).collect());
        for boundary in [Boundary::ZeroPad, Boundary::Renormalize] {
            let conv = toeplitz_attention(&h, &weights, boundary).unwrap();
            let dense = build_attention_map(&weights, t, boundary).unwrap().matmul(&h).unwrap();
            prop_assert!(conv.max_abs_diff(&dense) < 1e-9);
        }
    }

    #[test]
    fn graph_conv_matches_plain_conv(
        t in 1usize..=16,
        e in 1usize..=6,
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let d = rng.gen_range(0..=(t - 1).min(5));
        let h = Tensor::new(
            vec![t, e],
            (0..t * e).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        ).unwrap();
        let weights = kernel_weights((0..2 * d + 1).map(|_| rng.gen_range(-2.0..2.0)).collect());
        for boundary in [Boundary::ZeroPad, Boundary::Renormalize] {
            let plain = toeplitz_attention(&h, &weights, boundary).unwrap();
            let mut g = GradGraph::new();
            let hv = g.leaf(h.clone());
            let kv = g.leaf(weights.clone());
            let out = g.conv1d_band(hv, kv, boundary).unwrap();
            prop_assert!(g.value(out).bits_eq(&plain));
        }
    }

    #[test]
    fn kernel_weights_ignore_logit_shifts(
        d in 0usize..=7,
        logits in prop::collection::vec(-4.0f64..4.0, 15),
        shift in -40.0f64..40.0,
    ) {
        let base = logits[..2 * d + 1].to_vec();
        let w1 = kernel_weights(base.clone());
        let w2 = kernel_weights(base.iter().map(|v| v + shift).collect());
        prop_assert!(w1.max_abs_diff(&w2) < 1e-12);
        prop_assert!((w1.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w1.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn impossible_counts_bounded_and_zero_for_unit_monotone(
        labels in prop::collection::vec(0usize..3, 1..60),
    ) {
        let counts = count_impossible(&labels).unwrap();
        prop_assert!(counts.total() <= labels.len() - 1);
        let mut unit_monotone = labels.clone();
        unit_monotone.sort_unstable();
        // squeeze out skips so consecutive labels differ by at most one
        let mut prev: Option<usize> = None;
        let squeezed: Vec<usize> = unit_monotone
            .into_iter()
            .flat_map(|l| {
                let start = match prev {
                    Some(p) if l > p + 1 => p + 1,
                    _ => l,
                };
                prev = Some(l);
                (start..=l).collect::<Vec<_>>()
            })
            .collect();
        prop_assert_eq!(count_impossible(&squeezed).unwrap().total(), 0);
    }

    #[test]
    fn metrics_fractions_stay_in_unit_interval(
        counts in prop::collection::vec(0usize..40, 9),
    ) {
        let cm = ConfusionMatrix::from_counts([
            [counts[0], counts[1], counts[2]],
            [counts[3], counts[4], counts[5]],
            [counts[6], counts[7], counts[8]],
        ]);
        if cm.total() == 0 {
            prop_assert!(metrics(&cm).is_err());
        } else {
            let m = metrics(&cm).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.accuracy));
            for c in 0..3 {
                for v in [m.sensitivity[c], m.specificity[c]].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn dataset_roundtrip_is_lossless(n in 1usize..6, seed in 0u64..500) {
        let mut cfg = SynthConfig::default();
        cfg.t_min = 4;
        cfg.t_max = 9;
        let ds = generate_dataset(&cfg, n, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        strata::synth::save_dataset(&ds, &path).unwrap();
        let back = strata::synth::load_dataset(&path).unwrap();
        prop_assert_eq!(&ds, &back);
        for (a, b) in ds.iter().zip(&back) {
            for (ra, rb) in a.features.iter().zip(&b.features) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts(
        rows_a in 1usize..5,
        rows_b in 1usize..5,
        cols in 1usize..5,
        seed in 0u64..500,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let a = Tensor::new(vec![rows_a, cols], (0..rows_a * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![rows_b, cols], (0..rows_b * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = GradGraph::new();
        let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let cat = g.concat_rows(&[av, bv]).unwrap();
        let first = g.slice_rows(cat, 0, rows_a).unwrap();
        let second = g.slice_rows(cat, rows_a, rows_b).unwrap();
        prop_assert!(g.value(first).bits_eq(&a));
        prop_assert!(g.value(second).bits_eq(&b));
    }
}

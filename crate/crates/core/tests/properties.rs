//! Randomized invariant checks over the data pipeline, metrics, and a
//! couple of kernels with cheap independent oracles.

use proptest::prelude::*;
use std::collections::BTreeSet;
use whatwhere::analysis::unit_entropy;
use whatwhere::data::{generate, split_by_instance, DataError, GenConfig};
use whatwhere::kernels::{maxpool_fwd, softmax_ce};
use whatwhere::shapes::ShapeSet;
use whatwhere::tensor::Tensor;
use whatwhere::train::average_precision;

fn tiny_config(instances: usize, backgrounds: usize, seed: u64) -> GenConfig {
    GenConfig {
        categories: 2,
        n_rot: 2,
        n_az: 1,
        instances,
        backgrounds,
        height: 8,
        width: 8,
        channels: 1,
        shape_set: ShapeSet::A,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_instance_disjoint_and_complete(
        instances in 2usize..9,
        backgrounds in 1usize..3,
        frac in 0.2f64..0.9,
        seed in 0u64..500,
    ) {
        let data = generate(&tiny_config(instances, backgrounds, seed)).unwrap();
        match split_by_instance(&data, frac, seed.wrapping_mul(31) ^ 7) {
            Ok((train, test)) => {
                prop_assert_eq!(train.len() + test.len(), data.len());
                prop_assert!(!train.is_empty() && !test.is_empty());
                for cat in 0..2u16 {
                    let tr: BTreeSet<u16> = train
                        .records
                        .iter()
                        .filter(|r| r.category == cat)
                        .map(|r| r.instance)
                        .collect();
                    let te: BTreeSet<u16> = test
                        .records
                        .iter()
                        .filter(|r| r.category == cat)
                        .map(|r| r.instance)
                        .collect();
                    prop_assert!(tr.is_disjoint(&te), "category {} shares instances", cat);
                    prop_assert!(!tr.is_empty(), "category {} lost its train split", cat);
                }
                // Every instance keeps its full view grid, so every
                // (category, pose) cell stays populated on the train side.
                let mut cells = BTreeSet::new();
                for r in &train.records {
                    cells.insert((r.category, r.pose));
                }
                prop_assert_eq!(cells.len(), 2 * data.meta.poses as usize);
            }
            // The ceil rule can eat every instance at high fractions.
            Err(DataError::Invalid(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn rendered_pixels_stay_in_unit_range(seed in 0u64..400, set_b in proptest::bool::ANY) {
        let config = GenConfig {
            categories: 3,
            n_rot: 2,
            n_az: 2,
            instances: 1,
            backgrounds: 1,
            height: 12,
            width: 9,
            channels: 1,
            shape_set: if set_b { ShapeSet::B } else { ShapeSet::A },
            seed,
        };
        let data = generate(&config).unwrap();
        for r in &data.records {
            prop_assert_eq!(r.image.len(), 12 * 9);
            for &v in &r.image {
                prop_assert!((0.0..=1.0).contains(&v), "pixel {} out of range", v);
            }
        }
    }

    #[test]
    fn entropy_stays_within_its_bounds(mass in proptest::collection::vec(0.01f64..5.0, 2..12)) {
        let k = mass.len() as f64;
        let e = unit_entropy(&mass).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!(e <= k.log2() + 1e-12);
        let scaled: Vec<f64> = mass.iter().map(|m| m * 2.5).collect();
        prop_assert!((unit_entropy(&scaled).unwrap() - e).abs() < 1e-10);
    }

    #[test]
    fn softmax_loss_agrees_with_its_probabilities(
        logits in proptest::collection::vec(-30.0f64..30.0, 2..10),
        pick in 0usize..10,
    ) {
        let label = pick % logits.len();
        let (loss, grad) = softmax_ce(&logits, label).unwrap();
        let probs: Vec<f64> = grad
            .iter()
            .enumerate()
            .map(|(i, g)| g + f64::from(i == label))
            .collect();
        let sum: f64 = probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for &p in &probs {
            prop_assert!((-1e-15..=1.0 + 1e-12).contains(&p));
        }
        prop_assert!(loss >= 0.0);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        prop_assert!((loss - (lse - logits[label])).abs() < 1e-9);
    }

    #[test]
    fn maxpool_matches_a_direct_scan(
        n in 1usize..3,
        c in 1usize..3,
        window in 1usize..4,
        stride in 1usize..4,
        extra_h in 0usize..5,
        extra_w in 0usize..5,
        seed in 0u64..1000,
    ) {
        let (h, w) = (window + extra_h, window + extra_w);
        let mut rng = whatwhere::rng::Rng::new(seed);
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let input = Tensor::from_vec(&[n, c, h, w], data.clone()).unwrap();
        let (out, _) = maxpool_fwd(&input, window, stride).unwrap();
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        prop_assert_eq!(out.shape(), &[n, c, oh, ow]);
        for nc in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ki in 0..window {
                        for kj in 0..window {
                            let v = data[nc * h * w + (y * stride + ki) * w + x * stride + kj];
                            best = best.max(v);
                        }
                    }
                    prop_assert_eq!(out.data()[nc * oh * ow + y * ow + x], best);
                }
            }
        }
    }

    #[test]
    fn average_precision_is_a_proper_score(
        scores in proptest::collection::vec(0.0f64..1.0, 3..20),
        flip in 0usize..20,
    ) {
        let positive: Vec<bool> = (0..scores.len()).map(|i| i % 3 == flip % 3).collect();
        if positive.iter().any(|&b| b) {
            let ap = average_precision(&scores, &positive).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
        let all: Vec<bool> = vec![true; scores.len()];
        prop_assert_eq!(average_precision(&scores, &all).unwrap(), 1.0);
    }
}

//! Property tests over the numeric primitives and augmentations.

use proptest::prelude::*;
use sicl_core::augment::{self, AugmentationPolicy};
use sicl_core::numerics::{tensor, Tensor};
use sicl_core::rng::{stream, Domain};
use sicl_core::synthgen::{Modality, SensorWindow};
use sicl_core::verify;

fn window_strategy() -> impl Strategy<Value = SensorWindow> {
    (1usize..4, 4usize..40).prop_flat_map(|(c, t)| {
        (
            proptest::collection::vec(-10.0f64..10.0, c * t),
            Just(c),
            Just(t),
            0u16..8,
            0u16..5,
        )
            .prop_map(|(data, c, t, subject, activity)| SensorWindow {
                values: Tensor::from_vec(vec![c, t], data).unwrap(),
                subject_id: subject,
                activity_id: activity,
                modality: Modality::Inertial,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_lanes_sum_to_one(
        data in proptest::collection::vec(-30.0f64..30.0, 12),
        axis in 0usize..2,
    ) {
        let t = Tensor::from_vec(vec![3, 4], data).unwrap();
        let s = tensor::softmax(&t, axis).unwrap();
        let (outer, len, inner) = if axis == 0 { (1, 3, 4) } else { (3, 4, 1) };
        for o in 0..outer {
            for i in 0..inner {
                let mut sum = 0.0;
                for l in 0..len {
                    sum += s.data()[(o * len + l) * inner + i];
                }
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_rows_are_unit(
        data in proptest::collection::vec(-100.0f64..100.0, 12)
            .prop_filter("nonzero rows", |d| {
                d.chunks(4).all(|row| row.iter().any(|v| v.abs() > 1e-3))
            }),
    ) {
        let t = Tensor::from_vec(vec![3, 4], data).unwrap();
        let n = tensor::l2_normalize(&t, 1).unwrap();
        for i in 0..3 {
            let norm: f64 = n.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_random_graphs(seed in 0u64..512) {
        // deep compositions see more finite-difference truncation than the
        // single-op checks, so the bound here is an order looser
        let err = verify::random_graph_check(seed);
        prop_assert!(err < 1e-3, "seed {seed}: {err}");
    }

    #[test]
    fn neutral_policy_is_identity_for_any_window(w in window_strategy(), seed in 0u64..100) {
        let mut rng = stream(seed, Domain::Augment, 0);
        let out = augment::apply(&AugmentationPolicy::neutral(), &w, &mut rng).unwrap();
        prop_assert_eq!(out, w);
    }

    #[test]
    fn augmentation_preserves_shape_labels_and_replays(
        w in window_strategy(),
        seed in 0u64..100,
        sigma in 0.0f64..0.5,
        lo in 0.5f64..1.0,
        span in 0.0f64..0.5,
        rotation in proptest::bool::ANY,
        segments in 1usize..4,
    ) {
        let policy = AugmentationPolicy {
            jitter_sigma: sigma,
            scale_range: [lo, lo + span],
            rotation_enabled: rotation,
            permute_segments: segments,
            rng_seed: 0,
        };
        let mut a = stream(seed, Domain::Augment, 1);
        let mut b = stream(seed, Domain::Augment, 1);
        let out_a = augment::apply(&policy, &w, &mut a).unwrap();
        let out_b = augment::apply(&policy, &w, &mut b).unwrap();
        prop_assert_eq!(&out_a, &out_b, "same rng state must replay bit-identically");
        prop_assert_eq!(out_a.values.shape(), w.values.shape());
        prop_assert_eq!(out_a.subject_id, w.subject_id);
        prop_assert_eq!(out_a.activity_id, w.activity_id);
        prop_assert_eq!(out_a.modality, w.modality);
    }
}

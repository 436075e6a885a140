//! Stochastic time-series augmentations producing contrastive views.
//!
//! Two independent draws of [`apply`] on the same window form a positive
//! pair. Transforms are applied in a fixed order — rotation, channel scaling,
//! segment permutation, jitter — and each is skipped at its neutral setting,
//! so the neutral policy is the exact identity map.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthgen::SensorWindow;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Knobs of the augmentation pipeline.
///
/// `rng_seed` is the root of the augmentation stream; training code derives
/// per-step rng states from it, independent of all other random streams.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    /// Std-dev of i.i.d. Gaussian noise added per sample.
    pub jitter_sigma: f64,
    /// One multiplicative factor per channel, drawn uniformly from this range.
    pub scale_range: [f64; 2],
    /// One uniform random 3D rotation per draw, applied to each consecutive
    /// channel triplet. Silently skipped when the channel count is not a
    /// multiple of 3.
    pub rotation_enabled: bool,
    /// Split the time axis into this many segments and shuffle their order.
    pub permute_segments: usize,
    pub rng_seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            jitter_sigma: 0.05,
            scale_range: [0.9, 1.1],
            rotation_enabled: true,
            permute_segments: 4,
            rng_seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// The identity policy: every knob at neutral.
    pub fn neutral() -> Self {
        AugmentationPolicy {
            jitter_sigma: 0.0,
            scale_range: [1.0, 1.0],
            rotation_enabled: false,
            permute_segments: 1,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::contract("augment: jitter_sigma must be finite and >= 0"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::contract(
                "augment: scale_range must satisfy 0 < lo <= hi",
            ));
        }
        if self.permute_segments == 0 {
            return Err(Error::contract("augment: permute_segments must be >= 1"));
        }
        Ok(())
    }
}

/// Uniform random rotation from a uniform unit quaternion.
fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    let mut sq = 0.0;
    for v in &mut q {
        *v = StandardNormal.sample(rng);
        sq += *v * *v;
    }
    let inv = 1.0 / sq.sqrt();
    let [w, x, y, z] = [q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv];
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Applies one stochastic draw of the policy to a window. Shape, subject and
/// activity labels are preserved; two calls with independent rng states give
/// the two views of a positive pair.
pub fn apply(
    policy: &AugmentationPolicy,
    window: &SensorWindow,
    rng: &mut impl Rng,
) -> Result<SensorWindow> {
    policy.validate()?;
    let (channels, t) = window.values.dims2()?;
    if channels == 0 || t == 0 {
        return Err(Error::contract("augment: empty window"));
    }
    if t < policy.permute_segments {
        return Err(Error::contract(format!(
            "augment: {} segments for window of {t} steps",
            policy.permute_segments
        )));
    }
    let mut data = window.values.data().to_vec();

    if policy.rotation_enabled && channels % 3 == 0 {
        let rot = random_rotation(rng);
        for triple in 0..channels / 3 {
            let base = triple * 3 * t;
            for i in 0..t {
                let v = [data[base + i], data[base + t + i], data[base + 2 * t + i]];
                for (r, row) in rot.iter().enumerate() {
                    data[base + r * t + i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
                }
            }
        }
    }

    let [lo, hi] = policy.scale_range;
    if lo != 1.0 || hi != 1.0 {
        for c in 0..channels {
            let factor = rng.gen_range(lo..=hi);
            for v in &mut data[c * t..(c + 1) * t] {
                *v *= factor;
            }
        }
    }

    if policy.permute_segments > 1 {
        let n = policy.permute_segments;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        // near-equal segment boundaries at floor(i*t/n)
        let bounds: Vec<usize> = (0..=n).map(|i| i * t / n).collect();
        let mut permuted = vec![0.0; data.len()];
        for c in 0..channels {
            let src = &data[c * t..(c + 1) * t];
            let dst = &mut permuted[c * t..(c + 1) * t];
            let mut at = 0;
            for &seg in &order {
                let (s, e) = (bounds[seg], bounds[seg + 1]);
                dst[at..at + (e - s)].copy_from_slice(&src[s..e]);
                at += e - s;
            }
        }
        data = permuted;
    }

    if policy.jitter_sigma > 0.0 {
        for v in &mut data {
            let n: f64 = StandardNormal.sample(rng);
            *v += policy.jitter_sigma * n;
        }
    }

    Ok(SensorWindow {
        values: Tensor::from_vec(vec![channels, t], data)?,
        subject_id: window.subject_id,
        activity_id: window.activity_id,
        modality: window.modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::synthgen::Modality;

    fn window(channels: usize, t: usize, data: Vec<f64>) -> SensorWindow {
        SensorWindow {
            values: Tensor::from_vec(vec![channels, t], data).unwrap(),
            subject_id: 3,
            activity_id: 1,
            modality: Modality::Inertial,
        }
    }

    #[test]
    fn neutral_policy_is_exact_identity() {
        let w = window(2, 6, (0..12).map(|i| i as f64 * 0.37 - 1.0).collect());
        let mut rng = stream(1, Domain::Augment, 0);
        let out = apply(&AugmentationPolicy::neutral(), &w, &mut rng).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn apply_preserves_shape_and_labels() {
        let w = window(6, 20, vec![0.5; 120]);
        let mut rng = stream(2, Domain::Augment, 0);
        let out = apply(&AugmentationPolicy::default(), &w, &mut rng).unwrap();
        assert_eq!(out.values.shape(), w.values.shape());
        assert_eq!(out.subject_id, w.subject_id);
        assert_eq!(out.activity_id, w.activity_id);
        assert_eq!(out.modality, w.modality);
    }

    #[test]
    fn jitter_variance_matches_chi_square_bound() {
        // sigma = 0.1 on a zero signal, T = 100: the sample variance is
        // sigma^2 * chi2_99 / 99, inside [0.004, 0.025] with probability
        // ~1 - 1e-6 (sample std inside [0.05, 0.2] a fortiori).
        let w = window(3, 100, vec![0.0; 300]);
        let policy = AugmentationPolicy {
            jitter_sigma: 0.1,
            scale_range: [1.0, 1.0],
            rotation_enabled: false,
            permute_segments: 1,
            rng_seed: 0,
        };
        for seed in 0..5 {
            let mut rng = stream(seed, Domain::Augment, 0);
            let out = apply(&policy, &w, &mut rng).unwrap();
            for c in 0..3 {
                let row = &out.values.data()[c * 100..(c + 1) * 100];
                let mean: f64 = row.iter().sum::<f64>() / 100.0;
                let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0;
                assert!((0.004..=0.025).contains(&var), "seed {seed} var {var}");
                assert!((0.05..=0.2).contains(&var.sqrt()));
            }
        }
    }

    #[test]
    fn two_segment_permutation_enumerates_both_orders() {
        let w = window(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let policy = AugmentationPolicy {
            jitter_sigma: 0.0,
            scale_range: [1.0, 1.0],
            rotation_enabled: false,
            permute_segments: 2,
            rng_seed: 0,
        };
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..16 {
            let mut rng = stream(seed, Domain::Augment, 0);
            let out = apply(&policy, &w, &mut rng).unwrap();
            let v: Vec<i64> = out.values.data().iter().map(|x| *x as i64).collect();
            assert!(v == vec![1, 2, 3, 4] || v == vec![3, 4, 1, 2], "got {v:?}");
            seen.insert(v);
        }
        assert_eq!(seen.len(), 2, "both segment orders should occur");
    }

    #[test]
    fn positive_scaling_preserves_sign_pattern() {
        let w = window(2, 5, vec![1.0, -2.0, 0.0, 3.0, -4.0, -1.0, 1.0, 0.0, -0.5, 2.0]);
        let policy = AugmentationPolicy {
            jitter_sigma: 0.0,
            scale_range: [0.5, 1.5],
            rotation_enabled: false,
            permute_segments: 1,
            rng_seed: 0,
        };
        let mut rng = stream(3, Domain::Augment, 0);
        let out = apply(&policy, &w, &mut rng).unwrap();
        for (a, b) in w.values.data().iter().zip(out.values.data()) {
            assert_eq!(a.signum(), b.signum());
            assert_eq!(*a == 0.0, *b == 0.0);
        }
    }

    #[test]
    fn rotation_skipped_for_non_triplet_channels() {
        let w = window(4, 6, (0..24).map(|i| i as f64).collect());
        let policy = AugmentationPolicy {
            jitter_sigma: 0.0,
            scale_range: [1.0, 1.0],
            rotation_enabled: true,
            permute_segments: 1,
            rng_seed: 0,
        };
        let mut rng = stream(4, Domain::Augment, 0);
        let out = apply(&policy, &w, &mut rng).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn rotation_preserves_triplet_norms() {
        let w = window(3, 8, (0..24).map(|i| (i as f64 * 0.71).sin()).collect());
        let policy = AugmentationPolicy {
            jitter_sigma: 0.0,
            scale_range: [1.0, 1.0],
            rotation_enabled: true,
            permute_segments: 1,
            rng_seed: 0,
        };
        let mut rng = stream(5, Domain::Augment, 0);
        let out = apply(&policy, &w, &mut rng).unwrap();
        for i in 0..8 {
            let n0: f64 = (0..3).map(|c| w.values.data()[c * 8 + i].powi(2)).sum();
            let n1: f64 = (0..3).map(|c| out.values.data()[c * 8 + i].powi(2)).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_replay() {
        let w = window(6, 30, (0..180).map(|i| (i as f64).cos()).collect());
        let policy = AugmentationPolicy::default();
        let mut a = stream(6, Domain::Augment, 7);
        let mut b = stream(6, Domain::Augment, 7);
        let out_a = apply(&policy, &w, &mut a).unwrap();
        let out_b = apply(&policy, &w, &mut b).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn empty_window_is_contract_error() {
        let w = SensorWindow {
            values: Tensor::zeros(&[0, 0]),
            subject_id: 0,
            activity_id: 0,
            modality: Modality::Inertial,
        };
        let mut rng = stream(7, Domain::Augment, 0);
        assert!(matches!(
            apply(&AugmentationPolicy::default(), &w, &mut rng),
            Err(Error::Contract(_))
        ));
    }
}

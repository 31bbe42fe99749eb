//! Adaptive keypoint masking.
//!
//! A sample's difficulty is read off the teacher's per-joint responsiveness:
//! joints whose response is close to the sample's best joint count as simple,
//! and the mask budget grows with the share of simple joints. Samples whose
//! best joint is still below `tau_min` are treated as extremely hard and get
//! the fixed `floor` budget.

use ndarray::{Array3, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::KeypointSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    /// Relative-response threshold below which a joint counts as simple.
    pub gamma: f64,
    /// Mask budget for a sample whose joints are all simple.
    pub m: usize,
    /// Budget for extremely hard samples.
    pub floor: usize,
    /// Minimum best-joint responsiveness for a sample to be scored at all.
    pub tau_min: f64,
    /// Inclusive range of mask side lengths, in image pixels.
    pub size_range: (usize, usize),
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            m: 8,
            floor: 2,
            tau_min: 0.3,
            size_range: (8, 24),
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return Err(Error::param(format!("tau_min must lie in (0,1), got {}", self.tau_min)));
        }
        if self.m == 0 {
            return Err(Error::param("mask parameter m must be positive"));
        }
        if self.floor > self.m {
            return Err(Error::param(format!("floor {} exceeds m {}", self.floor, self.m)));
        }
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi {
            return Err(Error::param(format!("invalid mask size range {lo}..={hi}")));
        }
        Ok(())
    }

    /// `round(n * m / K)`, rounding halves away from zero.
    pub fn count_for(&self, n_simple: usize, k: usize) -> usize {
        (2 * n_simple * self.m + k) / (2 * k)
    }
}

/// Mask allocation for one sample, with the diagnostics that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBudget {
    pub count: usize,
    pub n_simple: usize,
    pub relative_response: Vec<f64>,
    pub extreme: bool,
}

impl MaskBudget {
    /// A budget not derived from responsiveness (random-count baseline).
    pub fn fixed(count: usize) -> Self {
        Self {
            count,
            n_simple: 0,
            relative_response: Vec::new(),
            extreme: false,
        }
    }
}

/// Normalizes responses to `(max - r) / (max - min)`; a flat profile maps to all zeros.
pub fn relative_response(resp: &[f64]) -> Result<Vec<f64>> {
    if resp.len() < 2 {
        return Err(Error::param(format!(
            "relative response needs at least 2 joints, got {}",
            resp.len()
        )));
    }
    let hi = resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = resp.iter().copied().fold(f64::INFINITY, f64::min);
    let span = hi - lo;
    if span == 0.0 {
        return Ok(vec![0.0; resp.len()]);
    }
    Ok(resp.iter().map(|&r| ((hi - r) / span).clamp(0.0, 1.0)).collect())
}

pub fn allocate_mask_count(resp: &[f64], policy: &MaskPolicy) -> Result<MaskBudget> {
    let rel = relative_response(resp)?;
    let hi = resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_simple = rel.iter().filter(|&&r| r < policy.gamma).count();
    if hi < policy.tau_min {
        return Ok(MaskBudget {
            count: policy.floor,
            n_simple,
            relative_response: rel,
            extreme: true,
        });
    }
    Ok(MaskBudget {
        count: policy.count_for(n_simple, resp.len()),
        n_simple,
        relative_response: rel,
        extreme: false,
    })
}

/// Baseline allocation: a count drawn uniformly from `0..=m`, ignoring the sample.
pub fn random_mask_count<R: Rng + ?Sized>(policy: &MaskPolicy, rng: &mut R) -> MaskBudget {
    MaskBudget::fixed(rng.random_range(0..=policy.m))
}

/// Fills squares centred on randomly chosen visible joints with the image's
/// per-channel mean. `image` is `(channels, height, width)`; returns a fresh
/// image and the masked joint ids in selection order.
pub fn apply_keypoint_masks<R: Rng + ?Sized>(
    image: &Array3<f32>,
    decoded: &KeypointSet,
    budget: &MaskBudget,
    policy: &MaskPolicy,
    rng: &mut R,
) -> (Array3<f32>, Vec<usize>) {
    let mut out = image.clone();
    let candidates = decoded.visible_joints();
    let count = budget.count.min(candidates.len());
    if count == 0 {
        return (out, Vec::new());
    }
    let (_, height, width) = image.dim();
    let means: Vec<f32> = image
        .outer_iter()
        .map(|ch| ch.mean().unwrap_or(0.0))
        .collect();
    let chosen: Vec<usize> = index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let (lo, hi) = policy.size_range;
    for &joint in &chosen {
        let side = rng.random_range(lo..=hi) as f64;
        let [x, y] = decoded.coord(joint);
        let x0 = (x - side / 2.0).round() as i64;
        let y0 = (y - side / 2.0).round() as i64;
        let x1 = (x0 + side as i64).clamp(0, width as i64) as usize;
        let y1 = (y0 + side as i64).clamp(0, height as i64) as usize;
        let x0 = x0.clamp(0, width as i64) as usize;
        let y0 = y0.clamp(0, height as i64) as usize;
        for (c, mean) in means.iter().enumerate() {
            let mut ch = out.index_axis_mut(Axis(0), c);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    ch[[yy, xx]] = *mean;
                }
            }
        }
    }
    (out, chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Visibility;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_response_examples() {
        assert_eq!(relative_response(&[0.9, 0.9, 0.9]).unwrap(), vec![0.0; 3]);
        assert_eq!(relative_response(&[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        let r = relative_response(&[0.8, 0.6, 0.4]).unwrap();
        let expected = [0.0, (0.8 - 0.6) / (0.8 - 0.4), 1.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn relative_response_needs_two_joints() {
        assert!(matches!(relative_response(&[0.5]), Err(Error::Parameter(_))));
    }

    #[test]
    fn allocation_examples() {
        let policy = MaskPolicy::default();
        let mut resp = vec![0.9; 8];
        resp.extend(vec![0.1; 8]);
        let b = allocate_mask_count(&resp, &policy).unwrap();
        assert_eq!((b.n_simple, b.count, b.extreme), (8, 4, false));

        let b = allocate_mask_count(&[0.95; 16], &policy).unwrap();
        assert_eq!((b.n_simple, b.count), (16, 8));

        let mut resp = vec![0.01; 16];
        resp[3] = 0.05;
        let b = allocate_mask_count(&resp, &policy).unwrap();
        assert!(b.extreme);
        assert_eq!(b.count, 2);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let p = MaskPolicy { m: 6, ..MaskPolicy::default() };
        // 1 * 6 / 4 = 1.5
        assert_eq!(p.count_for(1, 4), 2);
        // 3 * 6 / 4 = 4.5
        assert_eq!(p.count_for(3, 4), 5);
        assert_eq!(p.count_for(0, 17), 0);
    }

    #[test]
    fn policy_validation() {
        assert!(MaskPolicy::default().validate().is_ok());
        assert!(MaskPolicy { floor: 9, ..Default::default() }.validate().is_err());
        assert!(MaskPolicy { size_range: (5, 4), ..Default::default() }.validate().is_err());
        assert!(MaskPolicy { gamma: 1.0, ..Default::default() }.validate().is_err());
    }

    fn noise_image(seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((3, 64, 64), || rng.random_range(-1.0..1.0))
    }

    fn spread_keypoints(k: usize) -> KeypointSet {
        KeypointSet::visible((0..k).map(|j| [4.0 + 3.5 * j as f64, 60.0 - 3.3 * j as f64]).collect())
            .unwrap()
    }

    #[test]
    fn zero_budget_leaves_image_untouched() {
        let img = noise_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, ids) =
            apply_keypoint_masks(&img, &spread_keypoints(17), &MaskBudget::fixed(0), &MaskPolicy::default(), &mut rng);
        assert_eq!(out, img);
        assert!(ids.is_empty());
    }

    #[test]
    fn full_budget_touches_every_joint() {
        let img = noise_image(2);
        let kp = spread_keypoints(17);
        let policy = MaskPolicy { size_range: (3, 5), ..MaskPolicy::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, ids) = apply_keypoint_masks(&img, &kp, &MaskBudget::fixed(17), &policy, &mut rng);
        assert_eq!(ids.len(), 17);
        for j in 0..17 {
            let [x, y] = kp.coord(j);
            let (x, y) = (x.round() as usize, y.round() as usize);
            assert_ne!(out[[0, y, x]], img[[0, y, x]], "joint {j}");
        }
    }

    #[test]
    fn masking_is_deterministic_under_seed() {
        let img = noise_image(3);
        let kp = spread_keypoints(17);
        let policy = MaskPolicy::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            apply_keypoint_masks(&img, &kp, &MaskBudget::fixed(3), &policy, &mut rng)
        };
        let (a, ids_a) = run();
        let (b, ids_b) = run();
        assert_eq!(ids_a.len(), 3);
        assert_eq!(ids_a, ids_b);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_or_invisible_sets_are_noops() {
        let img = noise_image(4);
        let kp = KeypointSet::new(vec![], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, ids) = apply_keypoint_masks(&img, &kp, &MaskBudget::fixed(3), &MaskPolicy::default(), &mut rng);
        assert_eq!(out, img);
        assert!(ids.is_empty());

        let hidden = KeypointSet::new(vec![[10.0, 10.0]], vec![Visibility::LabeledInvisible]).unwrap();
        let (out, ids) = apply_keypoint_masks(&img, &hidden, &MaskBudget::fixed(3), &MaskPolicy::default(), &mut rng);
        assert_eq!(out, img);
        assert!(ids.is_empty());
    }

    #[test]
    fn random_count_stays_in_range() {
        let policy = MaskPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = [false; 9];
        for _ in 0..500 {
            let b = random_mask_count(&policy, &mut rng);
            assert!(b.count <= policy.m);
            seen[b.count] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    proptest! {
        #[test]
        fn count_is_monotone_and_bounded(k in 2usize..20, m in 1usize..16) {
            let policy = MaskPolicy { m, floor: 0, ..MaskPolicy::default() };
            let mut prev = 0;
            for n in 0..=k {
                let c = policy.count_for(n, k);
                prop_assert!(c >= prev);
                prop_assert!(c <= m);
                prev = c;
            }
        }

        #[test]
        fn relative_response_is_affine_invariant(
            resp in proptest::collection::vec(0.0f64..1.0, 2..20),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let r0 = relative_response(&resp).unwrap();
            let scaled: Vec<f64> = resp.iter().map(|r| a * r + b).collect();
            let r1 = relative_response(&scaled).unwrap();
            for (x, y) in r0.iter().zip(&r1) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn budget_bounds(resp in proptest::collection::vec(0.0f64..1.0, 2..20)) {
            let policy = MaskPolicy::default();
            let b = allocate_mask_count(&resp, &policy).unwrap();
            prop_assert!(b.count <= policy.m);
            if b.extreme {
                prop_assert_eq!(b.count, policy.floor);
            } else {
                prop_assert_eq!(b.count, policy.count_for(b.n_simple, resp.len()));
            }
        }

        #[test]
        fn masking_only_changes_pixels_inside_squares(seed in 0u64..200, count in 0usize..6) {
            let img = noise_image(seed);
            let kp = spread_keypoints(8);
            let policy = MaskPolicy { size_range: (2, 9), ..MaskPolicy::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, ids) = apply_keypoint_masks(&img, &kp, &MaskBudget::fixed(count), &policy, &mut rng);
            // Any joint's square has side <= 9; a changed pixel must be within
            // that reach of some masked joint.
            for ((c, y, x), v) in out.indexed_iter() {
                if *v != img[[c, y, x]] {
                    let near = ids.iter().any(|&j| {
                        let [jx, jy] = kp.coord(j);
                        (x as f64 - jx).abs() <= 5.0 && (y as f64 - jy).abs() <= 5.0
                    });
                    prop_assert!(near);
                }
            }
        }
    }
}

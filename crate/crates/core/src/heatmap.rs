//! Keypoint heatmaps: Gaussian target synthesis, per-joint responsiveness and
//! argmax decoding.
//!
//! Coordinates are `(x, y)` pairs throughout; arrays are indexed `[row, col]`,
//! i.e. `[y, x]`. A heatmap cell `(u, v)` corresponds to image position
//! `(u * stride, v * stride)`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values below this are written as exact zeros during target synthesis.
pub const TRUNCATION_FLOOR: f64 = 1e-4;

/// Gaussians are cut off beyond this many sigmas from the peak.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

/// Annotation state of one joint, mirroring COCO's `v` flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Visibility {
    NotLabeled,
    LabeledInvisible,
    LabeledVisible,
}

impl Visibility {
    pub fn from_coco(v: i64) -> Option<Self> {
        match v {
            0 => Some(Visibility::NotLabeled),
            1 => Some(Visibility::LabeledInvisible),
            2 => Some(Visibility::LabeledVisible),
            _ => None,
        }
    }

    pub fn to_coco(self) -> u8 {
        match self {
            Visibility::NotLabeled => 0,
            Visibility::LabeledInvisible => 1,
            Visibility::LabeledVisible => 2,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Visibility::NotLabeled
    }
}

/// Joint coordinates and visibility flags for one person instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    coords: Vec<[f64; 2]>,
    visibility: Vec<Visibility>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>, visibility: Vec<Visibility>) -> Result<Self> {
        if coords.len() != visibility.len() {
            return Err(Error::param(format!(
                "keypoint set has {} coordinates but {} visibility flags",
                coords.len(),
                visibility.len()
            )));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::param("keypoint coordinates must be finite"));
        }
        Ok(Self { coords, visibility })
    }

    /// All joints labeled-visible.
    pub fn visible(coords: Vec<[f64; 2]>) -> Result<Self> {
        let n = coords.len();
        Self::new(coords, vec![Visibility::LabeledVisible; n])
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn visibility(&self) -> &[Visibility] {
        &self.visibility
    }

    pub fn coord(&self, joint: usize) -> [f64; 2] {
        self.coords[joint]
    }

    pub fn vis(&self, joint: usize) -> Visibility {
        self.visibility[joint]
    }

    pub fn set_visibility(&mut self, joint: usize, v: Visibility) {
        self.visibility[joint] = v;
    }

    pub fn labeled_count(&self) -> usize {
        self.visibility.iter().filter(|v| v.is_labeled()).count()
    }

    /// Indices of labeled-visible joints.
    pub fn visible_joints(&self) -> Vec<usize> {
        self.visibility
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == Visibility::LabeledVisible)
            .map(|(j, _)| j)
            .collect()
    }

    /// Applies `f` to every coordinate, keeping visibility.
    pub fn map_coords(&self, mut f: impl FnMut([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            coords: self.coords.iter().map(|&c| f(c)).collect(),
            visibility: self.visibility.clone(),
        }
    }
}

/// A single joint's activation surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub joint_id: usize,
    pub values: Array2<f32>,
}

impl Heatmap {
    pub fn responsiveness(&self) -> f32 {
        max_value(self.values.view())
    }

    /// Row-major argmax as `(x, y)`; ties resolve to the lowest index.
    pub fn argmax(&self) -> (usize, usize) {
        argmax(self.values.view())
    }
}

/// One heatmap per joint, all sharing the same spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    maps: Array3<f32>,
    pub sample_id: String,
}

impl HeatmapStack {
    /// Wraps a `(K, height, width)` array.
    pub fn new(maps: Array3<f32>, sample_id: impl Into<String>) -> Result<Self> {
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("heatmap values must be finite"));
        }
        Ok(Self {
            maps,
            sample_id: sample_id.into(),
        })
    }

    /// Assembles a stack from individual maps; joint ids must be exactly `0..K`.
    pub fn from_maps(mut maps: Vec<Heatmap>, sample_id: impl Into<String>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::param("heatmap stack needs at least one map"));
        }
        maps.sort_by_key(|m| m.joint_id);
        for (j, m) in maps.iter().enumerate() {
            if m.joint_id != j {
                return Err(Error::param(format!(
                    "joint ids must be 0..{} without duplicates",
                    maps.len()
                )));
            }
        }
        let dim = maps[0].values.dim();
        if maps.iter().any(|m| m.values.dim() != dim) {
            return Err(Error::param("all heatmaps in a stack must share one size"));
        }
        let views: Vec<_> = maps.iter().map(|m| m.values.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views).expect("shapes checked above");
        Self::new(stacked, sample_id)
    }

    pub fn joints(&self) -> usize {
        self.maps.dim().0
    }

    /// `(height, width)`
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    pub fn map(&self, joint: usize) -> ArrayView2<'_, f32> {
        self.maps.index_axis(Axis(0), joint)
    }

    pub fn heatmap(&self, joint: usize) -> Heatmap {
        Heatmap {
            joint_id: joint,
            values: self.map(joint).to_owned(),
        }
    }

    pub fn as_array(&self) -> &Array3<f32> {
        &self.maps
    }

    pub fn into_array(self) -> Array3<f32> {
        self.maps
    }
}

fn max_value(map: ArrayView2<'_, f32>) -> f32 {
    map.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

fn argmax(map: ArrayView2<'_, f32>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_val = f32::NEG_INFINITY;
    for ((y, x), &v) in map.indexed_iter() {
        if v > best_val {
            best_val = v;
            best = (x, y);
        }
    }
    best
}

/// Renders unnormalized Gaussian targets (peak exactly 1.0) for every labeled
/// joint. Joints that are not labeled, or whose nearest cell falls outside the
/// map, produce all-zero maps.
pub fn synthesize_targets(
    keypoints: &KeypointSet,
    sigma: f64,
    out_size: (usize, usize),
    stride: f64,
) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    if !(stride > 0.0) {
        return Err(Error::param(format!("stride must be positive, got {stride}")));
    }
    let (height, width) = out_size;
    if height < 1 || width < 1 {
        return Err(Error::param(format!(
            "heatmap size must be at least 1x1, got {height}x{width}"
        )));
    }
    let k = keypoints.len();
    let mut maps = Array3::<f32>::zeros((k, height, width));
    let radius = TRUNCATION_SIGMAS * sigma;
    let reach = radius.floor() as i64;
    for j in 0..k {
        if !keypoints.vis(j).is_labeled() {
            continue;
        }
        let [x, y] = keypoints.coord(j);
        let cx = (x / stride).round() as i64;
        let cy = (y / stride).round() as i64;
        if cx < 0 || cy < 0 || cx >= width as i64 || cy >= height as i64 {
            continue;
        }
        let mut map = maps.index_axis_mut(Axis(0), j);
        for v in (cy - reach).max(0)..=(cy + reach).min(height as i64 - 1) {
            for u in (cx - reach).max(0)..=(cx + reach).min(width as i64 - 1) {
                let d2 = ((u - cx) * (u - cx) + (v - cy) * (v - cy)) as f64;
                if d2 > radius * radius {
                    continue;
                }
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                if g >= TRUNCATION_FLOOR {
                    map[[v as usize, u as usize]] = g as f32;
                }
            }
        }
    }
    HeatmapStack::new(maps, "")
}

/// Maximum activation of each joint's map, in joint order.
pub fn responsiveness(stack: &HeatmapStack) -> Vec<f32> {
    stack
        .maps
        .outer_iter()
        .map(|m| max_value(m))
        .collect()
}

/// Argmax decoding with a quarter-cell shift toward the higher neighbour.
/// Every joint is reported labeled-visible.
pub fn decode_peaks(stack: &HeatmapStack, stride: f64) -> KeypointSet {
    decode_with_scores(stack, stride).0
}

/// As [`decode_peaks`], also returning each joint's peak value.
pub fn decode_with_scores(stack: &HeatmapStack, stride: f64) -> (KeypointSet, Vec<f32>) {
    let mut coords = Vec::with_capacity(stack.joints());
    let mut scores = Vec::with_capacity(stack.joints());
    for map in stack.maps.outer_iter() {
        let (x, y) = argmax(map);
        let (h, w) = map.dim();
        let mut fx = x as f64;
        let mut fy = y as f64;
        if x > 0 && x + 1 < w {
            fx += 0.25 * sign(map[[y, x + 1]] - map[[y, x - 1]]);
        }
        if y > 0 && y + 1 < h {
            fy += 0.25 * sign(map[[y + 1, x]] - map[[y - 1, x]]);
        }
        coords.push([fx * stride, fy * stride]);
        scores.push(map[[y, x]]);
    }
    let n = coords.len();
    let set = KeypointSet {
        coords,
        visibility: vec![Visibility::LabeledVisible; n],
    };
    (set, scores)
}

fn sign(d: f32) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(x: f64, y: f64) -> KeypointSet {
        KeypointSet::visible(vec![[x, y]]).unwrap()
    }

    #[test]
    fn peak_lands_on_nearest_cell() {
        let s = synthesize_targets(&single(128.0, 128.0), 2.0, (64, 64), 4.0).unwrap();
        let hm = s.heatmap(0);
        assert_eq!(hm.argmax(), (32, 32));
        assert_eq!(hm.values[[32, 32]], 1.0);
    }

    #[test]
    fn not_labeled_joint_is_all_zero() {
        let kp = KeypointSet::new(vec![[128.0, 128.0]], vec![Visibility::NotLabeled]).unwrap();
        let s = synthesize_targets(&kp, 2.0, (64, 64), 4.0).unwrap();
        assert!(s.map(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn off_peak_value_matches_gaussian() {
        let s = synthesize_targets(&single(128.0, 128.0), 2.0, (64, 64), 4.0).unwrap();
        let expected = (-(2.0f64 * 2.0) / (2.0 * 2.0 * 2.0)).exp();
        assert!((s.map(0)[[32, 34]] as f64 - expected).abs() < 1e-6);
        assert!((s.map(0)[[34, 32]] as f64 - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn truncated_beyond_three_sigma() {
        let s = synthesize_targets(&single(128.0, 128.0), 2.0, (64, 64), 4.0).unwrap();
        assert!(s.map(0)[[32, 38]] > 0.0);
        assert_eq!(s.map(0)[[32, 39]], 0.0);
        assert_eq!(s.map(0)[[37, 37]], 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let kp = single(1.0, 1.0);
        assert!(matches!(synthesize_targets(&kp, 0.0, (8, 8), 4.0), Err(Error::Parameter(_))));
        assert!(matches!(synthesize_targets(&kp, 1.0, (8, 8), -1.0), Err(Error::Parameter(_))));
        assert!(matches!(synthesize_targets(&kp, 1.0, (0, 8), 4.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn responsiveness_of_zero_and_target_stacks() {
        let zeros = HeatmapStack::new(Array3::zeros((5, 8, 8)), "z").unwrap();
        assert_eq!(responsiveness(&zeros), vec![0.0; 5]);
        let kp = KeypointSet::visible(vec![[4.0, 4.0], [20.0, 8.0], [12.0, 28.0]]).unwrap();
        let s = synthesize_targets(&kp, 1.5, (8, 8), 4.0).unwrap();
        assert_eq!(responsiveness(&s), vec![1.0; 3]);
    }

    #[test]
    fn responsiveness_finds_planted_maxima() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let planted = [0.2f32, 0.9, 0.5];
        let mut maps = Array3::<f32>::zeros((3, 12, 10));
        for (j, &p) in planted.iter().enumerate() {
            for v in maps.index_axis_mut(Axis(0), j).iter_mut() {
                *v = rng.random_range(0.0..p * 0.99);
            }
            let (y, x) = (rng.random_range(0..12), rng.random_range(0..10));
            maps[[j, y, x]] = p;
        }
        let stack = HeatmapStack::new(maps.clone(), "p").unwrap();
        // brute-force scan
        let oracle: Vec<f32> = (0..3)
            .map(|j| {
                let mut m = f32::MIN;
                for y in 0..12 {
                    for x in 0..10 {
                        m = m.max(maps[[j, y, x]]);
                    }
                }
                m
            })
            .collect();
        assert_eq!(responsiveness(&stack), oracle);
        assert_eq!(oracle, planted.to_vec());
    }

    #[test]
    fn decode_recovers_synthesized_joint() {
        let s = synthesize_targets(&single(128.0, 128.0), 2.0, (64, 64), 4.0).unwrap();
        let d = decode_peaks(&s, 4.0);
        let [x, y] = d.coord(0);
        assert!((x - 128.0).abs() <= 1.0 && (y - 128.0).abs() <= 1.0);
        assert_eq!(d.vis(0), Visibility::LabeledVisible);
    }

    #[test]
    fn uniform_map_decodes_to_origin() {
        let s = HeatmapStack::new(Array3::from_elem((1, 16, 16), 0.3), "u").unwrap();
        assert_eq!(decode_peaks(&s, 4.0).coord(0), [0.0, 0.0]);
    }

    #[test]
    fn two_peaks_pick_the_higher() {
        let mut m = Array3::<f32>::zeros((1, 64, 64));
        m[[0, 10, 10]] = 0.9;
        m[[0, 50, 50]] = 0.899;
        let s = HeatmapStack::new(m, "t").unwrap();
        let [x, y] = decode_peaks(&s, 1.0).coord(0);
        assert!((x - 10.0).abs() <= 0.25 && (y - 10.0).abs() <= 0.25);
    }

    #[test]
    fn decode_handles_values_outside_unit_range() {
        let mut m = Array3::<f32>::from_elem((1, 4, 4), -2.0);
        m[[0, 2, 1]] = 3.5;
        let s = HeatmapStack::new(m, "t").unwrap();
        let (kp, scores) = decode_with_scores(&s, 2.0);
        assert_eq!(kp.coord(0), [2.0, 4.0]);
        assert_eq!(scores[0], 3.5);
    }

    #[test]
    fn from_maps_rejects_duplicate_ids() {
        let a = Heatmap { joint_id: 0, values: Array2::zeros((4, 4)) };
        let b = Heatmap { joint_id: 0, values: Array2::zeros((4, 4)) };
        assert!(HeatmapStack::from_maps(vec![a.clone(), b], "x").is_err());
        let c = Heatmap { joint_id: 1, values: Array2::zeros((4, 4)) };
        assert_eq!(HeatmapStack::from_maps(vec![c, a], "x").unwrap().joints(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn synthesize_decode_round_trip(
            sigma in 1.0f64..4.0,
            pts in proptest::collection::vec((0.0f64..253.9, 0.0f64..189.9), 1..17),
        ) {
            let stride = 4.0;
            let kp = KeypointSet::visible(pts.iter().map(|&(x, y)| [x, y]).collect()).unwrap();
            let s = synthesize_targets(&kp, sigma, (48, 64), stride).unwrap();
            let d = decode_peaks(&s, stride);
            for j in 0..kp.len() {
                let [x, y] = kp.coord(j);
                let [dx, dy] = d.coord(j);
                prop_assert!((x - dx).abs() <= stride / 2.0 + 1.0);
                prop_assert!((y - dy).abs() <= stride / 2.0 + 1.0);
            }
            prop_assert!(responsiveness(&s).iter().all(|&r| r == 1.0));
        }

        #[test]
        fn centered_gaussian_is_symmetric(sigma in 0.5f64..4.0) {
            let kp = single(64.0, 64.0);
            let s = synthesize_targets(&kp, sigma, (33, 33), 4.0).unwrap();
            let m = s.map(0);
            for y in 0..33 {
                for x in 0..33 {
                    prop_assert_eq!(m[[y, x]], m[[32 - y, x]]);
                    prop_assert_eq!(m[[y, x]], m[[y, 32 - x]]);
                }
            }
        }
    }
}

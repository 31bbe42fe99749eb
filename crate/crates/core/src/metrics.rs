//! Keypoint evaluation: OKS-based AP/AR (COCO protocol, single person per
//! crop) and PCK / PCKh (MPII protocol).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{KeypointSet, Visibility};

/// Standard per-joint OKS constants for the 17 COCO keypoints.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087,
    0.087, 0.089, 0.089,
];

/// Uniform constant used for the synthetic stick figures.
pub const SYNTHETIC_SIGMA: f64 = 0.05;

/// Which ground-truth joints enter the OKS sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OksJoints {
    /// Labeled joints, visible or occluded (COCO practice).
    #[default]
    Labeled,
    /// Only joints flagged labeled-visible.
    VisibleOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    pub sigmas: Vec<f64>,
    /// Object area `S^2` in pixels squared.
    pub area: f64,
    #[serde(default)]
    pub joints: OksJoints,
}

impl OksParams {
    pub fn new(sigmas: Vec<f64>, area: f64) -> Result<Self> {
        if sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::param("OKS sigmas must be positive"));
        }
        if !(area > 0.0) {
            return Err(Error::param(format!("OKS area must be positive, got {area}")));
        }
        Ok(Self {
            sigmas,
            area,
            joints: OksJoints::Labeled,
        })
    }

    pub fn visible_only(mut self) -> Self {
        self.joints = OksJoints::VisibleOnly;
        self
    }
}

/// Object keypoint similarity:
/// `sum_i exp(-d_i^2 / (2 S^2 sigma_i^2)) / (number of counted joints)`.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, params: &OksParams) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != params.sigmas.len() {
        return Err(Error::param(format!(
            "OKS joint counts disagree: pred {}, gt {}, sigmas {}",
            pred.len(),
            gt.len(),
            params.sigmas.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..gt.len() {
        let counted = match params.joints {
            OksJoints::Labeled => gt.vis(j).is_labeled(),
            OksJoints::VisibleOnly => gt.vis(j) == Visibility::LabeledVisible,
        };
        if !counted {
            continue;
        }
        let [px, py] = pred.coord(j);
        let [gx, gy] = gt.coord(j);
        let d2 = (px - gx).powi(2) + (py - gy).powi(2);
        let s = params.sigmas[j];
        sum += (-d2 / (2.0 * params.area * s * s)).exp();
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no ground-truth joints to score".into()));
    }
    Ok(sum / count as f64)
}

/// The ten OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
}

/// Precision at 101 recall points and final recall for one OKS threshold.
fn precision_recall_at(sorted: &[(f64, f64)], threshold: f64) -> (f64, f64) {
    let n = sorted.len();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    for (rank, &(_, o)) in sorted.iter().enumerate() {
        if o >= threshold {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n as f64);
    }
    // monotone envelope from the right
    for i in (1..n).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&rc| rc < target);
        if idx < n {
            sum += precision[idx];
        }
    }
    (sum / 101.0, recall.last().copied().unwrap_or(0.0))
}

/// AP over `thresholds` from `(score, oks)` pairs, one prediction per ground
/// truth. Predictions are ranked by descending score (stable on ties).
pub fn average_precision(instances: &[(f64, f64)], thresholds: &[f64]) -> Result<ApResult> {
    if instances.is_empty() {
        return Err(Error::UndefinedMetric("no instances to evaluate".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::param("at least one OKS threshold is required"));
    }
    let mut sorted = instances.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let per: Vec<(f64, f64)> = thresholds.iter().map(|&t| precision_recall_at(&sorted, t)).collect();
    let m = thresholds.len() as f64;
    Ok(ApResult {
        ap: per.iter().map(|p| p.0).sum::<f64>() / m,
        ap50: precision_recall_at(&sorted, 0.5).0,
        ap75: precision_recall_at(&sorted, 0.75).0,
        ar: per.iter().map(|p| p.1).sum::<f64>() / m,
    })
}

/// Axis-aligned rectangle `[[x0, y0], [x1, y1]]`.
pub type Rect = [[f64; 2]; 2];

fn diagonal(r: &Rect) -> f64 {
    ((r[1][0] - r[0][0]).powi(2) + (r[1][1] - r[0][1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleSource {
    HeadDiameter,
    BboxDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckParams {
    pub threshold: f64,
    pub scale_source: ScaleSource,
}

impl PckParams {
    /// PCKh@0.5.
    pub fn pckh() -> Self {
        Self {
            threshold: 0.5,
            scale_source: ScaleSource::HeadDiameter,
        }
    }
}

/// Per-instance normalisation references.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScaleRef {
    pub head_rect: Option<Rect>,
    pub bbox: Option<Rect>,
}

/// Body-part groups reported in PCK tables.
pub const PCK_GROUPS: [&str; 7] = ["head", "shoulder", "elbow", "wrist", "hip", "knee", "ankle"];

/// Joint indices per group for the known layouts (16 = MPII, 17 = COCO).
pub fn joint_groups(k: usize) -> Option<[Vec<usize>; 7]> {
    match k {
        16 => Some([vec![8, 9], vec![12, 13], vec![11, 14], vec![10, 15], vec![2, 3], vec![1, 4], vec![0, 5]]),
        17 => Some([
            vec![0, 1, 2, 3, 4],
            vec![5, 6],
            vec![7, 8],
            vec![9, 10],
            vec![11, 12],
            vec![13, 14],
            vec![15, 16],
        ]),
        _ => None,
    }
}

/// Correct-keypoint rates in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PckResult {
    pub head: Option<f64>,
    pub shoulder: Option<f64>,
    pub elbow: Option<f64>,
    pub wrist: Option<f64>,
    pub hip: Option<f64>,
    pub knee: Option<f64>,
    pub ankle: Option<f64>,
    pub total: f64,
}

impl PckResult {
    pub fn groups(&self) -> [Option<f64>; 7] {
        [self.head, self.shoulder, self.elbow, self.wrist, self.hip, self.knee, self.ankle]
    }
}

fn instance_scale(gt: &KeypointSet, r: &ScaleRef, source: ScaleSource) -> Result<f64> {
    let scale = match source {
        ScaleSource::HeadDiameter => {
            let rect = r
                .head_rect
                .ok_or_else(|| Error::param("head-diameter PCK requires a head rectangle"))?;
            diagonal(&rect)
        }
        ScaleSource::BboxDiagonal => match r.bbox {
            Some(b) => diagonal(&b),
            None => {
                let pts: Vec<[f64; 2]> = (0..gt.len())
                    .filter(|&j| gt.vis(j).is_labeled())
                    .map(|j| gt.coord(j))
                    .collect();
                let lo = |i: usize| pts.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
                let hi = |i: usize| pts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
                diagonal(&[[lo(0), lo(1)], [hi(0), hi(1)]])
            }
        },
    };
    if !(scale > 0.0) {
        return Err(Error::param(format!("PCK scale must be positive, got {scale}")));
    }
    Ok(scale)
}

/// A joint is correct iff `|pred - gt| / scale < threshold` (strict). Only
/// labeled ground-truth joints are counted.
pub fn pck(preds: &[KeypointSet], gts: &[KeypointSet], scales: &[ScaleRef], params: &PckParams) -> Result<PckResult> {
    if preds.len() != gts.len() || gts.len() != scales.len() {
        return Err(Error::param("pck needs one prediction and one scale per ground truth"));
    }
    if !(params.threshold > 0.0) {
        return Err(Error::param("PCK threshold must be positive"));
    }
    let k = gts.first().map(|g| g.len()).unwrap_or(0);
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for ((pred, gt), sref) in preds.iter().zip(gts).zip(scales) {
        if pred.len() != k || gt.len() != k {
            return Err(Error::param("inconsistent joint counts across instances"));
        }
        if gt.labeled_count() == 0 {
            continue;
        }
        let scale = instance_scale(gt, sref, params.scale_source)?;
        for j in 0..k {
            if !gt.vis(j).is_labeled() {
                continue;
            }
            let [px, py] = pred.coord(j);
            let [gx, gy] = gt.coord(j);
            let d = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
            counts[j] += 1;
            if d / scale < params.threshold {
                hits[j] += 1;
            }
        }
    }
    let rate = |joints: &[usize]| -> Option<f64> {
        let c: usize = joints.iter().map(|&j| counts[j]).sum();
        let h: usize = joints.iter().map(|&j| hits[j]).sum();
        (c > 0).then(|| h as f64 / c as f64)
    };
    let mut out = PckResult::default();
    let total_joints: Vec<usize> = match joint_groups(k) {
        Some(groups) => {
            let r: Vec<Option<f64>> = groups.iter().map(|g| rate(g)).collect();
            out.head = r[0];
            out.shoulder = r[1];
            out.elbow = r[2];
            out.wrist = r[3];
            out.hip = r[4];
            out.knee = r[5];
            out.ankle = r[6];
            groups.iter().flatten().copied().collect()
        }
        None => (0..k).collect(),
    };
    out.total = rate(&total_joints).ok_or_else(|| Error::UndefinedMetric("no labeled joints for PCK".into()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(coords: Vec<[f64; 2]>) -> KeypointSet {
        KeypointSet::visible(coords).unwrap()
    }

    #[test]
    fn oks_examples() {
        let gt = kp(vec![[10.0, 10.0], [20.0, 5.0]]);
        let p = OksParams::new(vec![0.05, 0.07], 900.0).unwrap();
        assert_eq!(oks(&gt, &gt, &p).unwrap(), 1.0);

        // d = S * sigma
        let s = 30.0 * 0.05;
        let single = OksParams::new(vec![0.05], 900.0).unwrap();
        let v = oks(&kp(vec![[10.0 + s, 10.0]]), &kp(vec![[10.0, 10.0]]), &single).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn oks_ignores_unscored_joints() {
        let pred = kp(vec![[500.0, 500.0], [3.0, 4.0]]);
        let p = OksParams::new(vec![0.05, 0.05], 400.0).unwrap();
        let gt = KeypointSet::new(vec![[0.0, 0.0], [3.0, 4.0]], vec![Visibility::NotLabeled, Visibility::LabeledVisible]).unwrap();
        assert_eq!(oks(&pred, &gt, &p).unwrap(), 1.0);
        let occluded =
            KeypointSet::new(vec![[0.0, 0.0], [3.0, 4.0]], vec![Visibility::LabeledInvisible, Visibility::LabeledVisible]).unwrap();
        assert_eq!(oks(&pred, &occluded, &p.clone().visible_only()).unwrap(), 1.0);
        assert!(oks(&pred, &occluded, &p).unwrap() < 0.6);
    }

    #[test]
    fn oks_without_joints_is_undefined() {
        let gt = KeypointSet::new(vec![[0.0, 0.0]], vec![Visibility::NotLabeled]).unwrap();
        let p = OksParams::new(vec![0.05], 100.0).unwrap();
        assert!(matches!(oks(&gt, &gt, &p), Err(Error::UndefinedMetric(_))));
        assert!(OksParams::new(vec![0.0], 1.0).is_err());
        assert!(OksParams::new(vec![0.1], 0.0).is_err());
    }

    #[test]
    fn ap_examples() {
        let t = coco_thresholds();
        let perfect: Vec<_> = (0..7).map(|i| (i as f64 * 0.1, 1.0)).collect();
        let r = average_precision(&perfect, &t).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75, r.ar), (1.0, 1.0, 1.0, 1.0));

        let mid: Vec<_> = (0..5).map(|i| (0.9 - i as f64 * 0.1, 0.6)).collect();
        let r = average_precision(&mid, &t).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
        assert!((r.ap - 0.3).abs() < 1e-12);

        let r = average_precision(&[(0.8, 0.49)], &t).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75, r.ar), (0.0, 0.0, 0.0, 0.0));

        assert!(matches!(average_precision(&[], &t), Err(Error::UndefinedMetric(_))));
    }

    /// Independent 101-point AP: for each recall level take the best
    /// precision over every rank that reaches it.
    fn brute_ap(instances: &[(f64, f64)], t: f64) -> f64 {
        let mut idx: Vec<usize> = (0..instances.len()).collect();
        idx.sort_by(|&a, &b| instances[b].0.partial_cmp(&instances[a].0).unwrap().then(a.cmp(&b)));
        let n = instances.len() as f64;
        let mut pts = Vec::new();
        for k in 1..=idx.len() {
            let tp = idx[..k].iter().filter(|&&i| instances[i].1 >= t).count() as f64;
            pts.push((tp / n, tp / k as f64));
        }
        (0..=100)
            .map(|r| {
                let r = r as f64 / 100.0;
                pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0
    }

    #[test]
    fn ap_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = coco_thresholds();
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let inst: Vec<(f64, f64)> = (0..n)
                .map(|_| ((rng.random_range(0..20) as f64) / 20.0, rng.random_range(0.0..1.0)))
                .collect();
            let got = average_precision(&inst, &t).unwrap();
            let want = t.iter().map(|&th| brute_ap(&inst, th)).sum::<f64>() / t.len() as f64;
            assert!((got.ap - want).abs() < 1e-9);
            assert!((got.ap50 - brute_ap(&inst, 0.5)).abs() < 1e-9);
        }
    }

    fn mpii_gt() -> (KeypointSet, ScaleRef) {
        let coords: Vec<[f64; 2]> = (0..16).map(|j| [10.0 + 3.0 * j as f64, 40.0 - j as f64]).collect();
        (kp(coords), ScaleRef { head_rect: Some([[0.0, 0.0], [6.0, 8.0]]), bbox: None })
    }

    #[test]
    fn pck_examples() {
        let (gt, s) = mpii_gt();
        let params = PckParams::pckh();
        let r = pck(&[gt.clone()], &[gt.clone()], &[s], &params).unwrap();
        assert_eq!(r.total, 1.0);
        assert!(r.groups().iter().all(|g| *g == Some(1.0)));

        // head diameter 10, displacement of exactly 0.5 * 10 fails the strict test
        let shifted = gt.map_coords(|[x, y]| [x + 5.0, y]);
        assert_eq!(pck(&[shifted], &[gt.clone()], &[s], &params).unwrap().total, 0.0);
        let almost = gt.map_coords(|[x, y]| [x + 4.999, y]);
        assert_eq!(pck(&[almost], &[gt.clone()], &[s], &params).unwrap().total, 1.0);

        // joints outside the groups (pelvis 6, thorax 7) do not enter Total
        let mut half = gt.clone();
        let groups = joint_groups(16).unwrap();
        let scored: Vec<usize> = groups.iter().flatten().copied().collect();
        let mut coords = half.coords().to_vec();
        for &j in scored.iter().step_by(2) {
            coords[j][0] += 100.0;
        }
        half = KeypointSet::visible(coords).unwrap();
        let r = pck(&[half], &[gt.clone()], &[s], &params).unwrap();
        assert_eq!(r.total, 0.5);
    }

    #[test]
    fn pck_requires_head_rect() {
        let (gt, _) = mpii_gt();
        let r = pck(&[gt.clone()], &[gt], &[ScaleRef::default()], &PckParams::pckh());
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn pck_total_is_weighted_mean_of_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut scales = Vec::new();
        for _ in 0..20 {
            let (gt, s) = mpii_gt();
            let vis: Vec<Visibility> = (0..16)
                .map(|_| if rng.random_bool(0.8) { Visibility::LabeledVisible } else { Visibility::NotLabeled })
                .collect();
            let gt = KeypointSet::new(gt.coords().to_vec(), vis).unwrap();
            preds.push(gt.map_coords(|[x, y]| [x + rng.random_range(-8.0..8.0), y]));
            gts.push(gt);
            scales.push(s);
        }
        let r = pck(&preds, &gts, &scales, &PckParams::pckh()).unwrap();
        let groups = joint_groups(16).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (g, rate) in groups.iter().zip(r.groups()) {
            let n: usize = gts.iter().map(|gt| g.iter().filter(|&&j| gt.vis(j).is_labeled()).count()).sum();
            num += rate.unwrap_or(0.0) * n as f64;
            den += n as f64;
        }
        assert!((r.total - num / den).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn oks_translation_invariant(
            pts in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, -5.0f64..5.0, -5.0f64..5.0), 1..17),
            tx in -50.0f64..50.0, ty in -50.0f64..50.0,
        ) {
            let gt = kp(pts.iter().map(|p| [p.0, p.1]).collect());
            let pred = kp(pts.iter().map(|p| [p.0 + p.2, p.1 + p.3]).collect());
            let p = OksParams::new(vec![0.05; pts.len()], 2500.0).unwrap();
            let a = oks(&pred, &gt, &p).unwrap();
            let b = oks(&pred.map_coords(|[x, y]| [x + tx, y + ty]), &gt.map_coords(|[x, y]| [x + tx, y + ty]), &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn oks_non_increasing_in_distance(d0 in 0.0f64..20.0, extra in 0.0f64..20.0) {
            let gt = kp(vec![[0.0, 0.0], [5.0, 5.0]]);
            let p = OksParams::new(vec![0.05, 0.05], 1600.0).unwrap();
            let near = oks(&kp(vec![[d0, 0.0], [5.0, 5.0]]), &gt, &p).unwrap();
            let far = oks(&kp(vec![[d0 + extra, 0.0], [5.0, 5.0]]), &gt, &p).unwrap();
            prop_assert!(far <= near);
        }
    }
}

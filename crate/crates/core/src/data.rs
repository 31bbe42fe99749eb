//! Datasets: the synthetic stick-figure generator, its on-disk manifest,
//! COCO-style keypoint loading and labeled/unlabeled splits.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{warp_planes, AffineAug};
use crate::heatmap::{KeypointSet, Visibility};
use crate::metrics::Rect;

pub const SYNTH_SCHEMA: &str = "ADAPTMASK-SYNTH-1";

/// Joint count of the stick figures (MPII order).
pub const STICK_JOINTS: usize = 16;

/// Fixed per-channel normalisation, so checkpoints are portable across splits.
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.25;

pub fn normalize_u8(p: u8) -> f32 {
    (p as f32 / 255.0 - NORM_MEAN) / NORM_STD
}

pub fn denormalize_u8(v: f32) -> u8 {
    ((v * NORM_STD + NORM_MEAN) * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    #[default]
    Clean,
    LowContrast,
    Occluded,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source_id: String,
    pub head_rect: Option<Rect>,
    /// Object area in crop pixels squared, used as `S^2` by OKS.
    pub area: Option<f64>,
    #[serde(default)]
    pub difficulty: Difficulty,
}

/// Ground truth kept on unlabeled records for evaluation only. Training code
/// never opens it.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedAnnotation(KeypointSet);

impl SealedAnnotation {
    pub fn reveal_for_evaluation(&self) -> &KeypointSet {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `(3, H, W)`, normalised with [`NORM_MEAN`] / [`NORM_STD`].
    pub image: Array3<f32>,
    /// `None` for unlabeled records.
    pub keypoints: Option<KeypointSet>,
    /// Crop box in the original image.
    pub bbox: Rect,
    pub meta: SampleMeta,
    sealed: Option<SealedAnnotation>,
}

impl SampleRecord {
    pub fn new(image: Array3<f32>, keypoints: Option<KeypointSet>, bbox: Rect, meta: SampleMeta) -> Self {
        Self {
            image,
            keypoints,
            bbox,
            meta,
            sealed: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.meta.source_id
    }

    pub fn image_size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    pub fn is_labeled(&self) -> bool {
        self.keypoints.as_ref().is_some_and(|k| k.labeled_count() > 0)
    }

    pub fn sealed(&self) -> Option<&SealedAnnotation> {
        self.sealed.as_ref()
    }

    /// Moves the annotation into the sealed slot.
    fn into_unlabeled(mut self) -> Self {
        if let Some(kp) = self.keypoints.take() {
            self.sealed = Some(SealedAnnotation(kp));
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_count: usize,
    pub seed: u64,
    pub source: String,
}

/// Deterministically shuffles `records` and takes the first `labeled_count`
/// annotated ones as labeled. Everything else is returned unlabeled with its
/// annotation sealed.
pub fn make_split(records: Vec<SampleRecord>, spec: &SplitSpec) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if spec.labeled_count > records.len() {
        return Err(Error::ingest(
            format!("requested {} labeled records from {} in {}", spec.labeled_count, records.len(), spec.source),
            None,
        ));
    }
    let annotated = records.iter().filter(|r| r.is_labeled()).count();
    if spec.labeled_count > annotated {
        return Err(Error::ingest(
            format!("only {annotated} annotated records in {}, {} requested", spec.source, spec.labeled_count),
            None,
        ));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut slots: Vec<Option<SampleRecord>> = records.into_iter().map(Some).collect();
    let mut labeled = Vec::with_capacity(spec.labeled_count);
    let mut unlabeled = Vec::new();
    for i in order {
        let r = slots[i].take().expect("each index visited once");
        if labeled.len() < spec.labeled_count && r.is_labeled() {
            labeled.push(r);
        } else {
            unlabeled.push(r.into_unlabeled());
        }
    }
    Ok((labeled, unlabeled))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StickFigureConfig {
    pub image_size: (usize, usize),
    /// Fraction of samples with occluding rectangles; covered joints become
    /// labeled-invisible.
    pub occlusion_frac: f64,
    /// Fraction of samples whose figure is blended towards the background.
    pub low_contrast_frac: f64,
}

impl Default for StickFigureConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            occlusion_frac: 0.15,
            low_contrast_frac: 0.15,
        }
    }
}

impl StickFigureConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(Error::param("stick figures need images of at least 32x32"));
        }
        for (name, f) in [("occlusion_frac", self.occlusion_frac), ("low_contrast_frac", self.low_contrast_frac)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::param(format!("{name} must lie in [0, 1], got {f}")));
            }
        }
        if self.occlusion_frac + self.low_contrast_frac > 1.0 {
            return Err(Error::param("occlusion_frac + low_contrast_frac must not exceed 1"));
        }
        Ok(())
    }
}

// limb segments as (joint a, joint b, colour, half width in figure units)
const LIMBS: [(usize, usize, [u8; 3], f64); 12] = [
    (2, 3, [200, 200, 200], 1.2),
    (1, 2, [200, 40, 160], 1.4),
    (0, 1, [255, 90, 200], 1.2),
    (3, 4, [60, 200, 80], 1.4),
    (4, 5, [170, 230, 50], 1.2),
    (6, 7, [240, 240, 240], 1.8),
    (12, 13, [200, 200, 200], 1.2),
    (7, 8, [240, 240, 240], 1.0),
    (12, 11, [230, 60, 60], 1.2),
    (11, 10, [255, 150, 40], 1.0),
    (13, 14, [60, 90, 235], 1.2),
    (14, 15, [40, 200, 230], 1.0),
];
const HEAD_COLOUR: [u8; 3] = [250, 220, 60];

fn polar(origin: [f64; 2], len: f64, angle_deg: f64) -> [f64; 2] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    [origin[0] + len * c, origin[1] + len * s]
}

/// Random articulated pose in figure units; angles are measured in the image
/// frame (y down, 90 degrees points down).
fn sample_pose<R: Rng>(rng: &mut R) -> Vec<[f64; 2]> {
    let mut j = vec![[0.0; 2]; STICK_JOINTS];
    let up = -90.0 + rng.random_range(-15.0..15.0);
    let pelvis = [0.0, 0.0];
    let thorax = polar(pelvis, 14.0, up);
    let neck = polar(thorax, 3.0, up);
    let head = polar(neck, 7.0, up + rng.random_range(-20.0..20.0));
    let across = up + 90.0; // towards image right for an upright figure
    j[6] = pelvis;
    j[7] = thorax;
    j[8] = neck;
    j[9] = head;
    j[2] = polar(pelvis, -4.0, across);
    j[3] = polar(pelvis, 4.0, across);
    j[12] = polar(thorax, -6.0, across);
    j[13] = polar(thorax, 6.0, across);
    let down = up + 180.0;
    for (hip, knee, ankle, side) in [(2, 1, 0, -1.0), (3, 4, 5, 1.0)] {
        let thigh = down - side * rng.random_range(-10.0..35.0);
        j[knee] = polar(j[hip], 11.0, thigh);
        j[ankle] = polar(j[knee], 10.0, thigh + side * rng.random_range(-90.0..10.0));
    }
    for (shoulder, elbow, wrist, side) in [(12, 11, 10, -1.0), (13, 14, 15, 1.0)] {
        let upper = down - side * rng.random_range(-20.0..110.0);
        j[elbow] = polar(j[shoulder], 9.0, upper);
        j[wrist] = polar(j[elbow], 8.0, upper - side * rng.random_range(-120.0..20.0));
    }
    j
}

fn seg_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

/// RGB float canvas `(3, H, W)` with values in [0, 255].
struct Canvas {
    px: Array3<f32>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, colour: [u8; 3], cover: f64) {
        let c = cover as f32;
        for ch in 0..3 {
            let v = &mut self.px[[ch, y, x]];
            *v = *v * (1.0 - c) + colour[ch] as f32 * c;
        }
    }

    /// Anti-aliased shape given by a signed coverage function over a box.
    fn fill(&mut self, lo: [f64; 2], hi: [f64; 2], colour: [u8; 3], alpha: f64, cover: impl Fn([f64; 2]) -> f64) {
        let (_, h, w) = self.px.dim();
        let x0 = lo[0].floor().max(0.0) as usize;
        let y0 = lo[1].floor().max(0.0) as usize;
        let x1 = (hi[0].ceil().max(0.0) as usize).min(w - 1);
        let y1 = (hi[1].ceil().max(0.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = cover([x as f64, y as f64]).clamp(0.0, 1.0) * alpha;
                if c > 0.0 {
                    self.blend(x, y, colour, c);
                }
            }
        }
    }

    fn segment(&mut self, a: [f64; 2], b: [f64; 2], half: f64, colour: [u8; 3], alpha: f64) {
        let pad = half + 1.0;
        let lo = [a[0].min(b[0]) - pad, a[1].min(b[1]) - pad];
        let hi = [a[0].max(b[0]) + pad, a[1].max(b[1]) + pad];
        self.fill(lo, hi, colour, alpha, |p| half + 0.5 - seg_distance(p, a, b));
    }

    fn disc(&mut self, c: [f64; 2], r: f64, colour: [u8; 3], alpha: f64) {
        let lo = [c[0] - r - 1.0, c[1] - r - 1.0];
        let hi = [c[0] + r + 1.0, c[1] + r + 1.0];
        self.fill(lo, hi, colour, alpha, |p| r + 0.5 - ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt());
    }
}

fn background<R: Rng>(rng: &mut R, h: usize, w: usize) -> Canvas {
    let noise = Normal::new(0.0, 8.0).expect("valid std");
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(70.0..150.0));
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(8.0..20.0),
            )
        })
        .collect();
    let mut px = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let t: f32 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f32 + fy * y as f32 + ph).sin())
                .sum();
            for ch in 0..3 {
                px[[ch, y, x]] = base[ch] + t * (1.0 - 0.3 * ch as f32) + noise.sample(rng) as f32;
            }
        }
    }
    Canvas { px }
}

fn render_one<R: Rng>(rng: &mut R, cfg: &StickFigureConfig, idx: usize) -> SampleRecord {
    let (h, w) = cfg.image_size;
    let pose = sample_pose(rng);
    let margin = 3.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pose {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let avail = [w as f64 - 1.0 - 2.0 * margin, h as f64 - 1.0 - 2.0 * margin];
    let natural = (h.min(w) as f64) / 64.0 * rng.random_range(0.85..1.15);
    let fit = (avail[0] / (hi[0] - lo[0])).min(avail[1] / (hi[1] - lo[1]));
    let s = natural.min(fit);
    // place the figure at a random position that keeps every joint inside
    let free = [avail[0] - s * (hi[0] - lo[0]), avail[1] - s * (hi[1] - lo[1])];
    let off = [
        margin + rng.random_range(0.0..=free[0].max(0.0)) - s * lo[0],
        margin + rng.random_range(0.0..=free[1].max(0.0)) - s * lo[1],
    ];
    let joints: Vec<[f64; 2]> = pose.iter().map(|p| [off[0] + s * p[0], off[1] + s * p[1]]).collect();

    let roll: f64 = rng.random();
    let difficulty = if roll < cfg.occlusion_frac {
        Difficulty::Occluded
    } else if roll < cfg.occlusion_frac + cfg.low_contrast_frac {
        Difficulty::LowContrast
    } else {
        Difficulty::Clean
    };
    let alpha = if difficulty == Difficulty::LowContrast { 0.3 } else { 1.0 };

    let mut canvas = background(rng, h, w);
    for &(a, b, colour, half) in &LIMBS {
        canvas.segment(joints[a], joints[b], half * s, colour, alpha);
    }
    let head_c = [(joints[8][0] + joints[9][0]) / 2.0, (joints[8][1] + joints[9][1]) / 2.0];
    let head_len = ((joints[9][0] - joints[8][0]).powi(2) + (joints[9][1] - joints[8][1]).powi(2)).sqrt();
    canvas.disc(head_c, 0.45 * head_len, HEAD_COLOUR, alpha);

    let mut vis = vec![Visibility::LabeledVisible; STICK_JOINTS];
    if difficulty == Difficulty::Occluded {
        let n = rng.random_range(1..=2);
        for _ in 0..n {
            let target = joints[rng.random_range(0..STICK_JOINTS)];
            let half = [rng.random_range(5.0..8.0) * s, rng.random_range(5.0..8.0) * s];
            let c = [target[0] + rng.random_range(-2.0..2.0), target[1] + rng.random_range(-2.0..2.0)];
            let shade: [u8; 3] = std::array::from_fn(|_| rng.random_range(40..200));
            let (r0, r1) = ([c[0] - half[0], c[1] - half[1]], [c[0] + half[0], c[1] + half[1]]);
            canvas.fill(r0, r1, shade, 1.0, |_| 1.0);
            for (j, p) in joints.iter().enumerate() {
                let inside = |v: f64, a: f64, b: f64| v >= a.floor().max(0.0) - 0.5 && v <= b.ceil() + 0.5;
                if inside(p[0], r0[0], r1[0]) && inside(p[1], r0[1], r1[1]) {
                    vis[j] = Visibility::LabeledInvisible;
                }
            }
        }
    }

    let image = canvas.px.mapv(|v| normalize_u8(v.round().clamp(0.0, 255.0) as u8));
    let half_side = 0.5 * head_len;
    let head_rect = [[head_c[0] - half_side, head_c[1] - half_side], [head_c[0] + half_side, head_c[1] + half_side]];
    let (mut blo, mut bhi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &joints {
        for d in 0..2 {
            blo[d] = blo[d].min(p[d]);
            bhi[d] = bhi[d].max(p[d]);
        }
    }
    let bbox = [[(blo[0] - 2.0).max(0.0), (blo[1] - 2.0).max(0.0)], [(bhi[0] + 2.0).min(w as f64 - 1.0), (bhi[1] + 2.0).min(h as f64 - 1.0)]];
    let area = (bbox[1][0] - bbox[0][0]) * (bbox[1][1] - bbox[0][1]);
    let keypoints = KeypointSet::new(joints, vis).expect("finite coordinates");
    SampleRecord::new(
        image,
        Some(keypoints),
        bbox,
        SampleMeta {
            source_id: format!("synth-{idx:05}"),
            head_rect: Some(head_rect),
            area: Some(area),
            difficulty,
        },
    )
}

/// Deterministic synthetic dataset of articulated stick figures over
/// textured noise, 16 joints in MPII order.
pub fn generate_stick_figures(count: usize, cfg: &StickFigureConfig, seed: u64) -> Result<Vec<SampleRecord>> {
    if count == 0 {
        return Err(Error::param("count must be at least 1"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|i| render_one(&mut rng, cfg, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub file: String,
    /// `[x, y, v]` triplets with COCO visibility flags.
    pub keypoints: Vec<[f64; 3]>,
    pub bbox: Rect,
    pub head_rect: Option<Rect>,
    pub area: Option<f64>,
    #[serde(default)]
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub joints: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
    pub generator: StickFigureConfig,
    pub records: Vec<ManifestRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<HashMap<String, Vec<String>>>,
}

fn to_png(image: &Array3<f32>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| denormalize_u8(image[[c, y as usize, x as usize]])))
    })
}

fn from_rgb(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| normalize_u8(img.get_pixel(x as u32, y as u32)[c]))
}

/// Writes `manifest.json` and one PNG per record.
pub fn save_synthetic(dir: &Path, records: &[SampleRecord], generator: &StickFigureConfig, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let kp = r
            .keypoints
            .as_ref()
            .or(r.sealed().map(|s| s.reveal_for_evaluation()))
            .ok_or_else(|| Error::ingest("synthetic record without ground truth", Some(r.id().to_string())))?;
        let file = format!("{}.png", r.id());
        to_png(&r.image).save(dir.join(&file))?;
        entries.push(ManifestRecord {
            id: r.id().to_string(),
            file,
            keypoints: (0..kp.len())
                .map(|j| {
                    let [x, y] = kp.coord(j);
                    [x, y, kp.vis(j).to_coco() as f64]
                })
                .collect(),
            bbox: r.bbox,
            head_rect: r.meta.head_rect,
            area: r.meta.area,
            difficulty: r.meta.difficulty,
        });
    }
    let manifest = Manifest {
        schema: SYNTH_SCHEMA.to_string(),
        joints: STICK_JOINTS,
        image_size: generator.image_size,
        seed,
        generator: generator.clone(),
        records: entries,
        splits: None,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_synthetic(dir: &Path) -> Result<(Vec<SampleRecord>, Manifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::ingest(format!("malformed manifest {}: {e}", path.display()), None))?;
    if manifest.schema != SYNTH_SCHEMA {
        return Err(Error::ingest(format!("unsupported manifest schema {:?}", manifest.schema), None));
    }
    let mut out = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let bad = |msg: String| Error::ingest(msg, Some(rec.id.clone()));
        if rec.keypoints.len() != manifest.joints {
            return Err(bad(format!("expected {} joints, found {}", manifest.joints, rec.keypoints.len())));
        }
        let img = image::open(dir.join(&rec.file)).map_err(|e| bad(format!("cannot read {}: {e}", rec.file)))?;
        let image = from_rgb(&img.to_rgb8());
        let (_, h, w) = image.dim();
        if (h, w) != manifest.image_size {
            return Err(bad(format!("image is {h}x{w}, manifest says {:?}", manifest.image_size)));
        }
        let vis = rec
            .keypoints
            .iter()
            .map(|t| Visibility::from_coco(t[2] as i64).ok_or_else(|| bad(format!("bad visibility flag {}", t[2]))))
            .collect::<Result<Vec<_>>>()?;
        let kp = KeypointSet::new(rec.keypoints.iter().map(|t| [t[0], t[1]]).collect(), vis)
            .map_err(|e| bad(e.to_string()))?;
        out.push(SampleRecord::new(
            image,
            Some(kp),
            rec.bbox,
            SampleMeta {
                source_id: rec.id.clone(),
                head_rect: rec.head_rect,
                area: rec.area,
                difficulty: rec.difficulty,
            },
        ));
    }
    Ok((out, manifest))
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoCategory {
    #[serde(default)]
    keypoints: Vec<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    keypoints: Vec<f64>,
    bbox: [f64; 4],
    #[serde(default)]
    area: Option<f64>,
    /// `[x0, y0, x1, y1]`, an extension carried by MPII-style exports.
    #[serde(default)]
    head_rect: Option<[f64; 4]>,
}

/// Crop box around `bbox` (`[x, y, w, h]`) widened to the aspect ratio of
/// `input_size`, and the affine mapping it onto the output grid.
pub fn crop_transform(bbox: [f64; 4], input_size: (usize, usize)) -> Result<(Rect, AffineAug)> {
    let (oh, ow) = input_size;
    let [x, y, mut bw, mut bh] = bbox;
    if !(bw > 0.0 && bh > 0.0) {
        return Err(Error::param(format!("degenerate bbox {bbox:?}")));
    }
    let (cx, cy) = (x + bw / 2.0, y + bh / 2.0);
    let aspect = ow as f64 / oh as f64;
    if bw / bh > aspect {
        bh = bw / aspect;
    } else {
        bw = bh * aspect;
    }
    let crop = [[cx - bw / 2.0, cy - bh / 2.0], [cx + bw / 2.0, cy + bh / 2.0]];
    let (sx, sy) = (ow as f64 / bw, oh as f64 / bh);
    let aug = AffineAug::from_matrix([[sx, 0.0, -sx * crop[0][0]], [0.0, sy, -sy * crop[0][1]]])?;
    Ok((crop, aug))
}

/// One record per person annotation, cropped and resized to `input_size`.
pub fn load_coco_keypoints(annotation_file: &Path, image_root: &Path, input_size: (usize, usize)) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(annotation_file).map_err(|e| Error::io(annotation_file, e))?;
    let coco: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::ingest(format!("malformed COCO file {}: {e}", annotation_file.display()), None))?;
    let k = coco
        .categories
        .first()
        .map(|c| c.keypoints.len())
        .filter(|&n| n > 0)
        .unwrap_or(17);
    let files: HashMap<u64, &str> = coco.images.iter().map(|i| (i.id, i.file_name.as_str())).collect();
    let mut decoded: HashMap<u64, Array3<f32>> = HashMap::new();
    let mut out = Vec::new();
    for ann in &coco.annotations {
        let rid = ann.id.to_string();
        if ann.keypoints.len() != 3 * k {
            log::warn!("skipping annotation {rid}: {} keypoint values, expected {}", ann.keypoints.len(), 3 * k);
            continue;
        }
        let file = files
            .get(&ann.image_id)
            .ok_or_else(|| Error::ingest(format!("unknown image id {}", ann.image_id), Some(rid.clone())))?;
        if !decoded.contains_key(&ann.image_id) {
            let img = image::open(image_root.join(file))
                .map_err(|e| Error::ingest(format!("cannot read image {file}: {e}"), Some(rid.clone())))?;
            decoded.insert(ann.image_id, from_rgb(&img.to_rgb8()));
        }
        let full = &decoded[&ann.image_id];
        let (crop, aug) = crop_transform(ann.bbox, input_size).map_err(|e| Error::ingest(e.to_string(), Some(rid.clone())))?;
        let image = warp_planes(full, &aug, input_size)?;
        let mut coords = Vec::with_capacity(k);
        let mut vis = Vec::with_capacity(k);
        for t in ann.keypoints.chunks(3) {
            let v = Visibility::from_coco(t[2] as i64)
                .ok_or_else(|| Error::ingest(format!("bad visibility flag {}", t[2]), Some(rid.clone())))?;
            coords.push(aug.apply([t[0], t[1]]));
            vis.push(v);
        }
        let kp = KeypointSet::new(coords, vis).map_err(|e| Error::ingest(e.to_string(), Some(rid.clone())))?;
        let area_scale = aug.matrix[0][0] * aug.matrix[1][1];
        let area = ann.area.unwrap_or(ann.bbox[2] * ann.bbox[3]) * area_scale;
        let head_rect = ann.head_rect.map(|r| [aug.apply([r[0], r[1]]), aug.apply([r[2], r[3]])]);
        let keypoints = (kp.labeled_count() > 0).then_some(kp.clone());
        let mut record = SampleRecord::new(
            image,
            keypoints,
            crop,
            SampleMeta {
                source_id: rid,
                head_rect,
                area: Some(area),
                difficulty: Difficulty::Clean,
            },
        );
        if record.keypoints.is_none() {
            record.sealed = Some(SealedAnnotation(kp));
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> Vec<SampleRecord> {
        generate_stick_figures(n, &StickFigureConfig::default(), seed).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(6, 3), small(6, 3));
        assert_ne!(small(2, 3)[0].image, small(2, 4)[0].image);
    }

    #[test]
    fn joints_stay_inside_the_image() {
        for r in small(200, 11) {
            let kp = r.keypoints.unwrap();
            assert_eq!(kp.len(), STICK_JOINTS);
            for &[x, y] in kp.coords() {
                assert!((0.0..=63.0).contains(&x) && (0.0..=63.0).contains(&y), "{x},{y}");
            }
        }
    }

    #[test]
    fn no_occlusion_means_all_visible() {
        let cfg = StickFigureConfig { occlusion_frac: 0.0, ..Default::default() };
        for r in generate_stick_figures(100, &cfg, 5).unwrap() {
            assert_eq!(r.keypoints.unwrap().visible_joints().len(), STICK_JOINTS);
        }
        let all = StickFigureConfig { occlusion_frac: 1.0, low_contrast_frac: 0.0, ..Default::default() };
        let occluded = generate_stick_figures(50, &all, 5).unwrap();
        assert!(occluded.iter().any(|r| r.keypoints.as_ref().unwrap().visible_joints().len() < STICK_JOINTS));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let spec = SplitSpec { labeled_count: 4, seed: 9, source: "synth".into() };
        let (l1, u1) = make_split(small(10, 1), &spec).unwrap();
        let (l2, u2) = make_split(small(10, 1), &spec).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(u1, u2);
        assert_eq!((l1.len(), u1.len()), (4, 6));
        let mut ids: Vec<&str> = l1.iter().chain(&u1).map(|r| r.id()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(u1.iter().all(|r| r.keypoints.is_none() && r.sealed().is_some()));
    }

    #[test]
    fn split_boundaries() {
        let spec = |n| SplitSpec { labeled_count: n, seed: 0, source: "synth".into() };
        let (l, u) = make_split(small(5, 2), &spec(5)).unwrap();
        assert_eq!((l.len(), u.len()), (5, 0));
        let (l, u) = make_split(small(5, 2), &spec(0)).unwrap();
        assert_eq!((l.len(), u.len()), (0, 5));
        assert!(matches!(make_split(small(5, 2), &spec(6)), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn normalisation_round_trips_bytes() {
        for p in 0..=255u8 {
            assert_eq!(denormalize_u8(normalize_u8(p)), p);
        }
    }

    #[test]
    fn crop_maps_bbox_corners_to_the_border() {
        let (crop, aug) = crop_transform([100.0, 50.0, 60.0, 120.0], (256, 192)).unwrap();
        // 60x120 widened to the 3:4 aspect
        assert!((crop[1][0] - crop[0][0] - 90.0).abs() < 1e-9);
        let corner = aug.apply([100.0, 50.0]);
        assert!(corner[1].abs() < 1.0);
        let far = aug.apply([160.0, 170.0]);
        assert!((far[1] - 256.0).abs() < 1.0);
        let back = aug.inverse().unwrap().apply(aug.apply([123.4, 77.7]));
        assert!((back[0] - 123.4).abs() < 0.5 && (back[1] - 77.7).abs() < 0.5);
    }
}

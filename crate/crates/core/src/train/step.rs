//! One semi-supervised training step.
//!
//! A step is split into [`Trainer::prepare`], which runs the teacher and draws
//! every augmentation, and [`Trainer::loss_and_grad`], which evaluates the
//! weighted loss and its gradient with the prepared targets held fixed. The
//! split is what lets gradient checks treat pseudo-heatmaps as constants.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{warp_image, warp_planes, AffineAug};
use crate::heatmap::{decode_peaks, synthesize_targets, HeatmapStack, KeypointSet, Visibility};
use crate::losses::{masked_mse_grad, total_loss, LossBundle};
use crate::masking::{allocate_mask_count, apply_keypoint_masks, random_mask_count, MaskBudget};
use crate::mixup::{mix_point, mixed_consistency_loss_grad, MixupSpec};
use crate::nn::{Adam, Backbone, ParamStore, Real};

/// Independent random streams; each branch draws only from its own, so
/// enabling one branch never perturbs another's augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stream {
    Supervised = 1,
    Teacher = 2,
    Student = 3,
    Mask = 4,
    Mixup = 5,
    MaskCount = 6,
}

pub(crate) fn stream_rng(seed: u64, global_step: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((global_step << 4) | stream as u64);
    rng
}

/// Per-epoch shuffling stream, disjoint from every step stream.
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - epoch as u64);
    rng
}

/// What the trainer may see of a labeled record.
#[derive(Debug, Clone, Copy)]
pub struct LabeledView<'a> {
    pub id: &'a str,
    pub image: &'a Array3<f32>,
    pub keypoints: &'a KeypointSet,
}

/// What the trainer may see of an unlabeled record: the image only.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    pub id: &'a str,
    pub image: &'a Array3<f32>,
    /// Position in the unlabeled pool, used to look up static pseudo-labels.
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPosition {
    /// 1-based epoch.
    pub epoch: usize,
    /// 0-based step within the epoch.
    pub step: usize,
    pub steps_per_epoch: usize,
    pub global_step: u64,
}

#[derive(Debug, Clone)]
pub struct Branch<T> {
    pub images: Array4<T>,
    pub targets: Array4<T>,
    pub joint_mask: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct MixBranch<T> {
    pub images: Array4<T>,
    pub pseudo_i: Array4<T>,
    pub pseudo_j: Array4<T>,
    pub spec: MixupSpec,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub batch_ids: Vec<String>,
    pub budgets: Vec<MaskBudget>,
    pub masked_joints: Vec<Vec<usize>>,
    pub mean_pseudo_responsiveness: Option<f64>,
    pub mixup: Option<MixupSpec>,
    pub lr: f64,
}

/// Everything a step's loss depends on besides the parameters.
#[derive(Debug, Clone)]
pub struct PreparedStep<T> {
    pub supervised: Branch<T>,
    pub student: Option<Branch<T>>,
    pub mixup: Option<MixBranch<T>>,
    pub lambda_u: f64,
    pub lambda_m: f64,
    pub diagnostics: StepDiagnostics,
}

/// Parameters, optimizer state and the optional frozen teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub frozen: Option<ParamStore<f32>>,
}

fn stack<T: Real>(images: &[Array3<f32>]) -> Array4<T> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<T>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).zip_mut_with(img, |o, &v| *o = T::lit(v as f64));
    }
    out
}

fn to_f32<T: Real>(x: &Array4<T>) -> Array4<f32> {
    x.mapv(|v| v.as_f64() as f32)
}

fn from_f32<T: Real>(x: &Array4<f32>) -> Array4<T> {
    x.mapv(|v| T::lit(v as f64))
}

/// Builds the network and carries the fixed geometry of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    backbone: Backbone,
    stride: f64,
    heat: (usize, usize),
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone())?;
        let stride = config.backbone.stride()?;
        let heat = config.backbone.output_size()?;
        Ok(Self {
            config,
            backbone,
            stride,
            heat,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn init_state(&self) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let params: ParamStore<f32> = self.backbone.init_params(&mut rng);
        let adam = Adam::new(self.config.train.adam, &params);
        TrainState {
            params,
            adam,
            frozen: None,
        }
    }

    /// Linear warmup factor of the unsupervised weights.
    fn ramp(&self, pos: &StepPosition) -> f64 {
        let r = self.config.train.rampup_epochs;
        if r <= 0.0 {
            return 1.0;
        }
        let progress = (pos.epoch.saturating_sub(1)) as f64 + (pos.step + 1) as f64 / pos.steps_per_epoch.max(1) as f64;
        (progress / r).min(1.0)
    }

    /// Effective `(lambda_u, lambda_m)` at `pos`.
    pub fn effective_lambdas(&self, pos: &StepPosition, frozen_active: bool) -> (f64, f64) {
        let cfg = &self.config;
        let ramp = self.ramp(pos);
        let lambda_u = match cfg.method {
            Method::Supervised => 0.0,
            Method::PseudoPose if frozen_active => cfg.train.lambda_u,
            Method::PseudoPose => 0.0,
            _ => cfg.train.lambda_u * ramp,
        };
        let lambda_m = if cfg.method.uses_mixup() && cfg.mixup.enabled {
            cfg.mixup.lambda_m * ramp
        } else {
            0.0
        };
        (lambda_u, lambda_m)
    }

    fn supervised_branch<T: Real>(&self, labeled: &[LabeledView<'_>], pos: &StepPosition) -> Result<Branch<T>> {
        if labeled.is_empty() {
            return Err(Error::param("a training step needs at least one labeled sample"));
        }
        let cfg = &self.config;
        let mut rng = stream_rng(cfg.seed, pos.global_step, Stream::Supervised);
        let input = cfg.backbone.input_size;
        let k = self.backbone.out_joints();
        let (hh, hw) = self.heat;
        let mut images = Vec::with_capacity(labeled.len());
        let mut targets = Array4::<T>::zeros((labeled.len(), k, hh, hw));
        let mut mask = Array2::from_elem((labeled.len(), k), false);
        for (i, view) in labeled.iter().enumerate() {
            if view.keypoints.len() != k {
                return Err(Error::param(format!(
                    "sample {} has {} joints, the network predicts {k}",
                    view.id,
                    view.keypoints.len()
                )));
            }
            let aug = cfg.aug.weak.sample(&mut rng, input);
            images.push(warp_image(view.image, &aug)?);
            let kp = aug.transform_keypoints(view.keypoints);
            let t = synthesize_targets(&kp, cfg.heatmap.sigma, self.heat, self.stride)?;
            targets
                .slice_mut(s![i, .., .., ..])
                .zip_mut_with(t.as_array(), |o, &v| *o = T::lit(v as f64));
            for j in 0..k {
                let [x, y] = kp.coord(j);
                let (u, v) = ((x / self.stride).round(), (y / self.stride).round());
                let on_grid = u >= 0.0 && v >= 0.0 && u < hw as f64 && v < hh as f64;
                mask[[i, j]] = kp.vis(j).is_labeled() && on_grid;
            }
        }
        Ok(Branch {
            images: stack(&images),
            targets,
            joint_mask: mask,
        })
    }

    /// Runs the teacher and draws every augmentation for one step.
    pub fn prepare<T: Real>(
        &self,
        params: &ParamStore<T>,
        labeled: &[LabeledView<'_>],
        unlabeled: &[UnlabeledView<'_>],
        frozen_pseudo: Option<&[Array3<f32>]>,
        pos: &StepPosition,
    ) -> Result<PreparedStep<T>> {
        let cfg = &self.config;
        let supervised = self.supervised_branch(labeled, pos)?;
        let mut diagnostics = StepDiagnostics {
            batch_ids: labeled.iter().map(|v| v.id.to_string()).collect(),
            lr: cfg.train.lr_at(pos.epoch),
            ..Default::default()
        };
        let frozen_active = cfg.method == Method::PseudoPose && frozen_pseudo.is_some();
        let (lambda_u, lambda_m) = self.effective_lambdas(pos, frozen_active);
        let student_active = cfg.method.masks() || frozen_active;
        if !student_active || unlabeled.is_empty() {
            return Ok(PreparedStep {
                supervised,
                student: None,
                mixup: None,
                lambda_u,
                lambda_m: 0.0,
                diagnostics,
            });
        }
        diagnostics.batch_ids.extend(unlabeled.iter().map(|v| v.id.to_string()));

        let input = cfg.backbone.input_size;
        let (ih, iw) = input;
        let k = self.backbone.out_joints();
        let n = unlabeled.len();

        // teacher: weak view through the shared network, or the frozen labels
        let mut teacher_rng = stream_rng(cfg.seed, pos.global_step, Stream::Teacher);
        let mut weak_augs = Vec::with_capacity(n);
        let mut weak_views = Vec::with_capacity(n);
        let teacher: Array4<f32> = match frozen_pseudo {
            Some(cache) if frozen_active => {
                let mut out = Array4::<f32>::zeros((n, k, self.heat.0, self.heat.1));
                for (i, v) in unlabeled.iter().enumerate() {
                    out.slice_mut(s![i, .., .., ..]).assign(&cache[v.index]);
                    weak_augs.push(AffineAug::identity());
                }
                out
            }
            _ => {
                for v in unlabeled {
                    let aug = cfg.aug.weak.sample(&mut teacher_rng, input);
                    weak_views.push(warp_image(v.image, &aug)?);
                    weak_augs.push(aug);
                }
                let x: Array4<T> = stack(&weak_views);
                to_f32(&self.backbone.forward(params, &x)?)
            }
        };

        let mut student_rng = stream_rng(cfg.seed, pos.global_step, Stream::Student);
        let mut mask_rng = stream_rng(cfg.seed, pos.global_step, Stream::Mask);
        let mut count_rng = stream_rng(cfg.seed, pos.global_step, Stream::MaskCount);
        let mut student_images = Vec::with_capacity(n);
        let mut pseudo = Array4::<T>::zeros((n, k, self.heat.0, self.heat.1));
        let mut valid = Array2::from_elem((n, k), true);
        let mut resp_sum = 0.0;
        for (i, v) in unlabeled.iter().enumerate() {
            let stack_i = HeatmapStack::new(teacher.index_axis(Axis(0), i).to_owned(), v.id)?;
            let resp: Vec<f64> = stack_i
                .as_array()
                .outer_iter()
                .map(|m| m.fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64)
                .collect();
            resp_sum += resp.iter().sum::<f64>() / k as f64;

            let strong = cfg.aug.strong.sample(&mut student_rng, input);
            let rel = strong.compose(&weak_augs[i].inverse()?)?;
            let warped = warp_planes(stack_i.as_array(), &rel.to_heatmap_frame(self.stride)?, self.heat)?;
            pseudo
                .slice_mut(s![i, .., .., ..])
                .zip_mut_with(&warped, |o, &p| *o = T::lit(p as f64));

            let mut kp = rel.transform_keypoints(&decode_peaks(&stack_i, self.stride));
            for j in 0..k {
                let [x, y] = kp.coord(j);
                if !(x >= 0.0 && y >= 0.0 && x <= (iw - 1) as f64 && y <= (ih - 1) as f64) {
                    kp.set_visibility(j, Visibility::NotLabeled);
                    valid[[i, j]] = false;
                }
            }
            let budget = match cfg.method {
                Method::Adaptive | Method::AdaptiveMixup => allocate_mask_count(&resp, &cfg.mask)?,
                Method::Single => random_mask_count(&cfg.mask, &mut count_rng),
                _ => MaskBudget::fixed(0),
            };
            let strong_view = warp_image(v.image, &strong)?;
            let (masked, chosen) = apply_keypoint_masks(&strong_view, &kp, &budget, &cfg.mask, &mut mask_rng);
            student_images.push(masked);
            diagnostics.budgets.push(budget);
            diagnostics.masked_joints.push(chosen);
        }
        diagnostics.mean_pseudo_responsiveness = Some(resp_sum / n as f64);
        let student = Branch {
            images: stack(&student_images),
            targets: pseudo,
            joint_mask: valid,
        };

        let mixup = if lambda_m > 0.0 && !weak_views.is_empty() {
            let mut rng = stream_rng(cfg.seed, pos.global_step, Stream::Mixup);
            let spec = MixupSpec::sample(&cfg.mixup, &self.backbone, n, &mut rng)?;
            let pseudo_i: Array4<T> = from_f32(&teacher);
            let pseudo_j = pseudo_i.select(Axis(0), &spec.partner);
            diagnostics.mixup = Some(spec.clone());
            Some(MixBranch {
                images: stack(&weak_views),
                pseudo_i,
                pseudo_j,
                spec,
            })
        } else {
            None
        };

        let lambda_m = if mixup.is_some() { lambda_m } else { 0.0 };
        Ok(PreparedStep {
            supervised,
            student: Some(student),
            mixup,
            lambda_u,
            lambda_m,
            diagnostics,
        })
    }

    /// Weighted loss and, when `with_grad`, its gradient with respect to
    /// `params`. The returned bundle's `total` is exactly the differentiated
    /// scalar.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &ParamStore<T>,
        prep: &PreparedStep<T>,
        with_grad: bool,
    ) -> Result<(LossBundle, Option<ParamStore<T>>)> {
        let bb = &self.backbone;
        let mut grads = with_grad.then(|| params.zeros_like());

        let mut masked_branch = |branch: &Branch<T>, weight: f64| -> Result<f64> {
            let need = with_grad && weight > 0.0;
            let (out, trace) = bb.forward_traced(params, &branch.images, None)?;
            let (loss, dout) = masked_mse_grad(out.view(), branch.targets.view(), branch.joint_mask.view(), need)?;
            if let (Some(g), Some(d)) = (grads.as_mut(), dout) {
                bb.backward(params, trace, d * T::lit(weight), g);
            }
            Ok(loss.value.as_f64())
        };
        let l_s = masked_branch(&prep.supervised, 1.0)?;
        let l_u = match &prep.student {
            Some(b) => masked_branch(b, prep.lambda_u)?,
            None => 0.0,
        };
        let l_m = match &prep.mixup {
            Some(m) => {
                let need = with_grad && prep.lambda_m > 0.0;
                let point = mix_point::<T>(bb, &m.spec)?;
                let (out, trace) = bb.forward_traced(params, &m.images, Some(&point))?;
                let (loss, dout) =
                    mixed_consistency_loss_grad(out.view(), m.pseudo_i.view(), m.pseudo_j.view(), point.alpha, need)?;
                if let (Some(g), Some(d)) = (grads.as_mut(), dout) {
                    bb.backward(params, trace, d * T::lit(prep.lambda_m), g);
                }
                loss.as_f64()
            }
            None => 0.0,
        };
        Ok((total_loss(l_s, l_u, l_m, prep.lambda_u, prep.lambda_m), grads))
    }

    /// Prepares, differentiates and applies one optimizer update.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        labeled: &[LabeledView<'_>],
        unlabeled: &[UnlabeledView<'_>],
        frozen_pseudo: Option<&[Array3<f32>]>,
        pos: &StepPosition,
    ) -> Result<(LossBundle, StepDiagnostics)> {
        let prep = self.prepare(&state.params, labeled, unlabeled, frozen_pseudo, pos)?;
        let (bundle, grads) = self.loss_and_grad(&state.params, &prep, true)?;
        let grads = grads.expect("gradient requested");
        let finite = [bundle.l_s, bundle.l_u, bundle.l_m, bundle.total].iter().all(|v| v.is_finite());
        if !finite || grads.iter_flat().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                epoch: pos.epoch,
                step: pos.step,
                batch_ids: prep.diagnostics.batch_ids.clone(),
                dump: None,
            });
        }
        state.adam.update(&mut state.params, &grads, prep.diagnostics.lr);
        Ok((bundle, prep.diagnostics))
    }
}

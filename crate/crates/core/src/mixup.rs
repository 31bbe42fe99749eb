//! Sample- and feature-level mixup for the second strong-augmentation branch.
//!
//! A batch is mixed with a permutation of itself using one coefficient per
//! step; the same coefficient weights the two consistency terms against the
//! teacher's pseudo-heatmaps of each partner.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Array4, ArrayView, ArrayView4, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{Backbone, MixPoint, ParamStore, Real};

/// Network boundary at which activations are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixupLocation {
    /// Image-level mixup.
    Input,
    /// Before stage `k` (1-based).
    Stage(usize),
    /// Before the final 1x1 head.
    PreHead,
}

impl fmt::Display for MixupLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixupLocation::Input => f.write_str("input"),
            MixupLocation::Stage(k) => write!(f, "stage-{k}"),
            MixupLocation::PreHead => f.write_str("pre-head"),
        }
    }
}

impl FromStr for MixupLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(MixupLocation::Input),
            "pre-head" => Ok(MixupLocation::PreHead),
            _ => s
                .strip_prefix("stage-")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(MixupLocation::Stage)
                .ok_or_else(|| Error::param(format!("unknown mixup location {s:?}"))),
        }
    }
}

impl Serialize for MixupLocation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MixupLocation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub enabled: bool,
    /// Shape parameter `a` of the symmetric Beta(a, a) the coefficient is drawn from.
    pub beta_a: f64,
    /// A fixed location name, or `"random"` for a per-step draw.
    pub location: String,
    pub lambda_m: f64,
    /// Lets `"random"` also pick the pre-head boundary.
    pub allow_late_stages: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            beta_a: 0.75,
            location: "stage-3".into(),
            lambda_m: 1.0,
            allow_late_stages: false,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0) {
            return Err(Error::param("mixup.beta_a must be positive"));
        }
        if self.lambda_m < 0.0 {
            return Err(Error::param("mixup.lambda_m must be non-negative"));
        }
        if self.location != "random" {
            self.location.parse::<MixupLocation>()?;
        }
        Ok(())
    }

    /// Candidate locations for this config on `backbone`.
    pub fn candidates(&self, backbone: &Backbone) -> Result<Vec<MixupLocation>> {
        if self.location != "random" {
            let loc: MixupLocation = self.location.parse()?;
            backbone.location_index(loc)?;
            return Ok(vec![loc]);
        }
        let mut locs = vec![MixupLocation::Input, MixupLocation::Stage(1), MixupLocation::Stage(3)];
        if self.allow_late_stages {
            locs.push(MixupLocation::PreHead);
        }
        let valid: Vec<_> = locs
            .into_iter()
            .filter(|&l| backbone.location_index(l).is_ok())
            .collect();
        if valid.is_empty() {
            return Err(Error::param("no valid random mixup location for this backbone"));
        }
        Ok(valid)
    }
}

/// One step's mixing draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupSpec {
    pub alpha: f64,
    pub partner: Vec<usize>,
    pub location: MixupLocation,
}

impl MixupSpec {
    /// Draws alpha from Beta(a, a), a uniform shuffle of `0..batch`, and a location.
    pub fn sample<R: Rng + ?Sized>(
        config: &MixupConfig,
        backbone: &Backbone,
        batch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let beta = Beta::new(config.beta_a, config.beta_a)
            .map_err(|e| Error::param(format!("bad beta parameter: {e}")))?;
        let alpha = beta.sample(rng).clamp(0.0, 1.0);
        let mut partner: Vec<usize> = (0..batch).collect();
        partner.shuffle(rng);
        let candidates = config.candidates(backbone)?;
        let location = candidates[rng.random_range(0..candidates.len())];
        Ok(Self {
            alpha,
            partner,
            location,
        })
    }
}

/// `alpha * a + (1 - alpha) * b`, elementwise.
pub fn mix_tensors<T: Real, D: Dimension>(a: ArrayView<'_, T, D>, b: ArrayView<'_, T, D>, alpha: T) -> Result<Array<T, D>> {
    if a.shape() != b.shape() {
        return Err(Error::param(format!("cannot mix shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::param(format!("mixing coefficient {alpha} outside [0,1]")));
    }
    let beta = T::one() - alpha;
    Ok(Zip::from(&a).and(&b).map_collect(|&x, &y| alpha * x + beta * y))
}

/// Forward pass with activations mixed against `spec.partner` at `spec.location`.
pub fn forward_with_mixup<T: Real>(
    backbone: &Backbone,
    params: &ParamStore<T>,
    batch: &Array4<T>,
    spec: &MixupSpec,
) -> Result<Array4<T>> {
    let point = mix_point(backbone, spec)?;
    backbone.forward_mixed(params, batch, &point)
}

pub(crate) fn mix_point<T: Real>(backbone: &Backbone, spec: &MixupSpec) -> Result<MixPoint<T>> {
    Ok(MixPoint {
        block: backbone.location_index(spec.location)?,
        alpha: T::lit(spec.alpha),
        partner: spec.partner.clone(),
    })
}

fn check_shapes<T>(a: &ArrayView4<'_, T>, b: &ArrayView4<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::param(format!(
            "heatmap batch shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `alpha * mean((pred - pseudo_i)^2) + (1 - alpha) * mean((pred - pseudo_j)^2)`,
/// with means over batch, joints and cells.
pub fn mixed_consistency_loss<T: Real>(
    pred_mixed: ArrayView4<'_, T>,
    pseudo_i: ArrayView4<'_, T>,
    pseudo_j: ArrayView4<'_, T>,
    alpha: T,
) -> Result<T> {
    Ok(mixed_consistency_loss_grad(pred_mixed, pseudo_i, pseudo_j, alpha, false)?.0)
}

/// As [`mixed_consistency_loss`], also returning d loss / d pred when `with_grad`.
pub fn mixed_consistency_loss_grad<T: Real>(
    pred: ArrayView4<'_, T>,
    pseudo_i: ArrayView4<'_, T>,
    pseudo_j: ArrayView4<'_, T>,
    alpha: T,
    with_grad: bool,
) -> Result<(T, Option<Array4<T>>)> {
    check_shapes(&pred, &pseudo_i)?;
    check_shapes(&pred, &pseudo_j)?;
    let n = T::lit(pred.len().max(1) as f64);
    let beta = T::one() - alpha;
    let mut si = T::zero();
    let mut sj = T::zero();
    Zip::from(&pred).and(&pseudo_i).and(&pseudo_j).for_each(|&p, &a, &b| {
        si = si + (p - a) * (p - a);
        sj = sj + (p - b) * (p - b);
    });
    let loss = alpha * (si / n) + beta * (sj / n);
    let grad = with_grad.then(|| {
        let two = T::lit(2.0);
        Zip::from(&pred)
            .and(&pseudo_i)
            .and(&pseudo_j)
            .map_collect(|&p, &a, &b| two * (alpha * (p - a) + beta * (p - b)) / n)
    });
    Ok((loss, grad))
}

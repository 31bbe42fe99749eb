use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::config::Protocol;
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::heatmap::{decode_with_scores, HeatmapStack, KeypointSet};
use crate::metrics::{
    average_precision, coco_thresholds, oks, pck, ApResult, OksParams, PckParams, PckResult, ScaleRef, ScaleSource,
    COCO_SIGMAS, SYNTHETIC_SIGMA,
};
use crate::nn::{Backbone, ParamStore};

/// Network outputs for `images`, in order, computed `batch` at a time.
pub fn predict_heatmaps(
    backbone: &Backbone,
    params: &ParamStore<f32>,
    images: &[&Array3<f32>],
    batch: usize,
) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let (c, h, w) = chunk[0].dim();
        let mut x = Array4::<f32>::zeros((chunk.len(), c, h, w));
        for (i, img) in chunk.iter().enumerate() {
            x.slice_mut(s![i, .., .., ..]).assign(*img);
        }
        let y = backbone.forward(params, &x)?;
        out.extend(y.outer_iter().map(|m| m.to_owned()));
    }
    Ok(out)
}

/// Mean over samples of the mean per-joint peak value.
pub fn mean_responsiveness(maps: &[Array3<f32>]) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    let per: f64 = maps
        .iter()
        .map(|m| {
            let peaks: Vec<f64> = m.outer_iter().map(|p| p.fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64).collect();
            peaks.iter().sum::<f64>() / peaks.len().max(1) as f64
        })
        .sum();
    per / maps.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub ap: Option<ApResult>,
    pub pck: Option<PckResult>,
    pub mean_responsiveness: f64,
}

fn oks_params(k: usize, record: &SampleRecord) -> Result<OksParams> {
    let sigmas = if k == 17 { COCO_SIGMAS.to_vec() } else { vec![SYNTHETIC_SIGMA; k] };
    let area = record.meta.area.unwrap_or_else(|| {
        let b = record.bbox;
        (b[1][0] - b[0][0]) * (b[1][1] - b[0][1])
    });
    OksParams::new(sigmas, area)
}

/// Decodes every annotated record and scores the predictions. PCK is only
/// computed when every record carries a head rectangle.
pub fn evaluate_records(
    backbone: &Backbone,
    params: &ParamStore<f32>,
    records: &[SampleRecord],
    stride: f64,
    pck_threshold: f64,
    batch: usize,
) -> Result<EvalReport> {
    let k = backbone.out_joints();
    let scored: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| r.keypoints.as_ref().is_some_and(|kp| kp.labeled_count() > 0))
        .collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("no annotated records to evaluate".into()));
    }
    for r in &scored {
        let n = r.keypoints.as_ref().map_or(0, |kp| kp.len());
        if n != k {
            return Err(Error::param(format!(
                "record {} has {n} joints but the network predicts {k}",
                r.id()
            )));
        }
    }
    let images: Vec<&Array3<f32>> = scored.iter().map(|r| &r.image).collect();
    let maps = predict_heatmaps(backbone, params, &images, batch)?;
    let mut preds: Vec<KeypointSet> = Vec::with_capacity(maps.len());
    let mut instances = Vec::with_capacity(maps.len());
    for (r, m) in scored.iter().zip(&maps) {
        let stack = HeatmapStack::new(m.clone(), r.id())?;
        let (pred, scores) = decode_with_scores(&stack, stride);
        let gt = r.keypoints.as_ref().expect("filtered above");
        let score = scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64;
        instances.push((score, oks(&pred, gt, &oks_params(k, r)?)?));
        preds.push(pred);
    }
    let ap = Some(average_precision(&instances, &coco_thresholds())?);
    let gts: Vec<KeypointSet> = scored.iter().map(|r| r.keypoints.clone().expect("filtered above")).collect();
    let pck = if scored.iter().all(|r| r.meta.head_rect.is_some()) {
        let scales: Vec<ScaleRef> = scored
            .iter()
            .map(|r| ScaleRef {
                head_rect: r.meta.head_rect,
                bbox: Some(r.bbox),
            })
            .collect();
        let params = PckParams {
            threshold: pck_threshold,
            scale_source: ScaleSource::HeadDiameter,
        };
        Some(pck(&preds, &gts, &scales, &params)?)
    } else {
        None
    };
    Ok(EvalReport {
        count: scored.len(),
        ap,
        pck,
        mean_responsiveness: mean_responsiveness(&maps),
    })
}

/// The JSON document produced by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub protocol: Protocol,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<ApResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pck: Option<PckResult>,
    pub mean_responsiveness: f64,
}

/// Full evaluation under one protocol. PCK needs head rectangles on every
/// record.
pub fn evaluate(
    backbone: &Backbone,
    params: &ParamStore<f32>,
    records: &[SampleRecord],
    stride: f64,
    protocol: Protocol,
    pck_threshold: f64,
) -> Result<MetricsJson> {
    let report = evaluate_records(backbone, params, records, stride, pck_threshold, 32)?;
    match protocol {
        Protocol::Oks => Ok(MetricsJson {
            protocol,
            count: report.count,
            ap: report.ap,
            pck: None,
            mean_responsiveness: report.mean_responsiveness,
        }),
        Protocol::Pck => {
            let pck = report
                .pck
                .ok_or_else(|| Error::param("the pck protocol needs a head rectangle on every record"))?;
            Ok(MetricsJson {
                protocol,
                count: report.count,
                ap: None,
                pck: Some(pck),
                mean_responsiveness: report.mean_responsiveness,
            })
        }
    }
}

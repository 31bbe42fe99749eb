use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{DataSource, Method, Protocol, TrainConfig};
use super::eval::{evaluate_records, mean_responsiveness, predict_heatmaps, EvalReport};
use super::step::{epoch_rng, LabeledView, StepPosition, Trainer, TrainState, UnlabeledView};
use crate::data::{generate_stick_figures, load_coco_keypoints, load_synthetic, make_split, Difficulty, SampleRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::plot::emit_plots;

/// Training, unlabeled and validation records for one run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub labeled: Vec<SampleRecord>,
    pub unlabeled: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("data.{key} is required for this source")))
}

impl RunData {
    /// Resolves and splits the datasets named by `config.data`.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let d = &config.data;
        let input = config.backbone.input_size;
        let (train, val, source) = match d.source {
            DataSource::Synthetic => (
                generate_stick_figures(d.train_count, &d.generator, d.synth_seed)?,
                generate_stick_figures(d.val_count, &d.generator, d.val_seed)?,
                "synthetic",
            ),
            DataSource::Manifest => (
                load_synthetic(required(&d.dir, "dir")?)?.0,
                load_synthetic(required(&d.val_dir, "val_dir")?)?.0,
                "manifest",
            ),
            DataSource::Coco => (
                load_coco_keypoints(required(&d.annotations, "annotations")?, required(&d.images, "images")?, input)?,
                load_coco_keypoints(
                    required(&d.val_annotations, "val_annotations")?,
                    required(&d.val_images, "val_images")?,
                    input,
                )?,
                "coco",
            ),
        };
        if let Some(r) = train.iter().chain(&val).find(|r| r.image_size() != input) {
            return Err(Error::ingest(
                format!("image is {:?}, the network expects {:?}", r.image_size(), input),
                Some(r.id().to_string()),
            ));
        }
        let spec = SplitSpec {
            labeled_count: d.labeled_count,
            seed: d.split_seed,
            source: source.into(),
        };
        let (labeled, unlabeled) = make_split(train, &spec)?;
        Ok(Self { labeled, unlabeled, val })
    }
}

/// One row of `metrics.csv`. Loss and lr columns are empty for the initial
/// evaluation, metric columns are empty on epochs without evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub l_s: Option<f64>,
    pub l_u: Option<f64>,
    pub l_m: Option<f64>,
    pub l_total: Option<f64>,
    pub lr: Option<f64>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar: Option<f64>,
    pub pck_total: Option<f64>,
    pub mean_responsiveness: Option<f64>,
    pub mean_mask_count: Option<f64>,
}

/// One line of `diagnostics.jsonl`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    /// Number of samples that received each mask count `0..=m`.
    pub mask_histogram: Vec<usize>,
    pub mean_mask_count: Option<f64>,
    pub extreme_fraction: Option<f64>,
    pub mean_pseudo_responsiveness: Option<f64>,
    pub mean_responsiveness: f64,
    pub responsiveness_clean: Option<f64>,
    pub responsiveness_low_contrast: Option<f64>,
    pub responsiveness_occluded: Option<f64>,
}

/// Knobs for driving `fit` from tests and tools.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Stop after this epoch as if interrupted.
    pub stop_after: Option<usize>,
    /// Skip writing plots at the end.
    pub skip_plots: bool,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>().map_err(Error::from)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<EpochDiagnostics>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Settings that may differ between an interrupted run and its resumption.
fn resume_key(cfg: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    c.train.resume = false;
    c.train.epochs = 0;
    c.out_dir = PathBuf::new();
    c
}

fn selection_metric(report: &EvalReport, protocol: Protocol) -> Option<f64> {
    match protocol {
        Protocol::Pck => report.pck.map(|p| p.total).or(report.ap.map(|a| a.ap)),
        Protocol::Oks => report.ap.map(|a| a.ap),
    }
}

struct Run<'a> {
    trainer: Trainer,
    data: &'a RunData,
    state: TrainState,
    meta: CheckpointMeta,
}

impl Run<'_> {
    fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.meta.clone();
        meta.adam_step = self.state.adam.step;
        Checkpoint {
            meta,
            params: self.state.params.clone(),
            adam: self.state.adam.clone(),
            frozen: self.state.frozen.clone(),
        }
    }

    fn evaluate(&self) -> Result<EvalReport> {
        let cfg = self.trainer.config();
        evaluate_records(
            self.trainer.backbone(),
            &self.state.params,
            &self.data.val,
            self.trainer.stride(),
            cfg.eval.pck_threshold,
            cfg.eval.batch,
        )
    }

    /// Responsiveness on the raw unlabeled pool (or the labeled set when
    /// there is none), overall and by difficulty.
    fn responsiveness(&self, diag: &mut EpochDiagnostics) -> Result<f64> {
        let pool = if self.data.unlabeled.is_empty() { &self.data.labeled } else { &self.data.unlabeled };
        let images: Vec<&Array3<f32>> = pool.iter().map(|r| &r.image).collect();
        let maps = predict_heatmaps(self.trainer.backbone(), &self.state.params, &images, self.trainer.config().eval.batch)?;
        let by = |d: Difficulty| {
            let sel: Vec<Array3<f32>> = pool
                .iter()
                .zip(&maps)
                .filter(|(r, _)| r.meta.difficulty == d)
                .map(|(_, m)| m.clone())
                .collect();
            (!sel.is_empty()).then(|| mean_responsiveness(&sel))
        };
        diag.responsiveness_clean = by(Difficulty::Clean);
        diag.responsiveness_low_contrast = by(Difficulty::LowContrast);
        diag.responsiveness_occluded = by(Difficulty::Occluded);
        Ok(mean_responsiveness(&maps))
    }

    fn frozen_pseudo(&self) -> Result<Option<Vec<Array3<f32>>>> {
        match &self.state.frozen {
            Some(frozen) => {
                let images: Vec<&Array3<f32>> = self.data.unlabeled.iter().map(|r| &r.image).collect();
                Ok(Some(predict_heatmaps(self.trainer.backbone(), frozen, &images, self.trainer.config().eval.batch)?))
            }
            None => Ok(None),
        }
    }
}

/// Trains per `config` on freshly loaded data; returns the run directory.
pub fn fit(config: &TrainConfig) -> Result<PathBuf> {
    let data = RunData::load(config)?;
    fit_with_data(config, &data, FitOptions::default())
}

/// Trains on already loaded data. Every random draw derives from
/// `config.seed` and the step counters, so resuming from `ckpt-last`
/// reproduces an uninterrupted run exactly.
pub fn fit_with_data(config: &TrainConfig, data: &RunData, opts: FitOptions) -> Result<PathBuf> {
    let trainer = Trainer::new(config.clone())?;
    if data.labeled.is_empty() {
        return Err(Error::Config("training needs at least one labeled record".into()));
    }
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let metrics_path = dir.join("metrics.csv");
    let diag_path = dir.join("diagnostics.jsonl");
    let last_path = dir.join("ckpt-last");
    let best_path = dir.join("ckpt-best");

    let resumed = if config.train.resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        if resume_key(&ck.meta.config) != resume_key(config) {
            return Err(Error::Checkpoint(format!(
                "{} was written by an incompatible configuration",
                last_path.display()
            )));
        }
        trainer.backbone().check_params(&ck.params)?;
        Some(ck)
    } else {
        None
    };

    let mut run = match resumed {
        Some(ck) => {
            let mut meta = ck.meta;
            meta.config = config.clone();
            Run {
                state: TrainState {
                    params: ck.params,
                    adam: ck.adam,
                    frozen: ck.frozen,
                },
                trainer,
                data,
                meta,
            }
        }
        None => {
            let state = trainer.init_state();
            Run {
                meta: CheckpointMeta {
                    epoch: 0,
                    global_step: 0,
                    seed: config.seed,
                    adam_step: 0,
                    best_metric: None,
                    best_epoch: None,
                    config: config.clone(),
                },
                state,
                trainer,
                data,
            }
        }
    };
    let start_epoch = run.meta.epoch + 1;
    let cfg = run.trainer.config().clone();

    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&cfg)?).map_err(|e| Error::io(&dir, e))?;

    let mut rows = if start_epoch > 1 && metrics_path.exists() {
        let mut rows = read_metrics(&metrics_path)?;
        rows.retain(|r| r.epoch < start_epoch);
        let diags: Vec<EpochDiagnostics> = read_diagnostics(&diag_path)?
            .into_iter()
            .filter(|d| d.epoch < start_epoch)
            .collect();
        let _ = fs::remove_file(&diag_path);
        for d in &diags {
            append_line(&diag_path, &serde_json::to_string(d)?)?;
        }
        rows
    } else {
        let _ = fs::remove_file(&diag_path);
        let report = run.evaluate()?;
        let mut diag = EpochDiagnostics::default();
        let resp = run.responsiveness(&mut diag)?;
        diag.mean_responsiveness = resp;
        append_line(&diag_path, &serde_json::to_string(&diag)?)?;
        run.meta.best_metric = selection_metric(&report, cfg.eval.protocol);
        run.meta.best_epoch = Some(0);
        let ck = run.checkpoint();
        ck.save(&last_path)?;
        ck.save(&best_path)?;
        vec![MetricsRow {
            epoch: 0,
            ap: report.ap.map(|a| a.ap),
            ap50: report.ap.map(|a| a.ap50),
            ap75: report.ap.map(|a| a.ap75),
            ar: report.ap.map(|a| a.ar),
            pck_total: report.pck.map(|p| p.total),
            mean_responsiveness: Some(resp),
            ..Default::default()
        }]
    };
    write_metrics(&metrics_path, &rows)?;

    let n_l = data.labeled.len();
    let n_u = data.unlabeled.len();
    let bl = cfg.train.batch_labeled.min(n_l);
    let bu = cfg.train.batch_unlabeled;
    let steps = if n_u > 0 { n_u.div_ceil(bu) } else { n_l.div_ceil(bl) };
    let freeze_after = cfg.train.epochs / 2;
    let mut frozen_pseudo = if cfg.method == Method::PseudoPose { run.frozen_pseudo()? } else { None };

    let last_epoch = match opts.stop_after {
        Some(s) => s.min(cfg.train.epochs),
        None => cfg.train.epochs,
    };
    for epoch in start_epoch..=last_epoch {
        if cfg.method == Method::PseudoPose && epoch > freeze_after && run.state.frozen.is_none() {
            run.state.frozen = Some(run.state.params.clone());
            frozen_pseudo = run.frozen_pseudo()?;
            log::info!("epoch {epoch}: teacher frozen for static pseudo-labels");
        }
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut perm_l: Vec<usize> = (0..n_l).collect();
        perm_l.shuffle(&mut rng);
        let mut perm_u: Vec<usize> = (0..n_u).collect();
        perm_u.shuffle(&mut rng);

        let m = cfg.mask.m;
        let mut diag = EpochDiagnostics {
            epoch,
            mask_histogram: vec![0; m + 1],
            ..Default::default()
        };
        let (mut sums, mut mask_total, mut mask_n, mut extreme) = ([0.0f64; 4], 0usize, 0usize, 0usize);
        let (mut pseudo_sum, mut pseudo_n) = (0.0, 0usize);
        for step in 0..steps {
            let labeled: Vec<LabeledView<'_>> = (0..bl)
                .map(|i| {
                    let r = &data.labeled[perm_l[(step * bl + i) % n_l]];
                    LabeledView {
                        id: r.id(),
                        image: &r.image,
                        keypoints: r.keypoints.as_ref().expect("labeled records carry keypoints"),
                    }
                })
                .collect();
            let unlabeled: Vec<UnlabeledView<'_>> = if cfg.method.uses_unlabeled() && n_u > 0 {
                perm_u[(step * bu).min(n_u)..((step + 1) * bu).min(n_u)]
                    .iter()
                    .map(|&i| UnlabeledView {
                        id: data.unlabeled[i].id(),
                        image: &data.unlabeled[i].image,
                        index: i,
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let pos = StepPosition {
                epoch,
                step,
                steps_per_epoch: steps,
                global_step: run.meta.global_step,
            };
            let result = run
                .trainer
                .train_step(&mut run.state, &labeled, &unlabeled, frozen_pseudo.as_deref(), &pos);
            let (bundle, sd) = match result {
                Ok(v) => v,
                Err(Error::NonFinite { epoch, step, batch_ids, .. }) => {
                    let dump = dir.join("ckpt-nan");
                    run.checkpoint().save(&dump)?;
                    log::error!("non-finite loss at epoch {epoch} step {step}; state saved to {}", dump.display());
                    return Err(Error::NonFinite {
                        epoch,
                        step,
                        batch_ids,
                        dump: Some(dump),
                    });
                }
                Err(e) => return Err(e),
            };
            run.meta.global_step += 1;
            for (s, v) in sums.iter_mut().zip([bundle.l_s, bundle.l_u, bundle.l_m, bundle.total]) {
                *s += v;
            }
            if cfg.method.masks() {
                for b in &sd.budgets {
                    diag.mask_histogram[b.count.min(m)] += 1;
                    mask_total += b.count;
                    mask_n += 1;
                    extreme += b.extreme as usize;
                }
            }
            if let Some(p) = sd.mean_pseudo_responsiveness {
                pseudo_sum += p;
                pseudo_n += 1;
            }
        }
        let mean = |s: f64| s / steps as f64;
        diag.mean_mask_count = (mask_n > 0).then(|| mask_total as f64 / mask_n as f64);
        diag.extreme_fraction = (mask_n > 0).then(|| extreme as f64 / mask_n as f64);
        diag.mean_pseudo_responsiveness = (pseudo_n > 0).then(|| pseudo_sum / pseudo_n as f64);
        let resp = run.responsiveness(&mut diag)?;
        diag.mean_responsiveness = resp;

        let mut row = MetricsRow {
            epoch,
            l_s: Some(mean(sums[0])),
            l_u: Some(mean(sums[1])),
            l_m: Some(mean(sums[2])),
            l_total: Some(mean(sums[3])),
            lr: Some(cfg.train.lr_at(epoch)),
            mean_responsiveness: Some(resp),
            mean_mask_count: diag.mean_mask_count,
            ..Default::default()
        };
        run.meta.epoch = epoch;
        if epoch % cfg.train.eval_every == 0 || epoch == cfg.train.epochs {
            let report = run.evaluate()?;
            row.ap = report.ap.map(|a| a.ap);
            row.ap50 = report.ap.map(|a| a.ap50);
            row.ap75 = report.ap.map(|a| a.ap75);
            row.ar = report.ap.map(|a| a.ar);
            row.pck_total = report.pck.map(|p| p.total);
            let metric = selection_metric(&report, cfg.eval.protocol);
            if metric.is_some_and(|v| run.meta.best_metric.is_none_or(|b| v > b)) {
                run.meta.best_metric = metric;
                run.meta.best_epoch = Some(epoch);
                run.checkpoint().save(&best_path)?;
            }
        }
        log::info!(
            "{} epoch {epoch}: loss {:.5} (s {:.5} u {:.5} m {:.5}) pck {:?} ap {:?} resp {:.3}",
            cfg.method,
            row.l_total.unwrap_or_default(),
            row.l_s.unwrap_or_default(),
            row.l_u.unwrap_or_default(),
            row.l_m.unwrap_or_default(),
            row.pck_total,
            row.ap,
            resp
        );
        rows.push(row);
        write_metrics(&metrics_path, &rows)?;
        append_line(&diag_path, &serde_json::to_string(&diag)?)?;
        run.checkpoint().save(&last_path)?;
    }

    if !opts.skip_plots && opts.stop_after.is_none() {
        if let Err(e) = emit_plots(std::slice::from_ref(&dir), &dir.join("plots")) {
            log::warn!("could not write plots: {e}");
        }
    }
    Ok(dir)
}

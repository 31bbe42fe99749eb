use std::fs;
use std::path::{Path, PathBuf};

use adaptmask::plot::emit_plots;
use adaptmask::train::{fit_with_data, FitOptions, Method, RunData, TrainConfig};

fn run(method: Method, dir: &Path, epochs: usize) -> PathBuf {
    let mut cfg = TrainConfig::default();
    cfg.method = method;
    cfg.out_dir = dir.to_path_buf();
    cfg.data.labeled_count = 8;
    cfg.data.train_count = 24;
    cfg.data.val_count = 8;
    cfg.train.epochs = epochs;
    let data = RunData::load(&cfg).unwrap();
    let opts = FitOptions {
        skip_plots: true,
        ..Default::default()
    };
    fit_with_data(&cfg, &data, opts).unwrap()
}

fn names(files: &[PathBuf]) -> Vec<String> {
    files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect()
}

#[test]
fn one_run_gives_loss_and_accuracy_charts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run(Method::Supervised, &tmp.path().join("sup"), 2);
    let files = emit_plots(&[dir], &tmp.path().join("plots")).unwrap();
    let names = names(&files);
    assert!(names.contains(&"loss.svg".into()) && names.contains(&"ap.svg".into()), "{names:?}");
    for f in &files {
        assert!(fs::read_to_string(f).unwrap().contains("<svg"));
    }
}

#[test]
fn two_runs_share_charts_with_method_legends() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(Method::Single, &tmp.path().join("single"), 2);
    let b = run(Method::Adaptive, &tmp.path().join("adaptive"), 2);
    let files = emit_plots(&[a, b], &tmp.path().join("plots")).unwrap();
    let loss = fs::read_to_string(tmp.path().join("plots/loss.svg")).unwrap();
    assert!(loss.contains("single") && loss.contains("adaptive"));
    let names = names(&files);
    assert!(names.contains(&"mask_hist_single.svg".into()) && names.contains(&"mask_hist_adaptive.svg".into()));
}

#[test]
fn single_epoch_series_render() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run(Method::Adaptive, &tmp.path().join("one"), 1);
    let files = emit_plots(&[dir], &tmp.path().join("plots")).unwrap();
    assert!(names(&files).contains(&"loss.svg".into()));
}

#[test]
fn empty_csv_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("empty");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("metrics.csv"), "").unwrap();
    let out = tmp.path().join("plots");
    assert!(emit_plots(&[dir], &out).unwrap().is_empty());
    assert!(!out.exists());
}

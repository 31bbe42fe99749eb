use std::fs;
use std::path::Path;

use adaptmask::data::{
    generate_stick_figures, load_coco_keypoints, load_synthetic, make_split, save_synthetic, Difficulty, SplitSpec,
    StickFigureConfig,
};
use adaptmask::heatmap::Visibility;
use adaptmask::train::{fit_with_data, read_diagnostics, FitOptions, Method, RunData, TrainConfig};
use adaptmask::Error;
use serde_json::json;

#[test]
fn synthetic_dataset_survives_disk_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = StickFigureConfig::default();
    let records = generate_stick_figures(12, &cfg, 9).unwrap();
    save_synthetic(tmp.path(), &records, &cfg, 9).unwrap();
    let (loaded, manifest) = load_synthetic(tmp.path()).unwrap();
    assert_eq!(manifest.records.len(), 12);
    assert_eq!(loaded, records);
}

#[test]
fn manifest_with_foreign_schema_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = StickFigureConfig::default();
    save_synthetic(tmp.path(), &generate_stick_figures(2, &cfg, 0).unwrap(), &cfg, 0).unwrap();
    let path = tmp.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap().replace("ADAPTMASK-SYNTH-1", "SOMETHING-ELSE");
    fs::write(&path, text).unwrap();
    assert!(matches!(load_synthetic(tmp.path()), Err(Error::Ingestion { .. })));
}

#[test]
fn unlabeled_split_hides_annotations() {
    let records = generate_stick_figures(30, &StickFigureConfig::default(), 1).unwrap();
    let spec = SplitSpec {
        labeled_count: 10,
        seed: 4,
        source: "synthetic".into(),
    };
    let (lab, unl) = make_split(records, &spec).unwrap();
    assert_eq!((lab.len(), unl.len()), (10, 20));
    assert!(lab.iter().all(|r| r.keypoints.is_some()));
    assert!(unl.iter().all(|r| r.keypoints.is_none() && r.sealed().is_some()));
}

fn write_png(path: &Path, w: u32, h: u32) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 3) as u8, (y * 2) as u8, 90])).save(path).unwrap();
}

fn triplets(n: usize, f: impl Fn(usize) -> [f64; 3]) -> Vec<f64> {
    (0..n).flat_map(f).collect()
}

#[test]
fn coco_records_are_cropped_and_filtered() {
    let tmp = tempfile::tempdir().unwrap();
    write_png(&tmp.path().join("a.png"), 80, 60);
    // bbox 20x40 at (30, 10): already 1:2, so it maps exactly onto a 64x32 crop
    let good = triplets(17, |j| [30.0 + j as f64, 10.0 + 2.0 * j as f64, if j == 3 { 1.0 } else { 2.0 }]);
    let ann = json!({
        "images": [{"id": 1, "file_name": "a.png"}],
        "annotations": [
            {"id": 10, "image_id": 1, "keypoints": good, "bbox": [30.0, 10.0, 20.0, 40.0]},
            {"id": 11, "image_id": 1, "keypoints": [1.0, 2.0, 2.0], "bbox": [0.0, 0.0, 10.0, 10.0]},
            {"id": 12, "image_id": 1, "keypoints": triplets(17, |_| [0.0, 0.0, 0.0]), "bbox": [5.0, 5.0, 30.0, 30.0]}
        ],
        "categories": [{"keypoints": (0..17).map(|j| format!("k{j}")).collect::<Vec<_>>()}]
    });
    let file = tmp.path().join("annotations.json");
    fs::write(&file, ann.to_string()).unwrap();

    let records = load_coco_keypoints(&file, tmp.path(), (64, 32)).unwrap();
    assert_eq!(records.len(), 2, "the short annotation is skipped");
    let r = &records[0];
    assert_eq!(r.image_size(), (64, 32));
    let kp = r.keypoints.as_ref().unwrap();
    assert_eq!(kp.len(), 17);
    assert_eq!(kp.vis(3), Visibility::LabeledInvisible);
    for j in 0..17 {
        let [x, y] = kp.coord(j);
        assert!((x - 1.6 * j as f64).abs() < 1e-9 && (y - 3.2 * j as f64).abs() < 1e-9, "joint {j}: {x},{y}");
    }
    assert!((r.meta.area.unwrap() - 64.0 * 32.0).abs() < 1e-9);

    let empty = &records[1];
    assert!(empty.keypoints.is_none() && empty.sealed().is_some());
}

#[test]
fn coco_file_with_missing_image_reports_the_record() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = json!({
        "images": [{"id": 1, "file_name": "missing.png"}],
        "annotations": [{"id": 7, "image_id": 1, "keypoints": triplets(17, |_| [1.0, 1.0, 2.0]), "bbox": [0.0, 0.0, 4.0, 4.0]}]
    });
    let file = tmp.path().join("annotations.json");
    fs::write(&file, ann.to_string()).unwrap();
    match load_coco_keypoints(&file, tmp.path(), (64, 48)) {
        Err(Error::Ingestion { record, .. }) => assert_eq!(record.as_deref(), Some("7")),
        other => panic!("expected an ingestion error, got {other:?}"),
    }
}

#[test]
fn low_contrast_samples_respond_less_after_supervised_warmup() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::default();
    cfg.method = Method::Supervised;
    cfg.out_dir = tmp.path().to_path_buf();
    cfg.data.train_count = 200;
    cfg.data.val_count = 20;
    cfg.data.generator.low_contrast_frac = 0.3;
    cfg.train.epochs = 6;
    let data = RunData::load(&cfg).unwrap();
    assert!(data.unlabeled.iter().any(|r| r.meta.difficulty == Difficulty::LowContrast));
    let opts = FitOptions {
        skip_plots: true,
        ..Default::default()
    };
    let dir = fit_with_data(&cfg, &data, opts).unwrap();
    let last = read_diagnostics(&dir.join("diagnostics.jsonl")).unwrap().pop().unwrap();
    let (clean, low) = (last.responsiveness_clean.unwrap(), last.responsiveness_low_contrast.unwrap());
    assert!(low < clean, "low contrast {low} vs clean {clean}");
}

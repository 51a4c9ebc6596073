use mofo_core::boxdetect::MotionBox;
use mofo_core::evalsynth::*;
use mofo_core::tinynet::TrainConfig;

fn still_spec() -> SceneSpec {
    let mut s = pretrain_suite(1, 0).unwrap().remove(0);
    s.velocity = (0.0, 0.0);
    s.pan = (0.0, 0.0);
    s.noise_sigma = 0.0;
    s
}

#[test]
fn static_sprite_has_fixed_boxes() {
    let c = gen_clip(&still_spec(), 1).unwrap();
    assert!(c.boxes.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(c.union, c.boxes[0]);
}

#[test]
fn static_clip_falls_back_to_full_frame() {
    let s = still_spec();
    let r = eval_detection(&[s.clone()], &DetectionConfig::default()).unwrap();
    let row = &r.detection[0];
    assert!(row.fallback);
    assert_eq!(row.detected, MotionBox::full_frame(s.width, s.height));
    let expect = row.ground_truth.area() as f64 / (s.width * s.height) as f64;
    assert!((row.iou - expect).abs() < 1e-12);
}

#[test]
fn detection_report_is_complete_and_ordered() {
    let specs = detection_suite(4, 5).unwrap();
    let cfg = DetectionConfig { seed: 5, ..DetectionConfig::default() };
    let r = eval_detection(&specs, &cfg).unwrap();
    assert_eq!(r.detection.iter().map(|d| d.clip).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert!(r.all_finite());
    assert!(r.audits.iter().all(|a| a.pass));
    assert_eq!(r, eval_detection(&specs, &cfg).unwrap());
    assert!(eval_detection(&[], &cfg).is_err());
}

#[test]
fn single_ratio_sweep_reproduces() {
    let specs = pretrain_suite(4, 2).unwrap();
    let cfg = SweepConfig { train: TrainConfig::with_steps(5), held_out: 1, ..SweepConfig::micro(2) };
    let a = sweep_inside_ratio(&[0.75], &specs, &cfg).unwrap();
    assert_eq!(a.sweep.len(), 1);
    assert_eq!(a.traces[0].values.len(), 5);
    let mut csv_a = Vec::new();
    a.write_sweep_csv(&mut csv_a).unwrap();
    let mut csv_b = Vec::new();
    sweep_inside_ratio(&[0.75], &specs, &cfg).unwrap().write_sweep_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_eq!(String::from_utf8(csv_a).unwrap().lines().count(), 2);
    assert!(sweep_inside_ratio(&[0.0], &specs, &cfg).is_err());
    assert!(sweep_inside_ratio(&[], &specs, &cfg).is_err());
}

#[test]
fn suite_manifest_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("suite.json");
    let specs = direction_suite(4, 1).unwrap();
    write_suite(std::fs::File::create(&path).unwrap(), &specs).unwrap();
    assert_eq!(read_suite(std::fs::File::open(&path).unwrap()).unwrap(), specs);
}

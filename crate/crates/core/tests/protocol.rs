use toothscan::harness::checkpoint::params_hash;
use toothscan::harness::config::TrainConfig;
use toothscan::harness::detector::{detect, unflip_px, DetectParams};
use toothscan::harness::synth::synth_dataset;
use toothscan::harness::train::{build_detector, train_hena_sequential, train_detector, HenaCrops};
use toothscan::image::GrayImage;

const SMALL: &str = "\
train_scenes = 4
val_scenes = 2
det_batch = 4
crop = 16
crops_per_scene = 1
probe_crops_per_scene = 2
hena_batch = 4
carseg_epochs = 1
ad_epochs = 2
dds_epochs = 2
";

fn small(extra: &str) -> TrainConfig {
    TrainConfig::parse(&format!("{SMALL}{extra}")).unwrap()
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let cfg = small("det_epochs = 0\n");
    let mut train = synth_dataset(cfg.seed, 6, cfg.width, cfg.height).unwrap();
    let val = train.split_off(4);
    let mut epochs = 0;
    let (trained, _) = train_detector(&cfg, &train, &val, &mut |_| {
        epochs += 1;
        Ok(())
    })
    .unwrap();
    let (init, _) = build_detector(&cfg).unwrap();
    assert_eq!(epochs, 0);
    assert_eq!(params_hash(&trained, &[""]).unwrap(), params_hash(&init, &[""]).unwrap());
}

#[test]
fn mirrored_input_of_a_symmetric_image_gives_the_same_boxes() {
    let cfg = small("");
    let (ps, model) = build_detector(&cfg).unwrap();
    let (w, h) = (cfg.width, cfg.height);
    let data: Vec<f32> = (0..h)
        .flat_map(|y| (0..w).map(move |x| ((x.min(w - 1 - x) * 7 + y * 3) % 23) as f32 / 23.0))
        .collect();
    let image = GrayImage::new(w, h, data).unwrap();
    let mirror = image.flip_horizontal();
    assert_eq!(mirror, image);
    let dp = DetectParams { conf_threshold: 0.0, ..DetectParams::default() };
    let p = ps.bind(false);
    let direct = detect(&model, &p, &image, &dp).unwrap();
    let flipped = detect(&model, &p, &mirror, &dp).unwrap();
    assert!(!direct.is_empty());
    assert_eq!(direct.len(), flipped.len());
    for (a, b) in direct.iter().zip(&flipped) {
        let back = unflip_px(&unflip_px(b, w), w);
        for (u, v) in [(a.cx, back.cx), (a.cy, back.cy), (a.w, back.w), (a.h, back.h)] {
            assert!((u - v).abs() <= 1e-5);
        }
    }
}

#[test]
fn frozen_parameters_do_not_move_in_later_stages() {
    let cfg = small("det_epochs = 1\n");
    let mut train = synth_dataset(cfg.seed, 6, cfg.width, cfg.height).unwrap();
    let val = train.split_off(4);
    let crops = HenaCrops::new(&cfg, &train, &val).unwrap();
    let run = train_hena_sequential(&cfg, &crops, &mut |_, _| Ok(())).unwrap();
    let [s1, s2, s3] = [&run.stages[0], &run.stages[1], &run.stages[2]];
    for ((a, b), c) in s1.params().iter().zip(s2.params()).zip(s3.params()) {
        if !a.name.starts_with("hena.ad") {
            assert_eq!(a.value, b.value, "{} moved in stage 2", a.name);
        }
        if !a.name.starts_with("hena.dds") {
            assert_eq!(b.value, c.value, "{} moved in stage 3", a.name);
        }
    }
    let moved = |x: &toothscan::params::ParamStore, y: &toothscan::params::ParamStore, prefix: &str| {
        x.params().iter().zip(y.params()).any(|(a, b)| a.name.starts_with(prefix) && a.value != b.value)
    };
    assert!(moved(s1, s2, "hena.ad"));
    assert!(moved(s2, s3, "hena.dds"));
}

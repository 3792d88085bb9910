use std::fs;
use std::path::Path;

use dsmyolo::harness::{
    bench_scan_with, gen_synthetic, letterbox, load_config, load_dataset, load_ppm, save_config,
    save_ppm, synth_dataset, train_toy, BenchConfig, RunConfig, Sample, PAD_VALUE,
};
use dsmyolo::model::{load_checkpoint, Model};
use dsmyolo::ssm::selective_scan_blocked;
use dsmyolo::{Error, Tensor};

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_dataset_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(6, 64, 3, 9, a.path()).unwrap();
    gen_synthetic(6, 64, 3, 9, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    let loaded = load_dataset::<f64>(a.path()).unwrap();
    assert_eq!(loaded, synth_dataset::<f64>(6, 64, 3, 9).unwrap());
}

#[test]
fn class_histogram_is_roughly_uniform() {
    let data = synth_dataset::<f32>(120, 64, 4, 5).unwrap();
    let mut counts = [0f64; 4];
    for s in &data {
        for o in &s.objects {
            counts[o.class] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    assert!(total >= 200.0, "only {total} objects");
    let expected = total / 4.0;
    let chi2: f64 = counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    // 3 degrees of freedom, p = 0.001
    assert!(chi2 < 16.27, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn every_box_inside_its_image() {
    for s in synth_dataset::<f32>(50, 96, 3, 11).unwrap() {
        for o in &s.objects {
            let b = o.bbox;
            assert!(
                0.0 <= b[0]
                    && b[0] < b[2]
                    && b[2] <= 96.0
                    && 0.0 <= b[1]
                    && b[1] < b[3]
                    && b[3] <= 96.0
            );
        }
    }
}

#[test]
fn ppm_roundtrip_on_grid_values() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f64> = (0..3 * 5 * 4)
        .map(|i| ((i * 37) % 256) as f64 / 255.0)
        .collect();
    let img = Tensor::new(&[3, 5, 4], data).unwrap();
    let path = dir.path().join("x.ppm");
    save_ppm(&img, &path).unwrap();
    assert_eq!(load_ppm::<f64>(&path).unwrap(), img);
}

fn painted_bounds(img: &Tensor<f64>) -> [f64; 4] {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut b = [f64::MAX, f64::MAX, 0.0f64, 0.0f64];
    for y in 0..h {
        for x in 0..w {
            if img.data()[y * w + x] == 1.0 {
                b = [
                    b[0].min(x as f64),
                    b[1].min(y as f64),
                    b[2].max(x as f64 + 1.0),
                    b[3].max(y as f64 + 1.0),
                ];
            }
        }
    }
    b
}

#[test]
fn letterbox_box_roundtrip_within_one_pixel() {
    for (h, w, rect) in [
        (100, 200, [37, 20, 120, 71]),
        (150, 90, [5, 40, 60, 149]),
        (64, 64, [0, 0, 10, 10]),
    ] {
        let mut img = Tensor::<f64>::zeros(&[3, h, w]);
        for y in rect[1]..rect[3] {
            for x in rect[0]..rect[2] {
                img.data_mut()[y * w + x] = 1.0;
            }
        }
        let (boxed, lb) = letterbox(&img, 160).unwrap();
        let back = lb.to_original(painted_bounds(&boxed));
        for k in 0..4 {
            assert!(
                (back[k] - rect[k] as f64).abs() <= 1.0,
                "{back:?} vs {rect:?}"
            );
        }
    }
}

#[test]
fn wide_image_pads_top_and_bottom_equally() {
    let img = Tensor::<f64>::ones(&[3, 50, 100]);
    let (boxed, lb) = letterbox(&img, 64).unwrap();
    let rows_padded = (0..64)
        .filter(|&y| boxed.data()[y * 64] == PAD_VALUE)
        .collect::<Vec<_>>();
    let top = rows_padded.iter().filter(|&&y| y < 32).count();
    let bottom = rows_padded.len() - top;
    assert!(top.abs_diff(bottom) <= 1 && top > 0);
    assert_eq!(lb.pad_x, 0);
}

#[test]
fn config_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let cfg = RunConfig {
        seed: 42,
        epochs: 7,
        conf_threshold: 0.4,
        ..RunConfig::default()
    };
    save_config(&cfg, &path).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);
}

fn tiny_run(epochs: usize) -> (RunConfig, Vec<Sample<f32>>) {
    let cfg = RunConfig {
        scale: "T".into(),
        input_size: 64,
        epochs,
        batch_size: 2,
        ..RunConfig::default()
    };
    (cfg, synth_dataset(4, 64, 3, 1).unwrap())
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let (cfg, data) = tiny_run(0);
    let mut model = Model::<f32>::build(&cfg.model_config().unwrap(), 0).unwrap();
    let before = model.store.clone();
    let log = train_toy(&mut model, &data, &cfg, None).unwrap();
    assert!(log.epochs.is_empty() && log.step_losses.is_empty());
    assert_eq!(model.store, before);
}

#[test]
fn schedule_warms_up_then_never_rises() {
    let (cfg, data) = tiny_run(6);
    let mut model = Model::<f32>::build(&cfg.model_config().unwrap(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = train_toy(&mut model, &data, &cfg, Some(dir.path())).unwrap();
    let ipe = 2;
    let warm = 3 * ipe;
    assert_eq!(log.step_lrs.len(), 6 * ipe);
    for (i, &lr) in log.step_lrs.iter().enumerate().take(warm) {
        let want = cfg.scheduled_lr(i / ipe) * i as f64 / warm as f64;
        assert!((lr - want).abs() < 1e-15);
    }
    assert!(log.step_lrs[warm..].windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(log.step_lrs[warm], cfg.scheduled_lr(3));

    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.starts_with("dsmyolo-metrics 1\n"));
    assert_eq!(metrics.lines().count(), 2 + 6);
    let restored = load_checkpoint::<f32>(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(restored.store, model.store);
}

#[test]
fn nan_loss_names_the_step() {
    let (cfg, mut data) = tiny_run(1);
    for s in &mut data {
        s.image.data_mut()[0] = f32::NAN;
    }
    let mut model = Model::<f32>::build(&cfg.model_config().unwrap(), 0).unwrap();
    match train_toy(&mut model, &data, &cfg, None) {
        Err(Error::NonFinite { location, .. }) => assert_eq!(location, "step 0"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn bench_rejects_checksum_mismatch() {
    let cfg = BenchConfig {
        lengths: vec![32, 64],
        d: 2,
        n: 3,
        block_lens: vec![4],
        repeats: 1,
        seed: 0,
    };
    let report = bench_scan_with(&cfg, selective_scan_blocked).unwrap();
    assert_eq!(report.rows.len(), 2 * 2);
    assert_eq!(report.to_csv().lines().count(), 2 + 4);
    let err = bench_scan_with(&cfg, |x, p, bl| {
        let mut r = selective_scan_blocked(x, p, bl)?;
        r.y.data_mut()[0] += 1e-9;
        Ok(r)
    })
    .unwrap_err();
    assert!(err.to_string().contains("checksum mismatch"), "{err}");
}

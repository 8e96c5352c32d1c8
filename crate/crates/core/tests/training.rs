mod common;

use std::fs;
use std::path::Path;

use pcs::csmodel::{build_model, ModelConfig};
use pcs::losses::{ExtractorSource, FeatureExtractor, Loss, LossSpec};
use pcs::netpbm;
use pcs::tensorcore::Tensor;
use pcs::trainer::{
    checkpoint::checkpoint_name, data_rng, load_checkpoint, load_dataset, train, train_step, Dataset, Sgd, TrainConfig,
    TrainState, Trainer, LOSS_LOG,
};
use pcs::Error;

fn write_scenes(dir: &Path, count: usize, side: usize, seed: u64) {
    let mut r = common::rng(seed);
    for i in 0..count {
        let im = common::synthetic_scene(&mut r, side, side);
        netpbm::write_image(&im, dir.join(format!("img{i:02}.pgm"))).unwrap();
    }
}

fn config(dir: &Path) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-6,
        momentum: 0.9,
        batch_size: 2,
        iterations: 6,
        seed: 17,
        loss: LossSpec::Pixel,
        model: ModelConfig {
            recovery_channels: 4,
            ..ModelConfig::for_rate(0.25, 4)
        },
        dataset_dir: dir.to_path_buf(),
        crop_size: 16,
        checkpoint_every: 3,
    }
}

fn loss_columns(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            assert_eq!(f.len(), 3, "{l}");
            (f[0].to_string(), f[1].to_string())
        })
        .collect()
}

#[test]
fn single_batch_loss_decreases() {
    let img = common::smooth_crop();
    let cfg = ModelConfig {
        recovery_channels: 8,
        ..ModelConfig::for_rate(0.25, 4)
    };
    let mut st = TrainState::new(build_model(&cfg, 2).unwrap());
    let sgd = Sgd {
        learning_rate: 5e-6,
        momentum: 0.9,
    };
    let first = train_step(&mut st, &img, &Loss::Pixel, sgd).unwrap();
    let mut last = first;
    for _ in 0..199 {
        last = train_step(&mut st, &img, &Loss::Pixel, sgd).unwrap();
    }
    assert!(last < first, "{last} >= {first}");
    assert_eq!(st.iteration, 200);
}

#[test]
fn runs_are_byte_identical() {
    let data = tempfile::tempdir().unwrap();
    write_scenes(data.path(), 3, 24, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&config(data.path()), a.path()).unwrap();
    train(&config(data.path()), b.path()).unwrap();
    for it in [3, 6] {
        let name = checkpoint_name(it);
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
    let la = loss_columns(&a.path().join(LOSS_LOG));
    assert_eq!(la.len(), 2);
    assert_eq!(la, loss_columns(&b.path().join(LOSS_LOG)));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tempfile::tempdir().unwrap();
    write_scenes(data.path(), 3, 24, 2);
    let cfg = config(data.path());
    let full = tempfile::tempdir().unwrap();
    let straight = train(&cfg, full.path()).unwrap();

    let part = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.iterations = 3;
    train(&first, part.path()).unwrap();
    let mut t = Trainer::resume(cfg.clone(), part.path().join(checkpoint_name(3))).unwrap();
    t.run(Some(part.path()), |_| {}).unwrap();

    assert_eq!(t.state(), &straight);
    let name = checkpoint_name(6);
    assert_eq!(fs::read(full.path().join(&name)).unwrap(), fs::read(part.path().join(&name)).unwrap());
}

#[test]
fn zero_iterations_saves_initial_params() {
    let data = tempfile::tempdir().unwrap();
    write_scenes(data.path(), 1, 16, 3);
    let mut cfg = config(data.path());
    cfg.iterations = 0;
    let out = tempfile::tempdir().unwrap();
    let st = train(&cfg, out.path()).unwrap();
    let saved = load_checkpoint(out.path().join(checkpoint_name(0)), &cfg.model).unwrap();
    let init = build_model::<f32>(&cfg.model, cfg.seed).unwrap();
    assert_eq!(saved.params, init);
    assert_eq!(st.params, init);
    assert_eq!(saved.iteration, 0);
}

#[test]
fn zero_learning_rate_keeps_params_under_perceptual_loss() {
    let data = tempfile::tempdir().unwrap();
    write_scenes(data.path(), 2, 16, 4);
    let mut cfg = config(data.path());
    cfg.learning_rate = 0.0;
    cfg.loss = LossSpec::Perceptual {
        tap: "pool2".into(),
        extractor: ExtractorSource::Random {
            seed: 1,
            depth: 4,
            base_width: 2,
        },
    };
    let out = tempfile::tempdir().unwrap();
    let st = train(&cfg, out.path()).unwrap();
    assert_eq!(st.params, build_model::<f32>(&cfg.model, cfg.seed).unwrap());
    assert!(st.running_loss > 0.0);
}

#[test]
fn perceptual_training_leaves_extractor_file_untouched() {
    let data = tempfile::tempdir().unwrap();
    write_scenes(data.path(), 2, 16, 5);
    let work = tempfile::tempdir().unwrap();
    let ex_path = work.path().join("extractor.pcsw");
    FeatureExtractor::<f32>::random(3, 4, 2).unwrap().save(&ex_path).unwrap();
    let before = fs::read(&ex_path).unwrap();
    let mut cfg = config(data.path());
    cfg.learning_rate = 1e-6;
    cfg.loss = LossSpec::Perceptual {
        tap: "vgg2_2".into(),
        extractor: ExtractorSource::File(ex_path.clone()),
    };
    let start = build_model::<f32>(&cfg.model, cfg.seed).unwrap();
    let st = train(&cfg, work.path().join("run")).unwrap();
    assert_ne!(st.params, start);
    assert_eq!(fs::read(&ex_path).unwrap(), before);
}

#[test]
fn pixel_warm_start_then_perceptual_fine_tune() {
    let data = tempfile::tempdir().unwrap();
    write_scenes(data.path(), 2, 16, 6);
    let cfg = config(data.path());
    let stage1 = tempfile::tempdir().unwrap();
    train(&cfg, stage1.path()).unwrap();
    let warm = load_checkpoint(stage1.path().join(checkpoint_name(6)), &cfg.model).unwrap();

    let mut fine = cfg.clone();
    fine.learning_rate = 1e-7;
    fine.loss = LossSpec::Perceptual {
        tap: "pool2".into(),
        extractor: ExtractorSource::Random {
            seed: 2,
            depth: 4,
            base_width: 2,
        },
    };
    let ds = Dataset::load(data.path(), fine.crop_size).unwrap();
    let mut t = Trainer::with_parts(fine, ds, TrainState::new(warm.params.clone())).unwrap();
    t.run(None, |_| {}).unwrap();
    assert_eq!(t.state().iteration, 6);
    assert_ne!(t.state().params, warm.params);
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = tempfile::tempdir().unwrap();
    write_scenes(data.path(), 2, 16, 7);
    let mut cfg = config(data.path());
    cfg.learning_rate = 1e3;
    cfg.iterations = 100;
    let err = train(&cfg, tempfile::tempdir().unwrap().path()).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn dataset_stream_is_seeded_and_in_range() {
    let data = tempfile::tempdir().unwrap();
    write_scenes(data.path(), 1, 48, 8);
    let a: Vec<_> = load_dataset(data.path(), 16, 5).unwrap().take(4).collect();
    let b: Vec<_> = load_dataset(data.path(), 16, 5).unwrap().take(4).collect();
    assert_eq!(a, b);
    let c: Vec<_> = load_dataset(data.path(), 16, 6).unwrap().take(4).collect();
    assert_ne!(a, c);
    for crop in &a {
        assert_eq!(crop.shape().dims(), [1, 1, 16, 16]);
        assert!(crop.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn colour_images_become_luma() {
    let data = tempfile::tempdir().unwrap();
    let rgb = Tensor::<f32>::from_fn([1, 3, 8, 8], |_, c, y, x| ((c * 50 + x * 20 + y * 9) % 256) as f32 / 255.0).unwrap();
    netpbm::write_image(&rgb, data.path().join("c.ppm")).unwrap();
    let ds = Dataset::load(data.path(), 8).unwrap();
    let crop = ds.sample_crop(&mut data_rng(0));
    for y in 0..8 {
        for x in 0..8 {
            let l = 0.299 * rgb.at(0, 0, y, x) + 0.587 * rgb.at(0, 1, y, x) + 0.114 * rgb.at(0, 2, y, x);
            assert!((crop.at(0, 0, y, x) - l).abs() <= 1.0 / 255.0);
        }
    }
}

#[test]
fn dataset_errors() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(empty.path(), 8), Err(Error::Data(_))));

    let small = tempfile::tempdir().unwrap();
    write_scenes(small.path(), 1, 8, 9);
    assert!(matches!(Dataset::load(small.path(), 16), Err(Error::Data(_))));

    let bad = tempfile::tempdir().unwrap();
    fs::write(bad.path().join("broken.pgm"), b"P5\n4 4\n65535\n").unwrap();
    let err = Dataset::load(bad.path(), 2).unwrap_err();
    assert!(err.to_string().contains("broken.pgm"), "{err}");
    assert!(matches!(err.root(), Error::Format { .. }));
}

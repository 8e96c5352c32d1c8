//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{conv_oracle, conv_transposed_oracle, max_rel_diff, random_conv_case, rng, uniform};
use pcs::csmodel::{build_model, weights, ModelConfig, PadPolicy};
use pcs::losses::{ExtractorSource, Loss, LossSpec};
use pcs::metrics::{blockiness, psnr, ssim};
use pcs::netpbm;
use pcs::tensorcore::{conv2d, conv2d_transposed, Fault, OpKind, Tensor};
use pcs::trainer::{checkpoint::checkpoint_name, train, train_step, Dataset, Sgd, TrainConfig, TrainState, Trainer, LOSS_LOG};
use pcs::verify::{run_suite, SuiteOptions, DOUBLE_TOLERANCE};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    let trials = 120;
    for _ in 0..trials {
        let (spec, shape) = random_conv_case(&mut r);
        let x = uniform(&mut r, shape);
        let w = uniform(&mut r, spec.weight_shape().dims());
        let b = uniform(&mut r, [1, spec.out_channels, 1, 1]);
        let fast = conv2d(&x, &w, Some(&b), &spec).unwrap();
        worst = worst.max(max_rel_diff(&fast, &conv_oracle(&x, &w, Some(b.data()), &spec), 1e-12));
        let fast_t = conv2d_transposed(&fast, &w, None, &spec.adjoint()).unwrap();
        worst = worst.max(max_rel_diff(&fast_t, &conv_transposed_oracle(&fast, &w, None, &spec.adjoint()), 1e-12));
    }
    outcome(worst <= 1e-5, format!("{trials} configs, max rel diff {worst:.2e} (limit 1e-5)"))
}

fn adjointness() -> Outcome {
    let mut r = rng(77);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (spec, shape) = random_conv_case(&mut r);
        let x = uniform(&mut r, shape);
        let w = uniform(&mut r, spec.weight_shape().dims());
        let ax = conv2d(&x, &w, None, &spec).unwrap();
        let y = uniform(&mut r, ax.shape().dims());
        let aty = conv2d_transposed(&y, &w, None, &spec.adjoint()).unwrap();
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    outcome(worst <= 1e-10, format!("50 trials, max rel gap {worst:.2e} (limit 1e-10)"))
}

fn gradient_suite() -> Outcome {
    let report = run_suite(&SuiteOptions::default()).unwrap();
    let worst = report.worst().map_or(0.0, |c| c.max_relative_error);
    let has_losses = report.checks.iter().any(|c| c.name.starts_with("pixel loss/"))
        && report.checks.iter().any(|c| c.name.starts_with("perceptual loss/"));
    let mut missed = Vec::new();
    for op in OpKind::ALL {
        let faulty = run_suite(&SuiteOptions {
            fault: Some(Fault { op, factor: 1.1 }),
            ..SuiteOptions::default()
        })
        .unwrap();
        if faulty.passed() || faulty.suspects() != vec![op] {
            missed.push(op.name());
        }
    }
    outcome(
        report.passed() && has_losses && missed.is_empty(),
        format!(
            "{} checks, worst {worst:.2e} (limit {DOUBLE_TOLERANCE:.0e}); faults caught {}/{}",
            report.checks.len(),
            OpKind::ALL.len() - missed.len(),
            OpKind::ALL.len()
        ),
    )
}

fn rate_accounting() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (target, m) in [(0.01, 3), (0.04, 10)] {
        let cfg = ModelConfig {
            recovery_channels: 2,
            ..ModelConfig::for_rate(target, 16)
        };
        let params = build_model::<f32>(&cfg, 0).unwrap();
        ok &= cfg.measurement_channels == m && cfg.achieved_mr() == m as f64 / 256.0;
        for side in [64, 256] {
            let img = Tensor::<f32>::full([1, 1, side, side], 0.5).unwrap();
            let count = params.measure(&img).unwrap().data().len();
            ok &= count as f64 / (side * side) as f64 == cfg.achieved_mr();
        }
        parts.push(format!("m={} achieved {:.2}%", cfg.measurement_channels, 100.0 * cfg.achieved_mr()));
    }
    outcome(ok, parts.join(", ") + ", exact on 64x64 and 256x256")
}

fn pixel_overfit() -> Outcome {
    let img = common::smooth_crop();
    let cfg = ModelConfig {
        recovery_channels: 32,
        ..ModelConfig::for_rate(0.25, 4)
    };
    let mut st = TrainState::new(build_model(&cfg, 1).unwrap());
    let sgd = Sgd {
        learning_rate: 1e-5,
        momentum: 0.95,
    };
    let mut best = f64::NEG_INFINITY;
    let mut reached = None;
    for i in 1..=5000 {
        train_step(&mut st, &img, &Loss::Pixel, sgd).unwrap();
        if i % 250 == 0 {
            best = psnr(&st.params.reconstruct(&img).unwrap(), &img, 1.0).unwrap();
            if best >= 40.0 {
                reached = Some(i);
                break;
            }
        }
    }
    match reached {
        Some(i) => outcome(true, format!("{best:.2} dB after {i} iterations (need 40 dB within 5000)")),
        None => outcome(false, format!("{best:.2} dB after 5000 iterations (need 40 dB)")),
    }
}

fn random_extractor() -> ExtractorSource {
    ExtractorSource::Random {
        seed: 5,
        depth: 4,
        base_width: 8,
    }
}

fn perceptual_overfit() -> Outcome {
    let img = common::smooth_crop();
    let cfg = ModelConfig {
        recovery_channels: 16,
        ..ModelConfig::for_rate(0.25, 4)
    };
    let spec = LossSpec::Perceptual {
        tap: "pool2".into(),
        extractor: random_extractor(),
    };
    let loss = Loss::<f32>::from_spec(&spec).unwrap();
    let mut st = TrainState::new(build_model(&cfg, 1).unwrap());
    let sgd = Sgd {
        learning_rate: 3e-6,
        momentum: 0.95,
    };
    let first = train_step(&mut st, &img, &loss, sgd).unwrap();
    let mut ratio = 1.0;
    let mut iters = 1;
    while iters < 10_000 {
        ratio = train_step(&mut st, &img, &loss, sgd).unwrap() / first;
        iters += 1;
        if ratio < 0.05 {
            break;
        }
    }
    let recon = st.params.reconstruct(&img).unwrap();
    let finite = recon.data().iter().all(|v| v.is_finite());
    let block = blockiness(&recon, cfg.measurement_stride).unwrap();
    outcome(
        ratio < 0.05 && finite && block < 1.5,
        format!("loss ratio {ratio:.4} after {iters} iterations (limit 0.05), blockiness {block:.3} (limit 1.5)"),
    )
}

fn directional_ordering() -> Outcome {
    let mut r = rng(42);
    let train_set: Vec<_> = (0..20).map(|_| common::synthetic_scene(&mut r, 60, 60)).collect();
    let held_out: Vec<_> = (0..5).map(|_| common::synthetic_scene(&mut r, 60, 60)).collect();
    let model = ModelConfig {
        recovery_channels: 16,
        ..ModelConfig::for_rate(0.04, 10)
    };
    let perceptual = LossSpec::Perceptual {
        tap: "pool2".into(),
        extractor: random_extractor(),
    };
    let mut means = Vec::new();
    for (loss, learning_rate) in [(LossSpec::Pixel, 5e-6), (perceptual, 5e-7)] {
        let cfg = TrainConfig {
            learning_rate,
            momentum: 0.95,
            batch_size: 5,
            iterations: 1000,
            seed: 3,
            loss,
            model: model.clone(),
            dataset_dir: Default::default(),
            crop_size: 40,
            checkpoint_every: 1000,
        };
        let data = Dataset::from_images(train_set.clone(), cfg.crop_size).unwrap();
        let init = TrainState::new(build_model(&model, cfg.seed).unwrap());
        let mut trainer = Trainer::with_parts(cfg, data, init).unwrap();
        trainer.run(None, |_| {}).unwrap();
        let p = &trainer.state().params;
        let total: f64 = held_out
            .iter()
            .map(|im| psnr(&p.reconstruct_image(im, PadPolicy::Error).unwrap(), im, 1.0).unwrap())
            .sum();
        means.push(total / held_out.len() as f64);
    }
    outcome(
        means[0] > means[1],
        format!(
            "mr {:.2}%, held-out mean PSNR pixel {:.2} dB vs perceptual {:.2} dB",
            100.0 * model.achieved_mr(),
            means[0],
            means[1]
        ),
    )
}

fn loss_columns(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect()
}

fn determinism_and_formats() -> Outcome {
    let data = tempfile::tempdir().unwrap();
    let mut r = rng(8);
    for i in 0..3 {
        let im = common::synthetic_scene(&mut r, 24, 24);
        netpbm::write_image(&im, data.path().join(format!("img{i}.pgm"))).unwrap();
    }
    let cfg = TrainConfig {
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
        dataset_dir: data.path().to_path_buf(),
        crop_size: 16,
        checkpoint_every: 3,
    };
    let (a, b, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let straight = train(&cfg, a.path()).unwrap();
    train(&cfg, b.path()).unwrap();
    let logs_equal = loss_columns(&a.path().join(LOSS_LOG)) == loss_columns(&b.path().join(LOSS_LOG));

    let mut first = cfg.clone();
    first.iterations = 3;
    train(&first, part.path()).unwrap();
    let mut resumed = Trainer::resume(cfg.clone(), part.path().join(checkpoint_name(3))).unwrap();
    resumed.run(Some(part.path()), |_| {}).unwrap();
    let last = checkpoint_name(6);
    let resume_exact =
        resumed.state() == &straight && fs::read(a.path().join(&last)).unwrap() == fs::read(part.path().join(&last)).unwrap();

    let ckpt = fs::read(a.path().join(&last)).unwrap();
    let pcsw_exact = weights::encode(&weights::decode(&ckpt).unwrap()).unwrap() == ckpt;
    let pgm = fs::read(data.path().join("img0.pgm")).unwrap();
    let pgm_exact = netpbm::encode(&netpbm::decode::<f32>(&pgm).unwrap()).unwrap() == pgm;

    outcome(
        logs_equal && resume_exact && pcsw_exact && pgm_exact,
        format!("resume bit-exact {resume_exact}, .pcsw round trip {pcsw_exact}, PGM round trip {pgm_exact}, loss logs identical {logs_equal}"),
    )
}

fn metric_oracles() -> Outcome {
    let zero = Tensor::<f64>::full([1, 1, 1, 1], 0.0).unwrap();
    let grey = Tensor::<f64>::full([1, 1, 1, 1], 128.0).unwrap();
    let p = psnr(&zero, &grey, 255.0).unwrap();
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for k in 0..5 {
        let a = uniform(&mut r, [1, 1, 20 + k, 24]).map(|v| 0.5 + 0.5 * v);
        let noise = uniform(&mut r, a.shape().dims());
        let mut b = a.clone();
        for (v, n) in b.data_mut().iter_mut().zip(noise.data()) {
            *v = (*v + 0.2 * n).clamp(0.0, 1.0);
        }
        worst = worst.max((ssim(&a, &b, 1.0).unwrap() - common::ssim_oracle(&a, &b, 1.0)).abs());
    }
    outcome(
        (p - 5.987).abs() <= 1e-3 && worst <= 1e-6,
        format!("PSNR {p:.4} dB (expect 5.987 within 1e-3), SSIM max |diff| {worst:.2e} over 5 pairs (limit 1e-6)"),
    )
}

/// Number, check, and wall-clock budget in seconds.
type Criterion = (u32, fn() -> Outcome, Option<u64>);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, oracle_equivalence, Some(60)),
        (2, adjointness, Some(60)),
        (3, gradient_suite, Some(120)),
        (4, rate_accounting, None),
        (5, pixel_overfit, Some(300)),
        (6, perceptual_overfit, None),
        (7, directional_ordering, Some(1800)),
        (8, determinism_and_formats, None),
        (9, metric_oracles, None),
    ];
    let mut failed = 0;
    for (n, run, budget) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let elapsed = start.elapsed();
        let mut o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if let Some(secs) = budget {
            if elapsed > Duration::from_secs(secs) {
                o.passed = false;
                o.detail += &format!("; over the {secs} s budget");
            }
        }
        failed += usize::from(!o.passed);
        println!(
            "criterion {n}: {} {} [{:.1} s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 4 to 6 need the CIFAR-10 binary distribution; point
//! `IEROT_CIFAR10_DIR` at the extracted `cifar-10-batches-bin` directory and
//! run with `--ignored`.

mod common;

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ierot::dataio::{load_cifar_path, synthetic_dataset, CifarVariant, Dataset, Split};
use ierot::eval::{probe_accuracy, ProbeConfig};
use ierot::imgops::{
    blend, enhance, grayscale, rotate90, solarize, Degree, IeKind, Image, Rotation,
};
use ierot::nn::{sgd_nesterov_step, softmax_cross_entropy, BnMode, Tape, Tensor};
use ierot::rng::Rng;
use ierot::trainer::{
    self, build_batch, epoch_order, images_to_tensor, inputs_per_batch, mgda_alpha, AlphaMode,
    Head, Pretrained, ProbePoint, RunConfig, TrainMode, Trainer, TwoHeadModel, DATA_STREAM,
};

use common::{gradcheck, random_tensor};

const CIFAR_ENV: &str = "IEROT_CIFAR10_DIR";

fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} ({title}): {verdict} - {detail}");
}

fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image {
    Image::from_fn(h, w, |_, _| [0, 1, 2].map(|_| rng.below(256) as u8))
}

fn histogram(img: &Image, ch: usize) -> [usize; 256] {
    let mut h = [0; 256];
    for &v in img.plane(ch) {
        h[v as usize] += 1;
    }
    h
}

#[test]
fn criterion_1_transform_oracles() {
    let started = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    let px = |rgb: [u8; 3]| Image::from_fn(1, 1, |_, _| rgb);
    check(
        grayscale(&px([255, 255, 255])).pixel(0, 0) == [255; 3],
        "gray white",
    );
    check(
        grayscale(&px([0, 0, 0])).pixel(0, 0) == [0; 3],
        "gray black",
    );
    check(
        grayscale(&px([255, 0, 0])).pixel(0, 0) == [76; 3],
        "gray red",
    );

    let quad = Image::from_fn(2, 2, |r, c| [[[10u8, 20], [30, 40]][r][c]; 3]);
    let turned = rotate90(&quad, Rotation::Deg90);
    check(
        [
            turned.pixel(0, 0)[0],
            turned.pixel(0, 1)[0],
            turned.pixel(1, 0)[0],
            turned.pixel(1, 1)[0],
        ] == [20, 40, 10, 30],
        "rotate 2x2",
    );

    let a = Image::filled(1, 1, 100);
    let b = Image::filled(1, 1, 200);
    check(blend(&a, &b, 1.5).unwrap().data() == [250; 3], "blend 1.5");
    check(
        blend(&Image::filled(1, 1, 0), &b, 1.5).unwrap().data() == [255; 3],
        "blend clamp",
    );
    check(
        blend(&a, &b, 0.0).unwrap() == a && blend(&a, &b, 1.0).unwrap() == b,
        "blend ends",
    );

    let spot = Image::from_fn(3, 3, |r, c| [if (r, c) == (1, 1) { 130 } else { 0 }; 3]);
    let smooth = enhance(&spot, IeKind::Sharpness, 0.0).unwrap();
    check(
        smooth.pixel(1, 1) == [50; 3] && smooth.pixel(0, 0) == [0; 3],
        "sharpness kernel",
    );
    check(
        enhance(&px([255, 0, 0]), IeKind::Saturation, 0.0)
            .unwrap()
            .pixel(0, 0)
            == [76; 3],
        "saturation 0",
    );
    check(
        enhance(&a, IeKind::Solarization, 1.0).is_err(),
        "solarize via enhance is an error",
    );
    check(
        solarize(&Image::filled(1, 1, 0), 0).data() == [255; 3],
        "solarize t=0",
    );
    check(
        solarize(&Image::filled(1, 1, 200), 170).data() == [55; 3],
        "solarize t=170",
    );

    for kind in IeKind::ALL {
        let degrees = kind.degrees();
        let identities = degrees
            .iter()
            .filter(|d| {
                matches!(d, Degree::Factor(f) if *f == 1.0) || matches!(d, Degree::Threshold(256))
            })
            .count();
        check(
            degrees.len() == 4 && identities == 1,
            "one identity degree per table",
        );
    }

    let mut rng = Rng::seeded(2024);
    for trial in 0..200 {
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let img = random_image(h, w, &mut rng);
        let uniform = Image::filled(h, w, rng.below(256) as u8);
        for k in Rotation::ALL {
            let r = rotate90(&img, k);
            check(
                (0..3).all(|ch| histogram(&r, ch) == histogram(&img, ch)),
                "rotation histogram",
            );
            check(rotate90(&r, k.inverse()) == img, "rotation inverse");
            let t = rng.below(257) as u16;
            check(
                solarize(&r, t) == rotate90(&solarize(&img, t), k),
                "solarize commutes",
            );
            let sat = enhance(&img, IeKind::Saturation, 0.5).unwrap();
            check(
                enhance(&r, IeKind::Saturation, 0.5).unwrap() == rotate90(&sat, k),
                "saturation commutes",
            );
        }
        check(rotate90(&img, Rotation::Deg0) == img, "rotation 0");
        check(
            rotate90(&rotate90(&img, Rotation::Deg180), Rotation::Deg180) == img,
            "180 twice",
        );
        check(solarize(&img, 256) == img, "threshold 256 identity");
        check(solarize(&solarize(&img, 0), 0) == img, "double inversion");
        for kind in [
            IeKind::Brightness,
            IeKind::Contrast,
            IeKind::Saturation,
            IeKind::Sharpness,
        ] {
            check(
                enhance(&img, kind, 1.0).unwrap() == img,
                "factor 1 identity",
            );
            check(
                enhance(&uniform, IeKind::Contrast, rng.unit() * 2.0).unwrap() == uniform,
                "uniform contrast",
            );
            let f = rng.unit() * 2.0;
            let out = enhance(&img, kind, f).unwrap();
            check(out.height() == h && out.width() == w, "enhance shape");
        }
        let lo = Image::from_fn(h, w, |_, _| [0, 1, 2].map(|_| 60 + rng.below(40) as u8));
        let hi = Image::from_fn(h, w, |r, c| lo.pixel(r, c).map(|v| v + rng.below(40) as u8));
        let mut prev = blend(&lo, &hi, 0.0).unwrap();
        for step in 1..=15 {
            let next = blend(&lo, &hi, step as f64 * 0.1).unwrap();
            check(
                prev.data().iter().zip(next.data()).all(|(p, n)| n >= p),
                "blend monotone",
            );
            prev = next;
        }
        if trial == 0 {
            check(
                rotate90(&img, Rotation::Deg90).height() == w,
                "rotation swaps sides",
            );
        }
    }

    let elapsed = started.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(10);
    let detail = if failures.is_empty() {
        format!("all examples and invariants hold in {elapsed:.2?}")
    } else {
        format!("{} failed checks, first: {}", failures.len(), failures[0])
    };
    report(1, "transform oracle suite", pass, &detail);
    assert!(pass, "{detail}");
}

/// Inputs whose entries are pairwise separated, so max-pool and ReLU stay
/// away from their kinks under a finite-difference step.
fn spaced_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    let data = order
        .iter()
        .map(|&i| (i as f32 - len as f32 / 2.0 + 0.5) * 0.05)
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn criterion_2_gradient_checks() {
    const SHAPES: u64 = 20;
    const H: f32 = 1e-3;
    let started = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name)
    {
        Some(slot) => slot.1 = slot.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..SHAPES {
        let mut rng = Rng::seeded(1000 + seed);
        let n = 2 + rng.below(2);
        let c = 1 + rng.below(3);
        let k = 1 + rng.below(3);
        let (h, w) = (2 + 2 * rng.below(2), 2 + 2 * rng.below(2));

        let x = random_tensor(&[n, c, h, w], &mut rng);
        let wt = random_tensor(&[k, c, 3, 3], &mut rng);
        record(
            "conv2d",
            gradcheck(
                &[x.clone(), wt],
                |t, v| t.conv2d(v[0], v[1]).unwrap(),
                H,
                seed,
            ),
        );

        let gamma = random_tensor(&[c], &mut rng);
        let beta = random_tensor(&[c], &mut rng);
        record(
            "batch_norm (train)",
            gradcheck(
                &[x.clone(), gamma.clone(), beta.clone()],
                |t, v| {
                    t.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)
                        .unwrap()
                        .0
                },
                H,
                seed,
            ),
        );
        let mean: Vec<f32> = (0..c).map(|_| rng.normal() as f32 * 0.3).collect();
        let var: Vec<f32> = (0..c).map(|_| 0.5 + rng.unit() as f32).collect();
        record(
            "batch_norm (eval)",
            gradcheck(
                &[x.clone(), gamma, beta],
                |t, v| {
                    let mode = BnMode::Eval {
                        running_mean: &mean,
                        running_var: &var,
                    };
                    t.batch_norm(v[0], v[1], v[2], mode, 1e-5).unwrap().0
                },
                H,
                seed,
            ),
        );

        let spaced = spaced_tensor(&[n, c, h, w], &mut rng);
        record(
            "relu",
            gradcheck(std::slice::from_ref(&spaced), |t, v| t.relu(v[0]), H, seed),
        );
        record(
            "max_pool2",
            gradcheck(&[spaced], |t, v| t.max_pool2(v[0]).unwrap(), H, seed),
        );
        record(
            "global_avg_pool",
            gradcheck(&[x], |t, v| t.global_avg_pool(v[0]).unwrap(), H, seed),
        );

        let (fin, fout) = (1 + rng.below(6), 1 + rng.below(5));
        let xi = random_tensor(&[n, fin], &mut rng);
        let wl = random_tensor(&[fout, fin], &mut rng);
        let bl = random_tensor(&[fout], &mut rng);
        record(
            "linear",
            gradcheck(
                &[xi, wl, bl],
                |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
                H,
                seed,
            ),
        );

        let classes = 2 + rng.below(4);
        let logits = random_tensor(&[n, classes], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let loss_at = |t: &Tensor| softmax_cross_entropy(t, &labels).unwrap().0 as f64;
        let numeric: Vec<f64> = (0..logits.len())
            .map(|j| {
                let mut p = logits.clone();
                p.data_mut()[j] += H;
                let mut m = logits.clone();
                m.data_mut()[j] -= H;
                let step = p.data()[j] as f64 - m.data()[j] as f64;
                (loss_at(&p) - loss_at(&m)) / step
            })
            .collect();
        let analytic: Vec<f64> = grad.data().iter().map(|&g| g as f64).collect();
        record(
            "softmax_cross_entropy",
            common::relative_error(&analytic, &numeric),
        );
    }
    let elapsed = started.elapsed();
    let pass = worst.iter().all(|(_, e)| *e < 1e-3) && elapsed < Duration::from_secs(120);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        2,
        "gradient checks",
        pass,
        &format!("max relative error over {SHAPES} shapes: {detail}; {elapsed:.2?}"),
    );
    assert!(pass);
}

fn combined_norm(gr: &[f32], gi: &[f32], alpha: f64) -> f64 {
    gr.iter()
        .zip(gi)
        .map(|(&r, &i)| (alpha * r as f64 + (1.0 - alpha) * i as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn criterion_3_mgda_min_norm() {
    let started = Instant::now();
    let mut rng = Rng::seeded(77);
    let mut max_gap = 0f64;
    let mut norm_ok = true;
    for _ in 0..100 {
        let d = 2 + rng.below(40);
        let gr: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
        let gi: Vec<f32> = (0..d)
            .map(|_| (rng.normal() * 2.0 * rng.unit()) as f32)
            .collect();
        let alpha = mgda_alpha(&gr, &gi).unwrap() as f64;
        let grid = (0..=10_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|&a, &b| combined_norm(&gr, &gi, a).total_cmp(&combined_norm(&gr, &gi, b)))
            .unwrap();
        max_gap = max_gap.max((alpha - grid).abs());
        let best = combined_norm(&gr, &gi, alpha);
        let bound = combined_norm(&gr, &gi, 1.0).min(combined_norm(&gr, &gi, 0.0));
        norm_ok &= (0.0..=1.0).contains(&alpha) && best <= bound * (1.0 + 1e-6);
    }
    let elapsed = started.elapsed();
    let pass = max_gap <= 1e-3 && norm_ok && elapsed < Duration::from_secs(10);
    report(
        3,
        "MGDA-UB correctness",
        pass,
        &format!("max |alpha - grid| {max_gap:.2e}, min-norm property {norm_ok}, {elapsed:.2?}"),
    );
    assert!(pass);
}

fn cifar_dir() -> PathBuf {
    PathBuf::from(std::env::var_os(CIFAR_ENV).unwrap_or_else(|| {
        panic!("set {CIFAR_ENV} to the extracted cifar-10-batches-bin directory")
    }))
}

fn cifar_config(
    mode: TrainMode,
    images: usize,
    epochs: usize,
    seed: u64,
    out: &std::path::Path,
) -> RunConfig {
    let mut cfg = RunConfig::new(mode, cifar_dir(), out);
    cfg.seed = seed;
    cfg.epochs = epochs;
    cfg.max_images = Some(images);
    cfg
}

#[test]
#[ignore = "needs the CIFAR-10 binary distribution in IEROT_CIFAR10_DIR"]
fn criterion_4_pretext_learnability() {
    let dir = tempfile::tempdir().unwrap();
    let train = load_cifar_path(&cifar_dir(), CifarVariant::Cifar10, Split::Train).unwrap();
    let started = Instant::now();
    let cfg = cifar_config(TrainMode::Ierot, 512, 10, 0, dir.path());
    let (_, history) = trainer::train(cfg, &train).unwrap();
    let last = history.last().unwrap();
    let elapsed = started.elapsed();
    let pass =
        last.val_acc_r >= 0.40 && last.val_acc_i >= 0.40 && elapsed <= Duration::from_secs(900);
    report(
        4,
        "pretext learnability",
        pass,
        &format!(
            "val_acc_R {:.3}, val_acc_I {:.3} after 10 epochs in {elapsed:.0?}",
            last.val_acc_r, last.val_acc_i
        ),
    );
    assert!(pass);
}

/// GAP-probe accuracy of a pretrained and of a random-init checkpoint.
fn probe_pair(mode: TrainMode, seed: u64, train: &Dataset, test: &Dataset) -> (f64, f64) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cifar_config(mode, 10_000, 20, seed, dir.path());
    let (ck, _) = trainer::train(cfg.clone(), train).unwrap();
    let probe_train = train.truncated(10_000);
    let trained = Pretrained::from_checkpoint(&ck).unwrap();
    let acc = probe_accuracy(
        &trained,
        &probe_train,
        test,
        ProbePoint::Gap,
        &ProbeConfig::default(),
    )
    .unwrap();
    let mut init = cfg;
    init.epochs = 0;
    init.checkpoint_dir = dir.path().join("init");
    init.metrics_path = init.checkpoint_dir.join("metrics.csv");
    let (ck0, _) = trainer::train(init, train).unwrap();
    let random = Pretrained::from_checkpoint(&ck0).unwrap();
    let base = probe_accuracy(
        &random,
        &probe_train,
        test,
        ProbePoint::Gap,
        &ProbeConfig::default(),
    )
    .unwrap();
    (acc, base)
}

fn load_cifar_splits() -> (Dataset, Dataset) {
    let dir = cifar_dir();
    (
        load_cifar_path(&dir, CifarVariant::Cifar10, Split::Train).unwrap(),
        load_cifar_path(&dir, CifarVariant::Cifar10, Split::Test).unwrap(),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
#[ignore = "needs the CIFAR-10 binary distribution in IEROT_CIFAR10_DIR and hours of CPU"]
fn criterion_5_representation_quality() {
    let (train, test) = load_cifar_splits();
    let pairs: Vec<(f64, f64)> = (0..3)
        .map(|s| probe_pair(TrainMode::Ierot, s, &train, &test))
        .collect();
    let trained = mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let random = mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let pass = trained - random >= 0.08;
    report(
        5,
        "representation quality",
        pass,
        &format!("GAP probe {trained:.4} pretrained vs {random:.4} random init (mean of 3 seeds)"),
    );
    assert!(pass);
}

#[test]
#[ignore = "needs the CIFAR-10 binary distribution in IEROT_CIFAR10_DIR and hours of CPU"]
fn criterion_6_ordering_experiment() {
    let (train, test) = load_cifar_splits();
    let started = Instant::now();
    let mut means = Vec::new();
    for mode in [TrainMode::Rotation, TrainMode::RotDa, TrainMode::Ierot] {
        let accs: Vec<f64> = (0..3)
            .map(|s| probe_pair(mode, s, &train, &test).0)
            .collect();
        means.push((mode, mean(&accs)));
    }
    let [(_, rot), (_, da), (_, ie)] = [means[0], means[1], means[2]];
    let strict = ie > da && (da - rot).abs() < 0.01;
    let pass = ie >= rot - 0.01 && started.elapsed() <= Duration::from_secs(6 * 3600);
    report(
        6,
        "ordering experiment",
        pass,
        &format!(
            "rotation {rot:.4}, rot_da {da:.4}, ierot {ie:.4}; strict ordering ierot > rot_da ~ rotation reproduced: {strict}"
        ),
    );
    assert!(pass);
}

fn small_config(dir: &std::path::Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::new(TrainMode::Ierot, "synthetic", dir);
    cfg.seed = 11;
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg
}

#[test]
fn criterion_7_determinism_and_resume() {
    let ds = synthetic_dataset(72, 10, 5);
    let run = |epochs: usize| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), epochs);
        trainer::train(cfg.clone(), &ds).unwrap();
        (dir, cfg)
    };
    let (_a, full_a) = run(3);
    let (_b, full_b) = run(3);
    let bytes_a = fs::read(&full_a.metrics_path).unwrap();
    let rerun_identical = bytes_a == fs::read(&full_b.metrics_path).unwrap();

    let (_c, part) = run(1);
    let mut rest = part.clone();
    rest.epochs = 3;
    trainer::resume(rest, &ds, &part.checkpoint_path()).unwrap();
    let resume_identical = bytes_a == fs::read(&part.metrics_path).unwrap();
    let ck_identical =
        fs::read(full_a.checkpoint_path()).unwrap() == fs::read(part.checkpoint_path()).unwrap();

    let pass = rerun_identical && resume_identical && ck_identical;
    report(
        7,
        "determinism and resume",
        pass,
        &format!(
            "rerun metrics identical {rerun_identical}, resumed metrics identical {resume_identical}, final checkpoints identical {ck_identical}"
        ),
    );
    assert!(pass);
}

/// Rotation-only training written directly against the public primitives:
/// same data stream and batches, rotation loss only, enhancement head never touched.
fn reference_rotation_losses(
    cfg: &RunConfig,
    trainer: &Trainer,
    mut model: TwoHeadModel,
) -> Vec<f32> {
    let mut rng = Rng::substream(cfg.seed, DATA_STREAM);
    let images = trainer.train_images();
    let opt = cfg.optimizer();
    let skip = TwoHeadModel::head_params(Head::Enhancement);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule().lr_at(epoch).unwrap() as f32;
        let order = epoch_order(images.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if inputs_per_batch(cfg.mode, chunk.len()) < 2 {
                continue;
            }
            let sources: Vec<Image> = chunk.iter().map(|&j| images[j].clone()).collect();
            let batch = build_batch(cfg.mode, cfg.ie_kind, &sources, &mut rng).unwrap();
            let input = images_to_tensor(&batch.images, trainer.norm()).unwrap();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, input, true).unwrap();
            let (loss, grad) =
                softmax_cross_entropy(tape.value(fwd.logits_r), batch.rotation.as_ref().unwrap())
                    .unwrap();
            let mut grads = tape.backward(&[(fwd.logits_r, grad.data())]).unwrap();
            for (idx, (p, &var)) in model
                .params_mut()
                .iter_mut()
                .zip(&fwd.param_vars)
                .enumerate()
            {
                if skip.contains(&idx) {
                    continue;
                }
                let g = grads
                    .take(var)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                sgd_nesterov_step(p, &g, lr, &opt).unwrap();
            }
            model.update_running_stats(&fwd.batch_stats).unwrap();
            losses.push(loss);
        }
    }
    losses
}

#[test]
fn criterion_8_baseline_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 3);
    cfg.alpha_mode = AlphaMode::Fixed;
    cfg.alpha_fixed = 1.0;
    let ds = synthetic_dataset(72, 10, 6);
    let mut t = Trainer::new(cfg.clone(), &ds).unwrap();
    let initial = t.model().clone();
    while !t.is_done() {
        t.run_epoch().unwrap();
    }
    let head = TwoHeadModel::head_params(Head::Enhancement);
    let head_unchanged = t.model().params()[head.clone()] == initial.params()[head];
    let reference = reference_rotation_losses(&cfg, &t, initial);
    let trained: Vec<f32> = t.step_log().iter().map(|s| s.loss_r).collect();
    let totals_equal = t
        .step_log()
        .iter()
        .all(|s| s.total.to_bits() == s.loss_r.to_bits());
    let identical = reference.len() == trained.len()
        && reference
            .iter()
            .zip(&trained)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let pass = head_unchanged && identical && totals_equal && !trained.is_empty();
    report(
        8,
        "baseline recovery",
        pass,
        &format!(
            "enhancement head unchanged {head_unchanged}, {} step losses bit-identical to the rotation-only run {identical}",
            trained.len()
        ),
    );
    assert!(pass);
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ierot::dataio::{synthetic_dataset, write_cifar, CifarVariant};
use ierot::nn::{Tape, Tensor, Var};
use ierot::rng::Rng;

/// `|a - n| / (|a| + |n|)` over whole gradient vectors; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.normal() as f32).collect()).unwrap()
}

/// Compares tape gradients of `sum(out * r)` for a fixed random `r` against
/// central differences with step `h`, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor], forward: F, h: f32, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.parameter(t.clone())).collect();
        let out = forward(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = run(inputs);
    let mut rng = Rng::seeded(seed);
    let r: Vec<f32> = (0..tape.value(out).len())
        .map(|_| rng.normal() as f32)
        .collect();
    let objective = |values: &[Tensor]| -> f64 {
        let (tape, _, out) = run(values);
        tape.value(out)
            .data()
            .iter()
            .zip(&r)
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum()
    };
    let grads = tape.backward(&[(out, &r)]).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, var) in vars.iter().enumerate() {
        let g = grads.get(*var).unwrap();
        analytic.extend(g.data().iter().map(|&v| v as f64));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let step = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            numeric.push((objective(&plus) - objective(&minus)) / step);
        }
    }
    relative_error(&analytic, &numeric)
}

/// Writes a procedurally generated CIFAR-10 style training file.
pub fn synthetic_cifar(dir: &Path, n: usize, classes: usize, seed: u64) -> PathBuf {
    let path = dir.join("train.bin");
    write_cifar(
        &synthetic_dataset(n, classes, seed),
        CifarVariant::Cifar10,
        &path,
    )
    .unwrap();
    path
}

/// Text of a complete run configuration.
pub fn config_text(mode: &str, dataset: &Path, out: &Path, epochs: usize, seed: u64) -> String {
    format!(
        "mode = {mode}\nie_kind = solarization\ndataset_path = {}\ndataset_variant = cifar10\nseed = {seed}\n\
         epochs = {epochs}\nbatch_size = 16\nlr0 = 0.01\nmomentum = 0.9\nweight_decay = 0.0005\n\
         alpha_mode = mgda_ub\nalpha_fixed = 0.5\ncheckpoint_dir = {}\nmetrics_path = {}\n",
        dataset.display(),
        out.display(),
        out.join("metrics.csv").display()
    )
}

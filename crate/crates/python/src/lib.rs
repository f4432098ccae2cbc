//! Python bindings: image transforms, task weighting, pretraining and probing.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use ierot::cli::{load_run_dataset, probe_datasets};
use ierot::dataio::{synthetic_dataset, write_cifar, CifarVariant};
use ierot::eval::{probe_accuracy, ProbeConfig};
use ierot::imgops::{IeKind, Image};
use ierot::pretext::compose;
use ierot::trainer::{self, EpochMetrics, Pretrained, ProbePoint, RunConfig};
use ierot::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) | Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Rotates an interleaved RGB image by `rotation` quarter turns and applies
/// the enhancement degree `degree_index` of `ie`. Returns `(pixels, height, width)`.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, rotation, ie, degree_index))]
fn transform<'py>(
    py: Python<'py>,
    pixels: &[u8],
    height: usize,
    width: usize,
    rotation: usize,
    ie: &str,
    degree_index: usize,
) -> PyResult<(Bound<'py, PyBytes>, usize, usize)> {
    let kind: IeKind = ie.parse().map_err(to_py)?;
    let img = Image::from_interleaved(height, width, pixels).map_err(to_py)?;
    let out = compose(&img, rotation, degree_index, kind).map_err(to_py)?;
    Ok((
        PyBytes::new(py, &out.to_interleaved()),
        out.height(),
        out.width(),
    ))
}

/// Min-norm weight on the rotation gradient for a pair of task gradients.
#[pyfunction]
fn mgda_alpha(g_r: Vec<f32>, g_i: Vec<f32>) -> PyResult<f32> {
    trainer::mgda_alpha(&g_r, &g_i).map_err(to_py)
}

/// Writes `n` procedurally generated labelled scenes in CIFAR-10 binary format.
#[pyfunction]
#[pyo3(signature = (path, n, classes = 10, seed = 0))]
fn write_synthetic_cifar(path: PathBuf, n: usize, classes: usize, seed: u64) -> PyResult<()> {
    write_cifar(
        &synthetic_dataset(n, classes, seed),
        CifarVariant::Cifar10,
        &path,
    )
    .map_err(to_py)
}

fn metrics_dict<'py>(py: Python<'py>, m: &EpochMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("lr", m.lr)?;
    d.set_item("train_loss_R", m.train_loss_r)?;
    d.set_item("train_loss_I", m.train_loss_i)?;
    d.set_item("train_loss_total", m.train_loss_total)?;
    d.set_item("val_acc_R", m.val_acc_r)?;
    d.set_item("val_acc_I", m.val_acc_i)?;
    d.set_item("alpha_mean", m.alpha_mean)?;
    d.set_item("alpha_min", m.alpha_min)?;
    d.set_item("alpha_max", m.alpha_max)?;
    d.set_item("wall_seconds", m.wall_seconds)?;
    Ok(d)
}

/// Runs (or resumes) pretraining from a run configuration file and returns
/// the per-epoch metrics.
#[pyfunction]
#[pyo3(signature = (config, resume = None))]
fn pretrain<'py>(
    py: Python<'py>,
    config: PathBuf,
    resume: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = RunConfig::load(&config).map_err(to_py)?;
    let history = py
        .detach(|| {
            let ds = load_run_dataset(&cfg)?;
            match resume {
                Some(ck) => trainer::resume(cfg, &ds, &ck),
                None => trainer::train(cfg, &ds),
            }
        })
        .map_err(to_py)?
        .1;
    history.iter().map(|m| metrics_dict(py, m)).collect()
}

/// Top-1 accuracy of a linear probe on frozen features of a checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, test_dataset = None, probe_point = "gap", max_train = None, max_test = None))]
fn probe(
    py: Python<'_>,
    checkpoint: PathBuf,
    dataset: PathBuf,
    test_dataset: Option<PathBuf>,
    probe_point: &str,
    max_train: Option<usize>,
    max_test: Option<usize>,
) -> PyResult<f64> {
    let point: ProbePoint = probe_point.parse().map_err(to_py)?;
    py.detach(|| {
        let pre = Pretrained::load(&checkpoint)?;
        let (train, test) = probe_datasets(
            &dataset,
            test_dataset.as_deref().map(Path::new),
            CifarVariant::Cifar10,
            max_train,
            max_test,
        )?;
        probe_accuracy(&pre, &train, &test, point, &ProbeConfig::default())
    })
    .map_err(to_py)
}

#[pymodule]
#[pyo3(name = "ierot")]
fn ierot_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(transform, m)?)?;
    m.add_function(wrap_pyfunction!(mgda_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_cifar, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    Ok(())
}

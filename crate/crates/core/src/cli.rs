//! The `ierot` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataio::{
    load_cifar_path, read_ppm, resolve_data_path, split_train_val, write_ppm, CifarVariant,
    Dataset, Split, SplitSpec, DATA_DIR_ENV,
};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, parse_report_csv, probe_accuracy, summarize, summary_csv, ProbeConfig, RunRecord,
    REPORT_HEADER,
};
use crate::imgops::{IeKind, Image};
use crate::nn::Checkpoint;
use crate::pretext::compose;
use crate::trainer::{self, metrics, Pretrained, ProbePoint, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ierot",
    version,
    about = "Rotation and image-enhancement pretext training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rotate and enhance one image and write it as PPM.
    Transform(TransformArgs),
    /// Pretrain a model from a run configuration file.
    Pretrain(PretrainArgs),
    /// Fit a linear probe on frozen features of a checkpoint.
    Probe(ProbeArgs),
    /// Pretrain and probe every configuration in a directory over several seeds.
    Compare(CompareArgs),
    /// Rebuild summary tables and curves from a report CSV or a compare directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// PPM image or CIFAR binary file.
    #[arg(long)]
    pub input: PathBuf,
    /// Record index when the input is a CIFAR file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value = "cifar10")]
    pub variant: CifarVariant,
    /// Quarter turns counter-clockwise, 0..=3.
    #[arg(long, default_value_t = 0)]
    pub rotation: usize,
    #[arg(long, default_value = "solarization")]
    pub ie: IeKind,
    /// Enhancement degree, 0..=3.
    #[arg(long)]
    pub degree_index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CIFAR directory or binary file; defaults to the data directory variable.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Held-out file; defaults to the test split of a directory, or a 9:1 split of a file.
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
    #[arg(long, default_value = "cifar10")]
    pub variant: CifarVariant,
    #[arg(long, default_value = "gap")]
    pub probe_point: String,
    /// Report CSV to append the result row to.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_train: Option<usize>,
    #[arg(long)]
    pub max_test: Option<usize>,
    /// Method label for the report row; defaults to the checkpoint's mode.
    #[arg(long)]
    pub method: Option<String>,
    /// Seed for the report row; defaults to the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Directory of `*.cfg` run configurations, one per method.
    #[arg(long)]
    pub configs: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report CSV, or a compare output directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; defaults to the input's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Transform(a) => cmd_transform(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Probe(a) => cmd_probe(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn load_input_image(path: &Path, index: usize, variant: CifarVariant) -> Result<Image> {
    let head = fs::read(path).map_err(|e| Error::io(path, e))?;
    if head.starts_with(b"P6") {
        return read_ppm(path);
    }
    let ds = load_cifar_path(path, variant, Split::Train)?;
    ds.images().get(index).cloned().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "index {index} out of range for {} records",
            ds.len()
        ))
    })
}

pub fn cmd_transform(a: &TransformArgs) -> Result<()> {
    let img = load_input_image(&a.input, a.index, a.variant)?;
    let out = compose(&img, a.rotation, a.degree_index, a.ie)?;
    write_ppm(&out, &a.out)
}

/// Loads the training images a run configuration points at.
pub fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = resolve_data_path(&cfg.dataset_path);
    let ds = load_cifar_path(&path, cfg.dataset_variant, Split::Train)?;
    Ok(match cfg.max_images {
        Some(n) => ds.truncated(n),
        None => ds,
    })
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ds = load_run_dataset(&cfg)?;
    let (_, history) = match &a.resume {
        Some(ck) => {
            if !ck.exists() {
                return Err(Error::Config(format!(
                    "checkpoint {} does not exist",
                    ck.display()
                )));
            }
            trainer::resume(cfg.clone(), &ds, ck)?
        }
        None => trainer::train(cfg.clone(), &ds)?,
    };
    if let Some(last) = history.last() {
        println!(
            "epoch {} val_acc_R {} val_acc_I {} -> {}",
            last.epoch,
            last.val_acc_r,
            last.val_acc_i,
            cfg.checkpoint_path().display()
        );
    }
    Ok(())
}

fn limit(ds: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) => ds.truncated(n),
        None => ds,
    }
}

/// Probe train and test sets: an explicit test file, the test split of a
/// CIFAR directory, or a fixed 9:1 split of a single file.
pub fn probe_datasets(
    dataset: &Path,
    test_dataset: Option<&Path>,
    variant: CifarVariant,
    max_train: Option<usize>,
    max_test: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let train = load_cifar_path(dataset, variant, Split::Train)?;
    let (train, test) = match test_dataset {
        Some(t) => (train, load_cifar_path(t, variant, Split::Test)?),
        None if dataset.is_dir() => (train, load_cifar_path(dataset, variant, Split::Test)?),
        None => split_train_val(&train, SplitSpec::nine_to_one(0))?,
    };
    Ok((limit(train, max_train), limit(test, max_test)))
}

fn append_report_row(path: &Path, r: &RunRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(REPORT_HEADER);
        text.push('\n');
    }
    text.push_str(&format!(
        "{},{},{},{},{}\n",
        r.method, r.ie_kind, r.seed, r.probe_point, r.top1
    ));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn cmd_probe(a: &ProbeArgs) -> Result<()> {
    let point: ProbePoint = a.probe_point.parse()?;
    if !a.checkpoint.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            a.checkpoint.display()
        )));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let pre = Pretrained::from_checkpoint(&ck)?;
    let dataset = match &a.dataset {
        Some(p) => resolve_data_path(p),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("pass --dataset or set {DATA_DIR_ENV}")))?,
    };
    let test = a.test_dataset.as_deref().map(resolve_data_path);
    let (train, test) = probe_datasets(
        &dataset,
        test.as_deref(),
        a.variant,
        a.max_train,
        a.max_test,
    )?;
    let top1 = probe_accuracy(&pre, &train, &test, point, &ProbeConfig::default())?;
    let record = RunRecord {
        method: a
            .method
            .clone()
            .or_else(|| ck.meta("mode").map(str::to_string))
            .unwrap_or_else(|| "unknown".into()),
        ie_kind: ck
            .meta("ie_kind")
            .and_then(|k| k.parse().ok())
            .unwrap_or(IeKind::Solarization),
        seed: a
            .seed
            .or_else(|| ck.meta("seed").and_then(|s| s.parse().ok()))
            .unwrap_or(0),
        probe_point: point,
        top1,
        curve: Vec::new(),
    };
    append_report_row(&a.out, &record)?;
    println!("{top1}");
    Ok(())
}

fn config_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "cfg"))
        .collect();
    files.sort();
    Ok(files)
}

fn run_dir(out: &Path, method: &str, seed: u64) -> PathBuf {
    out.join("runs").join(method).join(format!("seed{seed}"))
}

/// Pretrains and probes one (configuration, seed) pair.
pub fn pretrain_and_probe(cfg: &RunConfig, method: &str) -> Result<RunRecord> {
    let ds = load_run_dataset(cfg)?;
    let (_, curve) = trainer::train(cfg.clone(), &ds)?;
    let pre = Pretrained::load(&cfg.checkpoint_path())?;
    let (train, test) = probe_datasets(
        &resolve_data_path(&cfg.dataset_path),
        None,
        cfg.dataset_variant,
        cfg.probe_train_images,
        cfg.probe_test_images,
    )?;
    let top1 = probe_accuracy(
        &pre,
        &train,
        &test,
        cfg.probe_point,
        &ProbeConfig::default(),
    )?;
    Ok(RunRecord {
        method: method.to_string(),
        ie_kind: cfg.ie_kind,
        seed: cfg.seed,
        probe_point: cfg.probe_point,
        top1,
        curve,
    })
}

fn write_outputs(dir: &Path, runs: &[RunRecord]) -> Result<()> {
    emit_report(runs, &dir.join("report.csv"))?;
    let path = dir.join("summary.csv");
    fs::write(&path, summary_csv(&summarize(runs))).map_err(|e| Error::io(&path, e))?;
    for s in summarize(runs) {
        println!(
            "{} ({}, {}): {:.4} +/- {:.4} over {} runs",
            s.method, s.ie_kind, s.probe_point, s.mean, s.std, s.runs
        );
    }
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let files = config_files(&a.configs)?;
    if files.len() < 2 {
        return Err(Error::Config(format!(
            "{} holds {} run configurations (*.cfg); at least 2 are needed",
            a.configs.display(),
            files.len()
        )));
    }
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let configs = files
        .iter()
        .map(|f| RunConfig::load(f).map(|c| (f, c)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut runs = Vec::new();
    let mut failures: Vec<(String, u64, Error)> = Vec::new();
    for (file, base) in &configs {
        let method = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| base.mode.to_string());
        for k in 0..a.seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed + k;
            cfg.checkpoint_dir = run_dir(&a.out, &method, cfg.seed);
            cfg.metrics_path = cfg.checkpoint_dir.join("metrics.csv");
            eprintln!("{method} seed {}", cfg.seed);
            match pretrain_and_probe(&cfg, &method) {
                Ok(r) => runs.push(r),
                Err(e) => {
                    eprintln!("{method} seed {} failed: {e}", cfg.seed);
                    failures.push((method.clone(), cfg.seed, e));
                }
            }
        }
    }
    let path = a.out.join("failures.csv");
    let mut text = String::from("method,seed,exit_code,error\n");
    for (m, s, e) in &failures {
        text.push_str(&format!(
            "{m},{s},{},\"{}\"\n",
            e.exit_code(),
            e.to_string().replace('"', "'")
        ));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if !runs.is_empty() {
        write_outputs(&a.out, &runs)?;
    }
    match failures.into_iter().next() {
        None => Ok(()),
        Some((m, s, e)) => Err(match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{m} seed {s}: {msg}")),
            other => Error::Config(format!("{m} seed {s}: {other}")),
        }),
    }
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let (csv, root) = if a.input.is_dir() {
        (a.input.join("report.csv"), a.input.clone())
    } else {
        let root = a.input.parent().map(Path::to_path_buf).unwrap_or_default();
        (a.input.clone(), root)
    };
    let text = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
    let mut runs = parse_report_csv(&text).map_err(|e| Error::format(&csv, e.to_string()))?;
    if runs.is_empty() {
        return Err(Error::Config(format!("{} has no run rows", csv.display())));
    }
    for r in &mut runs {
        let m = run_dir(&root, &r.method, r.seed).join("metrics.csv");
        if m.exists() {
            r.curve = metrics::read_metrics(&m)?;
        }
    }
    let out = a.out.clone().unwrap_or(root);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_outputs(&out, &runs)
}

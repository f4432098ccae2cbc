//! Run configuration: a line-oriented `key = value` file.
//!
//! ```text
//! # comments and blank lines are ignored
//! mode = ierot
//! ie_kind = solarization
//! dataset_path = cifar-10-batches-bin
//! ...
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataio::CifarVariant;
use crate::error::{Error, Result};
use crate::imgops::IeKind;
use crate::nn::{LrSchedule, OptimizerConfig};

use super::model::ProbePoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Joint rotation and enhancement prediction.
    Ierot,
    /// Four rotations per source image, rotation loss only.
    Rotation,
    /// Like `Rotation`, on images enhanced with a sampled degree.
    RotDa,
    /// Enhancement prediction on upright images.
    IeOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Ierot,
        TrainMode::Rotation,
        TrainMode::RotDa,
        TrainMode::IeOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Ierot => "ierot",
            TrainMode::Rotation => "rotation",
            TrainMode::RotDa => "rot_da",
            TrainMode::IeOnly => "ie_only",
        }
    }

    /// Whether batches expand each source image into its four rotations.
    pub fn four_rotations(self) -> bool {
        matches!(self, TrainMode::Rotation | TrainMode::RotDa)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; valid modes: ierot, rotation, rot_da, ie_only"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlphaMode {
    MgdaUb,
    Fixed,
}

impl AlphaMode {
    pub fn name(self) -> &'static str {
        match self {
            AlphaMode::MgdaUb => "mgda_ub",
            AlphaMode::Fixed => "fixed",
        }
    }
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mgda_ub" => Ok(AlphaMode::MgdaUb),
            "fixed" => Ok(AlphaMode::Fixed),
            _ => Err(Error::Config(format!(
                "unknown alpha_mode {s:?}; valid: mgda_ub, fixed"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub ie_kind: IeKind,
    pub dataset_path: PathBuf,
    pub dataset_variant: CifarVariant,
    pub seed: u64,
    pub epochs: usize,
    /// Source images per step; rotation modes feed four inputs per image.
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub alpha_mode: AlphaMode,
    pub alpha_fixed: f32,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
    /// Use only the first `n` images of the training file.
    pub max_images: Option<usize>,
    pub nesterov: bool,
    /// Apply weight decay to batch-norm scale and shift.
    pub decay_norm_params: bool,
    pub lr_milestones: Vec<usize>,
    /// Write measured epoch durations instead of 0.
    pub record_wall_time: bool,
    pub probe_point: ProbePoint,
    pub probe_train_images: Option<usize>,
    pub probe_test_images: Option<usize>,
}

const REQUIRED: [&str; 14] = [
    "mode",
    "ie_kind",
    "dataset_path",
    "dataset_variant",
    "seed",
    "epochs",
    "batch_size",
    "lr0",
    "momentum",
    "weight_decay",
    "alpha_mode",
    "alpha_fixed",
    "checkpoint_dir",
    "metrics_path",
];

const OPTIONAL: [&str; 8] = [
    "max_images",
    "nesterov",
    "decay_norm_params",
    "lr_milestones",
    "record_wall_time",
    "probe_point",
    "probe_train_images",
    "probe_test_images",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key}: expected true or false"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

impl RunConfig {
    /// A complete configuration with the standard hyperparameters.
    pub fn new(mode: TrainMode, dataset_path: impl Into<PathBuf>, out_dir: &Path) -> Self {
        let opt = OptimizerConfig::default();
        RunConfig {
            mode,
            ie_kind: IeKind::Solarization,
            dataset_path: dataset_path.into(),
            dataset_variant: CifarVariant::Cifar10,
            seed: 0,
            epochs: 100,
            batch_size: 128,
            lr0: opt.lr0,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            alpha_mode: AlphaMode::MgdaUb,
            alpha_fixed: 0.5,
            checkpoint_dir: out_dir.to_path_buf(),
            metrics_path: out_dir.join("metrics.csv"),
            max_images: None,
            nesterov: opt.nesterov,
            decay_norm_params: true,
            lr_milestones: LrSchedule::standard(opt.lr0).milestones,
            record_wall_time: false,
            probe_point: ProbePoint::Gap,
            probe_train_images: None,
            probe_test_images: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr0,
            milestones: self.lr_milestones.clone(),
            factor: 0.1,
            total_epochs: self.epochs,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint_dir.join(super::CHECKPOINT_FILE)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_fixed) {
            return Err(Error::Config(format!(
                "alpha_fixed must lie in [0, 1], got {}",
                self.alpha_fixed
            )));
        }
        if self.max_images == Some(0) {
            return Err(Error::Config("max_images must be >= 1".into()));
        }
        if self.probe_train_images == Some(0) || self.probe_test_images == Some(0) {
            return Err(Error::Config("probe image counts must be >= 1".into()));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "lr_milestones must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    no + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !REQUIRED.contains(&key) && !OPTIONAL.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key {key:?}",
                    no + 1
                )));
            }
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    no + 1
                )));
            }
            pairs.push((key, value));
        }
        if let Some(missing) = REQUIRED
            .iter()
            .find(|k| !pairs.iter().any(|(p, _)| p == *k))
        {
            return Err(Error::Config(format!("missing required key {missing:?}")));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let req = |key: &str| get(key).expect("required keys checked above");

        let mut cfg = RunConfig::new(
            req("mode").parse()?,
            req("dataset_path"),
            Path::new(req("checkpoint_dir")),
        );
        cfg.ie_kind = parse_value("ie_kind", req("ie_kind"))?;
        cfg.dataset_variant = parse_value("dataset_variant", req("dataset_variant"))?;
        cfg.seed = parse_value("seed", req("seed"))?;
        cfg.epochs = parse_value("epochs", req("epochs"))?;
        cfg.batch_size = parse_value("batch_size", req("batch_size"))?;
        cfg.lr0 = parse_value("lr0", req("lr0"))?;
        cfg.momentum = parse_value("momentum", req("momentum"))?;
        cfg.weight_decay = parse_value("weight_decay", req("weight_decay"))?;
        cfg.alpha_mode = req("alpha_mode").parse()?;
        cfg.alpha_fixed = parse_value("alpha_fixed", req("alpha_fixed"))?;
        cfg.metrics_path = PathBuf::from(req("metrics_path"));
        if let Some(v) = get("max_images") {
            cfg.max_images = Some(parse_value("max_images", v)?);
        }
        if let Some(v) = get("nesterov") {
            cfg.nesterov = parse_bool("nesterov", v)?;
        }
        if let Some(v) = get("decay_norm_params") {
            cfg.decay_norm_params = parse_bool("decay_norm_params", v)?;
        }
        if let Some(v) = get("lr_milestones") {
            cfg.lr_milestones = parse_list("lr_milestones", v)?;
        }
        if let Some(v) = get("record_wall_time") {
            cfg.record_wall_time = parse_bool("record_wall_time", v)?;
        }
        if let Some(v) = get("probe_point") {
            cfg.probe_point = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        }
        if let Some(v) = get("probe_train_images") {
            cfg.probe_train_images = Some(parse_value("probe_train_images", v)?);
        }
        if let Some(v) = get("probe_test_images") {
            cfg.probe_test_images = Some(parse_value("probe_test_images", v)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "ie_kind = {}", self.ie_kind)?;
        writeln!(f, "dataset_path = {}", self.dataset_path.display())?;
        writeln!(f, "dataset_variant = {}", self.dataset_variant)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lr0 = {}", self.lr0)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "alpha_mode = {}", self.alpha_mode)?;
        writeln!(f, "alpha_fixed = {}", self.alpha_fixed)?;
        writeln!(f, "checkpoint_dir = {}", self.checkpoint_dir.display())?;
        writeln!(f, "metrics_path = {}", self.metrics_path.display())?;
        if let Some(n) = self.max_images {
            writeln!(f, "max_images = {n}")?;
        }
        writeln!(f, "nesterov = {}", self.nesterov)?;
        writeln!(f, "decay_norm_params = {}", self.decay_norm_params)?;
        let milestones: Vec<String> = self.lr_milestones.iter().map(|m| m.to_string()).collect();
        writeln!(f, "lr_milestones = {}", milestones.join(","))?;
        writeln!(f, "record_wall_time = {}", self.record_wall_time)?;
        writeln!(f, "probe_point = {}", self.probe_point)?;
        if let Some(n) = self.probe_train_images {
            writeln!(f, "probe_train_images = {n}")?;
        }
        if let Some(n) = self.probe_test_images {
            writeln!(f, "probe_test_images = {n}")?;
        }
        Ok(())
    }
}

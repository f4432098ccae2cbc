//! CIFAR binary ingestion, deterministic splits, channel statistics and PPM export.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgops::{Image, CHANNELS};
use crate::rng::Rng;

pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// File names of the official train and test splits inside the extracted directory.
    pub fn split_files(self, split: Split) -> &'static [&'static str] {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, Split::Test) => &["test_batch.bin"],
            (CifarVariant::Cifar100, Split::Train) => &["train.bin"],
            (CifarVariant::Cifar100, Split::Test) => &["test.bin"],
        }
    }
}

impl fmt::Display for CifarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        })
    }
}

impl FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Ok(CifarVariant::Cifar10),
            "cifar100" | "cifar-100" => Ok(CifarVariant::Cifar100),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset variant {other:?}; expected cifar10 or cifar100"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    fn extend(&mut self, other: Dataset) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
    }
}

/// Parses one CIFAR binary file. CIFAR-100 records keep the fine label.
pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant).map_err(|reason| Error::format(path, reason))
}

fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> std::result::Result<Dataset, String> {
    let record = variant.record_len();
    if !bytes.len().is_multiple_of(record) {
        return Err(format!(
            "length {} is not a multiple of the {variant} record size {record}",
            bytes.len()
        ));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= variant.class_count() {
            return Err(format!("label {label} out of range for {variant}"));
        }
        labels.push(label);
        let pixels = rec[variant.label_bytes()..].to_vec();
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, pixels).map_err(|e| e.to_string())?);
    }
    Ok(Dataset {
        images,
        labels,
        class_count: variant.class_count(),
    })
}

/// Loads a dataset from either a single binary file or an extracted CIFAR
/// directory (in which case the official files of `split` are concatenated).
pub fn load_cifar_path(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    if !path.is_dir() {
        return load_cifar(path, variant);
    }
    let mut out: Option<Dataset> = None;
    for name in variant.split_files(split) {
        let part = load_cifar(&path.join(name), variant)?;
        match &mut out {
            Some(ds) => ds.extend(part),
            None => out = Some(part),
        }
    }
    Ok(out.expect("every variant has at least one file per split"))
}

/// Serializes a dataset of 32x32 images in the official binary record format.
/// CIFAR-100 coarse labels are written as 0.
pub fn encode_cifar(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        if img.height() != CIFAR_SIDE || img.width() != CIFAR_SIDE {
            return Err(Error::Shape(format!(
                "CIFAR records are 32x32, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        if label >= variant.class_count() || label > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "label {label} does not fit {variant}"
            )));
        }
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(label as u8);
        out.extend_from_slice(img.data());
    }
    Ok(out)
}

pub fn write_cifar(ds: &Dataset, variant: CifarVariant, path: &Path) -> Result<()> {
    let bytes = encode_cifar(ds, variant)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Train/validation partition ratio and shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_parts: usize,
    pub total_parts: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// The 9:1 split.
    pub fn nine_to_one(seed: u64) -> Self {
        SplitSpec {
            train_parts: 9,
            total_parts: 10,
            seed,
        }
    }

    pub fn train_len(&self, n: usize) -> usize {
        n * self.train_parts / self.total_parts
    }
}

/// Shuffled permutation of `0..n` and the train/val cut.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Empty("split_train_val"));
    }
    if spec.train_parts == 0 || spec.train_parts >= spec.total_parts {
        return Err(Error::InvalidArgument(format!(
            "train fraction {}/{} must lie strictly between 0 and 1",
            spec.train_parts, spec.total_parts
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::seeded(spec.seed).shuffle(&mut order);
    let val = order.split_off(spec.train_len(n));
    Ok((order, val))
}

/// Unstratified shuffled split; sizes are `floor(n * train_fraction)` and the remainder.
pub fn split_train_val(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

pub const STD_FLOOR: f32 = 1e-6;

/// Per-channel mean and population standard deviation of samples scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

pub fn image_stats<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<ChannelStats> {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut count = 0usize;
    for img in images {
        for (ch, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
            for &v in img.plane(ch) {
                let x = v as f64 / 255.0;
                *s += x;
                *q += x * x;
            }
        }
        count += img.area();
    }
    if count == 0 {
        return Err(Error::Empty("dataset_stats"));
    }
    let mut stats = ChannelStats::identity();
    for ch in 0..3 {
        let mean = sum[ch] / count as f64;
        let var = (sq[ch] / count as f64 - mean * mean).max(0.0);
        stats.mean[ch] = mean as f32;
        stats.std[ch] = (var.sqrt() as f32).max(STD_FLOOR);
    }
    Ok(stats)
}

pub fn dataset_stats(ds: &Dataset) -> Result<ChannelStats> {
    image_stats(ds.images())
}

/// Writes a binary P6 PPM: `P6\n<W> <H>\n255\n` followed by interleaved RGB.
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ppm(img))
        .map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_interleaved());
    out
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Parses a P6 PPM with maxval 255. Header comments are accepted.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?}, expected P6", fields[0]));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad {what} {s:?} in PPM header"))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    if parse(&fields[3], "maxval")? != 255 {
        return Err("only maxval 255 is supported".into());
    }
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != width * height * CHANNELS {
        return Err(format!(
            "raster has {} bytes, expected {}",
            payload.len(),
            width * height * CHANNELS
        ));
    }
    Image::from_interleaved(height, width, payload).map_err(|e| e.to_string())
}

/// Resolves a data path: relative paths are taken under `IEROT_DATA_DIR` when it is set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

pub const DATA_DIR_ENV: &str = "IEROT_DATA_DIR";

/// Procedurally generated 32x32 scenes for tests and smoke runs.
///
/// Each image has a top-lit vertical background gradient (so orientation is
/// recoverable) plus a class-dependent shape and tint at a random position,
/// with mild per-pixel noise.
pub fn synthetic_dataset(n: usize, class_count: usize, seed: u64) -> Dataset {
    let mut rng = Rng::seeded(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % class_count.max(1);
        images.push(synthetic_scene(class, &mut rng));
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        class_count: class_count.max(1),
    }
}

fn synthetic_scene(class: usize, rng: &mut Rng) -> Image {
    let side = CIFAR_SIDE as f64;
    let sky = [
        150.0 + 60.0 * rng.unit(),
        170.0 + 60.0 * rng.unit(),
        200.0 + 50.0 * rng.unit(),
    ];
    let ground = [
        40.0 + 60.0 * rng.unit(),
        50.0 + 60.0 * rng.unit(),
        20.0 + 40.0 * rng.unit(),
    ];
    let horizon = 12.0 + 10.0 * rng.unit();
    let hue = (class as f64 * 0.618_034).fract();
    let tint = [
        255.0 * (0.5 + 0.5 * (TAU * hue).cos()),
        255.0 * (0.5 + 0.5 * (TAU * (hue + 0.33)).cos()),
        255.0 * (0.5 + 0.5 * (TAU * (hue + 0.67)).cos()),
    ];
    let cy = 10.0 + 12.0 * rng.unit();
    let cx = 8.0 + 16.0 * rng.unit();
    let size = 4.0 + 4.0 * rng.unit();
    let shape = class % 4;
    let mut noise = Vec::with_capacity(CIFAR_SIDE * CIFAR_SIDE);
    for _ in 0..CIFAR_SIDE * CIFAR_SIDE {
        noise.push(12.0 * (rng.unit() - 0.5));
    }
    Image::from_fn(CIFAR_SIDE, CIFAR_SIDE, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let t = (y / side).min(1.0);
        let mut px = if y < horizon {
            [0, 1, 2].map(|k| sky[k] * (1.0 - 0.4 * t))
        } else {
            [0, 1, 2].map(|k| ground[k] * (1.2 - 0.5 * t))
        };
        let (dy, dx) = (y - cy, x - cx);
        let inside = match shape {
            0 => dy * dy + dx * dx <= size * size,
            1 => dy.abs() <= size && dx.abs() <= size,
            // upward-pointing triangle
            2 => dy <= size && dy >= -size && dx.abs() <= (dy + size) * 0.5,
            _ => (dy.abs() <= size && dx.abs() <= 1.5) || (dx.abs() <= size && dy.abs() <= 1.5),
        };
        if inside {
            px = tint;
        }
        let nz = noise[r * CIFAR_SIDE + c];
        px.map(|v| (v + nz).round().clamp(0.0, 255.0) as u8)
    })
}

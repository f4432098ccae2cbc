//! Pixel-exact image transforms on 8-bit planar RGB rasters.
//!
//! Every transform here has fixed integer semantics so that outputs agree
//! bit-for-bit across platforms:
//!
//! * luminance: `(299 R + 587 G + 114 B + 500) / 1000` (round half up)
//! * blend: `clamp(round(a + f (b - a)), 0, 255)` in `f64`, round half away from zero
//! * contrast mean: `floor(mean(L) + 0.5)`
//! * sharpness smoothing: kernel `[[1,1,1],[1,5,1],[1,1,1]] / 13` on the interior,
//!   one-pixel frame copied from the input, rounded to nearest

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// 8-bit RGB image with planar layout: all R samples, then G, then B,
/// each plane row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{CHANNELS} needs {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    /// Builds an image from a closure returning the `(r, g, b)` triple at `(row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let area = height * width;
        let mut data = vec![0u8; area * CHANNELS];
        for r in 0..height {
            for c in 0..width {
                let px = f(r, c);
                for (ch, v) in px.into_iter().enumerate() {
                    data[ch * area + r * width + c] = v;
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Builds an image from interleaved RGB bytes (the PPM payload order).
    pub fn from_interleaved(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "interleaved buffer for {height}x{width} needs {} bytes, got {}",
                height * width * CHANNELS,
                rgb.len()
            )));
        }
        Ok(Image::from_fn(height, width, |r, c| {
            let i = (r * width + c) * CHANNELS;
            [rgb[i], rgb[i + 1], rgb[i + 2]]
        }))
    }

    pub fn to_interleaved(&self) -> Vec<u8> {
        let area = self.area();
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..area {
            for ch in 0..CHANNELS {
                out.push(self.data[ch * area + i]);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[u8] {
        let area = self.area();
        &self.data[channel * area..(channel + 1) * area]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let area = self.area();
        let i = row * self.width + col;
        [self.data[i], self.data[area + i], self.data[2 * area + i]]
    }

    fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Counter-clockwise quarter turn count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rotation {
    Deg0,
    Deg90,
    Deg180,
    Deg270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [
        Rotation::Deg0,
        Rotation::Deg90,
        Rotation::Deg180,
        Rotation::Deg270,
    ];

    pub fn from_index(k: usize) -> Option<Rotation> {
        Rotation::ALL.get(k).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn inverse(self) -> Rotation {
        Rotation::ALL[(4 - self.index()) % 4]
    }
}

/// Rotates counter-clockwise by `90 * k` degrees. For k = 1,
/// `out[r][c] = in[c][W - 1 - r]`.
pub fn rotate90(img: &Image, k: Rotation) -> Image {
    let (h, w) = (img.height, img.width);
    let (oh, ow) = match k {
        Rotation::Deg0 | Rotation::Deg180 => (h, w),
        Rotation::Deg90 | Rotation::Deg270 => (w, h),
    };
    if k == Rotation::Deg0 {
        return img.clone();
    }
    let area = h * w;
    let mut data = vec![0u8; img.data.len()];
    for ch in 0..CHANNELS {
        let src = &img.data[ch * area..(ch + 1) * area];
        let dst = &mut data[ch * area..(ch + 1) * area];
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = match k {
                    Rotation::Deg0 => (r, c),
                    Rotation::Deg90 => (c, w - 1 - r),
                    Rotation::Deg180 => (h - 1 - r, w - 1 - c),
                    Rotation::Deg270 => (h - 1 - c, r),
                };
                dst[r * ow + c] = src[sr * w + sc];
            }
        }
    }
    Image {
        height: oh,
        width: ow,
        data,
    }
}

/// ITU-R 601-2 luma plane, `(299 R + 587 G + 114 B + 500) / 1000`.
pub fn luminance(img: &Image) -> Vec<u8> {
    let area = img.area();
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..area)
        .map(|i| {
            let l = 299 * r[i] as u32 + 587 * g[i] as u32 + 114 * b[i] as u32;
            ((l + 500) / 1000).min(255) as u8
        })
        .collect()
}

/// Luma replicated into all three planes.
pub fn grayscale(img: &Image) -> Image {
    let l = luminance(img);
    let mut data = Vec::with_capacity(l.len() * CHANNELS);
    for _ in 0..CHANNELS {
        data.extend_from_slice(&l);
    }
    Image {
        height: img.height,
        width: img.width,
        data,
    }
}

#[inline]
fn blend_sample(a: u8, b: u8, f: f64) -> u8 {
    let (a, b) = (a as f64, b as f64);
    (a + f * (b - a)).round().clamp(0.0, 255.0) as u8
}

/// `clamp(round(a + f (b - a)), 0, 255)` per sample. `f` outside `[0, 1]`
/// extrapolates.
pub fn blend(a: &Image, b: &Image, f: f64) -> Result<Image> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "blend of {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if !f.is_finite() {
        return Err(Error::InvalidArgument(format!("blend factor {f}")));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| blend_sample(x, y, f))
        .collect();
    Ok(Image {
        height: a.height,
        width: a.width,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IeKind {
    Brightness,
    Contrast,
    Saturation,
    Sharpness,
    Solarization,
}

/// One enhancement degree: a blend factor, or a solarization threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degree {
    Factor(f64),
    Threshold(u16),
}

impl IeKind {
    pub const ALL: [IeKind; 5] = [
        IeKind::Brightness,
        IeKind::Contrast,
        IeKind::Saturation,
        IeKind::Sharpness,
        IeKind::Solarization,
    ];

    /// The four label degrees, identity included.
    pub fn degrees(self) -> [Degree; 4] {
        use Degree::*;
        match self {
            IeKind::Brightness | IeKind::Contrast => {
                [Factor(0.1), Factor(0.5), Factor(1.0), Factor(1.5)]
            }
            IeKind::Saturation | IeKind::Sharpness => {
                [Factor(0.0), Factor(0.5), Factor(1.0), Factor(1.5)]
            }
            IeKind::Solarization => [Threshold(0), Threshold(85), Threshold(170), Threshold(256)],
        }
    }

    /// Label index of the degree that leaves images unchanged.
    pub fn identity_index(self) -> usize {
        match self {
            IeKind::Solarization => 3,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IeKind::Brightness => "brightness",
            IeKind::Contrast => "contrast",
            IeKind::Saturation => "saturation",
            IeKind::Sharpness => "sharpness",
            IeKind::Solarization => "solarization",
        }
    }
}

impl fmt::Display for IeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown enhancement {s:?}; expected one of brightness, contrast, saturation, sharpness, solarization"
                ))
            })
    }
}

fn smooth(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    if h < 3 || w < 3 {
        return out;
    }
    let area = img.area();
    for ch in 0..CHANNELS {
        let src = &img.data[ch * area..(ch + 1) * area];
        let dst = &mut out.data[ch * area..(ch + 1) * area];
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                let mut acc = 4 * src[r * w + c] as u32;
                for dr in 0..3 {
                    for dc in 0..3 {
                        acc += src[(r + dr - 1) * w + (c + dc - 1)] as u32;
                    }
                }
                // 13 is odd, so no exact halves occur.
                dst[r * w + c] = ((acc + 6) / 13) as u8;
            }
        }
    }
    out
}

fn degenerate(img: &Image, kind: IeKind) -> Image {
    match kind {
        IeKind::Brightness => Image::filled(img.height, img.width, 0),
        IeKind::Contrast => {
            let l = luminance(img);
            let mean = if l.is_empty() {
                0.0
            } else {
                l.iter().map(|&v| v as f64).sum::<f64>() / l.len() as f64
            };
            Image::filled(img.height, img.width, (mean + 0.5).floor().min(255.0) as u8)
        }
        IeKind::Saturation => grayscale(img),
        IeKind::Sharpness => smooth(img),
        IeKind::Solarization => unreachable!("solarization has no degenerate image"),
    }
}

/// Blend between the kind's degenerate image (factor 0) and `img` (factor 1).
pub fn enhance(img: &Image, kind: IeKind, factor: f64) -> Result<Image> {
    if kind == IeKind::Solarization {
        return Err(Error::InvalidArgument(
            "solarization is threshold-based; use solarize".into(),
        ));
    }
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "enhancement factor must be finite and non-negative, got {factor}"
        )));
    }
    blend(&degenerate(img, kind), img, factor)
}

/// Inverts every sample at or above `threshold`; 256 and above leave the image unchanged.
pub fn solarize(img: &Image, threshold: u16) -> Image {
    let data = img
        .data
        .iter()
        .map(|&px| {
            if (px as u16) < threshold {
                px
            } else {
                255 - px
            }
        })
        .collect();
    Image {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Applies one degree of an enhancement kind.
pub fn apply_degree(img: &Image, kind: IeKind, degree: Degree) -> Result<Image> {
    match (kind, degree) {
        (IeKind::Solarization, Degree::Threshold(t)) => Ok(solarize(img, t)),
        (IeKind::Solarization, Degree::Factor(_)) | (_, Degree::Threshold(_)) => Err(
            Error::InvalidArgument(format!("degree {degree:?} does not apply to {kind}")),
        ),
        (_, Degree::Factor(f)) => enhance(img, kind, f),
    }
}
